//! Weighted quaternion averaging.
//!
//! The mean of `{q_i}` with weights `{w_i}` is the dominant eigenvector of
//! `M = Σ w_i q_i q_iᵀ`. Since `q q ᵀ = (−q)(−q)ᵀ`, the result does not depend
//! on the signs of the inputs, and `M` transforms as `G M Gᵀ` under a left
//! rotation `g`, which makes the mean left-equivariant.

use crate::error::{QecError, Result};
use crate::linalg::{jacobi_eigen, SymEigen};
use crate::quat::{canonical_sign, dot4, UnitQuaternion};

/// Relative eigen-gap below which the dominant eigenvalue counts as repeated.
pub const DEGENERACY_GAP: f64 = 1e-9;

/// Quaternions with nonnegative weights, at least one positive.
#[derive(Clone, Debug)]
pub struct QuatSet {
    quats: Vec<UnitQuaternion>,
    weights: Vec<f64>,
}

impl QuatSet {
    pub fn new(quats: Vec<UnitQuaternion>, weights: Vec<f64>) -> Result<Self> {
        if quats.is_empty() {
            return Err(QecError::EmptyInput);
        }
        if quats.len() != weights.len() {
            return Err(QecError::ShapeMismatch(format!(
                "{} quaternions, {} weights",
                quats.len(),
                weights.len()
            )));
        }
        if let Some(&w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(QecError::NegativeWeight(w));
        }
        if weights.iter().sum::<f64>() <= 0.0 {
            return Err(QecError::AllZeroWeights);
        }
        Ok(Self { quats, weights })
    }

    pub fn uniform(quats: Vec<UnitQuaternion>) -> Result<Self> {
        let n = quats.len();
        Self::new(quats, vec![1.0; n])
    }

    pub fn quats(&self) -> &[UnitQuaternion] {
        &self.quats
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.quats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quats.is_empty()
    }
}

/// The symmetric PSD accumulator `Σ w_i q_i q_iᵀ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AccumulatorM(pub [[f64; 4]; 4]);

impl AccumulatorM {
    pub fn trace(&self) -> f64 {
        (0..4).map(|i| self.0[i][i]).sum()
    }
}

pub fn build_m(set: &QuatSet) -> Result<AccumulatorM> {
    Ok(AccumulatorM(accumulate(
        set.quats.iter().map(|q| q.as_array()),
        set.weights.iter().copied(),
    )))
}

pub(crate) fn accumulate(
    quats: impl Iterator<Item = [f64; 4]>,
    weights: impl Iterator<Item = f64>,
) -> [[f64; 4]; 4] {
    let mut m = [[0.0; 4]; 4];
    for (q, w) in quats.zip(weights) {
        for i in 0..4 {
            let wi = w * q[i];
            for j in i..4 {
                m[i][j] += wi * q[j];
            }
        }
    }
    for i in 0..4 {
        for j in 0..i {
            m[i][j] = m[j][i];
        }
    }
    m
}

/// Dominant eigenpair of a symmetric 4×4 matrix.
#[derive(Clone, Copy, Debug)]
pub struct DominantEigen {
    pub value: f64,
    /// Canonicalized unit eigenvector.
    pub vector: UnitQuaternion,
    /// `λ1 − λ2 < 1e-9 · λ1`: the returned vector is one of several
    /// equally dominant directions.
    pub degenerate: bool,
    pub(crate) full: SymEigen<4>,
}

impl DominantEigen {
    pub fn gap(&self) -> f64 {
        self.full.values[0] - self.full.values[1]
    }
}

pub fn eig_sym4_max(m: &AccumulatorM) -> DominantEigen {
    dominant_eigen(&m.0)
}

pub(crate) fn dominant_eigen(m: &[[f64; 4]; 4]) -> DominantEigen {
    let mut full = jacobi_eigen(*m);
    let s = canonical_sign(&full.vectors[0]);
    for c in full.vectors[0].iter_mut() {
        *c *= s;
    }
    let value = full.values[0];
    let gap = value - full.values[1];
    DominantEigen {
        value,
        vector: UnitQuaternion::from_unit_unchecked(full.vectors[0]),
        degenerate: !(gap >= DEGENERACY_GAP * value.abs()) || value <= 0.0,
        full,
    }
}

/// Weighted mean together with the eigen information used for gradients.
#[derive(Clone, Copy, Debug)]
pub struct MeanOutcome {
    pub mean: UnitQuaternion,
    pub eigen: DominantEigen,
}

impl MeanOutcome {
    pub fn degenerate(&self) -> bool {
        self.eigen.degenerate
    }
}

pub fn weighted_mean(set: &QuatSet) -> Result<UnitQuaternion> {
    Ok(weighted_mean_outcome(set)?.mean)
}

pub fn weighted_mean_outcome(set: &QuatSet) -> Result<MeanOutcome> {
    let m = build_m(set)?;
    let eigen = eig_sym4_max(&m);
    Ok(MeanOutcome {
        mean: eigen.vector,
        eigen,
    })
}

/// Gradients of a scalar loss with respect to every input of the mean.
#[derive(Clone, Debug)]
pub struct MeanGrad {
    pub d_quats: Vec<[f64; 4]>,
    pub d_weights: Vec<f64>,
}

/// Back-propagates `upstream = ∂L/∂mean` through the dominant eigenvector.
///
/// With `v` the eigenvector and `P = Σ_{k≥2} e_k e_kᵀ / (λ1 − λk)` the
/// deflated resolvent, `dv = P dM v`. Setting `u = P · upstream` gives
/// `∂L/∂w_i = (uᵀq_i)(vᵀq_i)` and `∂L/∂q_i = w_i ((vᵀq_i) u + (uᵀq_i) v)`.
pub fn weighted_mean_grad(set: &QuatSet, upstream: [f64; 4]) -> Result<MeanGrad> {
    let outcome = weighted_mean_outcome(set)?;
    let u = resolvent_apply(&outcome.eigen, &upstream)?;
    let v = outcome.mean.as_array();
    let mut d_quats = Vec::with_capacity(set.len());
    let mut d_weights = Vec::with_capacity(set.len());
    for (q, &w) in set.quats.iter().zip(&set.weights) {
        let q = q.as_array();
        let (dw, dq) = mean_input_grad(&q, w, &u, &v);
        d_weights.push(dw);
        d_quats.push(dq);
    }
    Ok(MeanGrad { d_quats, d_weights })
}

/// `u = P g` with `P` the deflated resolvent of the dominant eigenpair.
pub(crate) fn resolvent_apply(eigen: &DominantEigen, g: &[f64; 4]) -> Result<[f64; 4]> {
    if eigen.degenerate {
        return Err(QecError::DegenerateSpectrum {
            gap: eigen.gap(),
            lambda: eigen.value,
        });
    }
    let mut u = [0.0; 4];
    for k in 1..4 {
        let e = &eigen.full.vectors[k];
        let coeff = dot4(e, g) / (eigen.full.values[0] - eigen.full.values[k]);
        for r in 0..4 {
            u[r] += coeff * e[r];
        }
    }
    Ok(u)
}

#[inline]
pub(crate) fn mean_input_grad(q: &[f64; 4], w: f64, u: &[f64; 4], v: &[f64; 4]) -> (f64, [f64; 4]) {
    let uq = dot4(u, q);
    let vq = dot4(v, q);
    let dq = [
        w * (vq * u[0] + uq * v[0]),
        w * (vq * u[1] + uq * v[1]),
        w * (vq * u[2] + uq * v[2]),
        w * (vq * u[3] + uq * v[3]),
    ];
    (uq * vq, dq)
}
