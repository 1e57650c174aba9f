//! `L_q` Weiszfeld iterations on the quaternion subspaces.
//!
//! Each unit quaternion `q_i` defines the line `span(q_i)` through the origin
//! of `R⁴` (so `q_i` and `−q_i` coincide). The operator `A_i = I − q_i q_iᵀ`
//! maps a point to its residual from that line, and
//! `||A_i x|| = sin(δ(x, q_i) / 2)` for unit `x`. The solver minimizes
//!
//! ```text
//! C_q(x) = Σ_i ||A_i x||^q,   ||x|| = 1,  1 ≤ q ≤ 2
//! ```
//!
//! by iteratively reweighted least squares: with `w_i = ||A_i x_t||^{q−2}`,
//! `x_{t+1} = argmin Σ w_i ||A_i x||²` over the unit sphere, which is the
//! dominant eigenvector of `Σ w_i q_i q_iᵀ`, i.e. a weighted quaternion mean.
//! Because `t ↦ t^{q/2}` is concave the cost never increases. At `q = 2` all
//! weights are one and a single step returns the plain quaternion mean.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{QecError, Result};
use crate::mean::{accumulate, dominant_eigen};
use crate::quat::{dot4, UnitQuaternion};

/// Weight used in place of `r^{q−2}` once an iterate sits on a subspace.
pub const WEIGHT_CAP: f64 = 1e12;
const HIT_RADIUS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuatSubspace {
    q: UnitQuaternion,
}

impl QuatSubspace {
    pub fn new(q: UnitQuaternion) -> Self {
        Self { q }
    }

    pub fn normal(&self) -> UnitQuaternion {
        self.q
    }

    /// `I − q qᵀ`.
    pub fn projection_matrix(&self) -> [[f64; 4]; 4] {
        let q = self.q.as_array();
        let mut a = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                a[i][j] = if i == j { 1.0 } else { 0.0 } - q[i] * q[j];
            }
        }
        a
    }

    /// `(I − q qᵀ) p`: the component of `p` orthogonal to `q`.
    pub fn project(&self, p: &[f64; 4]) -> [f64; 4] {
        project_affine(self, p)
    }

    /// `||(I − q qᵀ) x||`, the distance from `x` to the line through `±q`.
    pub fn residual(&self, x: &[f64; 4]) -> f64 {
        let p = self.project(x);
        dot4(&p, &p).sqrt()
    }
}

pub fn project_affine(s: &QuatSubspace, p: &[f64; 4]) -> [f64; 4] {
    let q = s.q.as_array();
    let c = dot4(&q, p);
    [
        p[0] - c * q[0],
        p[1] - c * q[1],
        p[2] - c * q[2],
        p[3] - c * q[3],
    ]
}

#[derive(Clone, Debug)]
pub struct WeiszfeldProblem {
    pub subspaces: Vec<QuatSubspace>,
    pub q_norm: f64,
    pub max_iters: usize,
    /// Angular change (radians) below which iteration stops.
    pub tol: f64,
}

impl WeiszfeldProblem {
    pub fn new(quats: &[UnitQuaternion], q_norm: f64) -> Result<Self> {
        let p = Self {
            subspaces: quats.iter().map(|q| QuatSubspace::new(*q)).collect(),
            q_norm,
            max_iters: 100,
            tol: 1e-9,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.subspaces.len() <= 2 {
            return Err(QecError::InvalidProblem(format!(
                "need more than two subspaces, got {}",
                self.subspaces.len()
            )));
        }
        if !(1.0..=2.0).contains(&self.q_norm) {
            return Err(QecError::InvalidProblem(format!(
                "q_norm {} outside [1, 2]",
                self.q_norm
            )));
        }
        if self.max_iters == 0 || !(self.tol >= 0.0) {
            return Err(QecError::InvalidProblem("max_iters must be positive and tol nonnegative".into()));
        }
        Ok(())
    }
}

/// `Σ_i ||A_i x||^q`.
pub fn cost_lq(x: &[f64; 4], prob: &WeiszfeldProblem) -> f64 {
    prob.subspaces
        .iter()
        .map(|s| s.residual(x).powf(prob.q_norm))
        .sum()
}

#[derive(Clone, Debug)]
pub struct WeiszfeldSolution {
    pub solution: UnitQuaternion,
    /// `C_q` at the start point and after every iteration.
    pub trace: Vec<f64>,
    /// Iterates `x_1, x_2, …` (canonicalized).
    pub iterates: Vec<UnitQuaternion>,
    pub converged: bool,
    /// Number of weight evaluations that hit the cap.
    pub exact_hits: usize,
    /// The start point lay on a subspace and was nudged off it.
    pub perturbed: bool,
}

/// IRLS weights `||A_i x||^{q−2}` with the cap applied. Returns the number of
/// capped entries.
pub fn weiszfeld_weights(x: &[f64; 4], prob: &WeiszfeldProblem, out: &mut Vec<f64>) -> usize {
    out.clear();
    let mut hits = 0;
    let expo = prob.q_norm - 2.0;
    for s in &prob.subspaces {
        let r = s.residual(x);
        let w = if expo == 0.0 {
            1.0
        } else if r < HIT_RADIUS {
            hits += 1;
            WEIGHT_CAP
        } else {
            r.powf(expo).min(WEIGHT_CAP)
        };
        out.push(w);
    }
    hits
}

pub fn weiszfeld_solve(prob: &WeiszfeldProblem, x0: &UnitQuaternion) -> Result<WeiszfeldSolution> {
    prob.validate()?;
    let mut x = *x0;
    let mut perturbed = false;
    if prob.subspaces.iter().any(|s| s.residual(&x.as_array()) < HIT_RADIUS) {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        x = x.hamilton(&UnitQuaternion::random_with_angle(&mut rng, 1e-6));
        perturbed = true;
    }
    let mut trace = vec![cost_lq(&x.as_array(), prob)];
    let mut iterates = Vec::new();
    let mut weights = Vec::with_capacity(prob.subspaces.len());
    let mut exact_hits = 0;
    let mut converged = false;
    for _ in 0..prob.max_iters {
        exact_hits += weiszfeld_weights(&x.as_array(), prob, &mut weights);
        let m = accumulate(
            prob.subspaces.iter().map(|s| s.normal().as_array()),
            weights.iter().copied(),
        );
        let next = dominant_eigen(&m).vector;
        let change = next.geodesic_distance(&x);
        x = next;
        iterates.push(x);
        trace.push(cost_lq(&x.as_array(), prob));
        if change < prob.tol {
            converged = true;
            break;
        }
    }
    Ok(WeiszfeldSolution {
        solution: x,
        trace,
        iterates,
        converged,
        exact_hits,
        perturbed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mean::{weighted_mean, QuatSet};
    use rand::Rng;

    fn e(i: usize) -> UnitQuaternion {
        let mut a = [0.0; 4];
        a[i] = 1.0;
        UnitQuaternion::from_array(a)
    }

    #[test]
    fn projection_examples() {
        let s = QuatSubspace::new(e(0));
        assert_eq!(project_affine(&s, &[1.0, 2.0, 3.0, 4.0]), [0.0, 2.0, 3.0, 4.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let q = UnitQuaternion::random(&mut rng);
        let s = QuatSubspace::new(q);
        let p = s.project(&q.as_array());
        assert!(p.iter().all(|c| c.abs() < 1e-15));
        let x = [0.3, -1.2, 2.0, 0.7];
        let once = s.project(&x);
        let twice = s.project(&once);
        assert!(once.iter().zip(&twice).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(dot4(&once, &q.as_array()).abs() < 1e-12);
    }

    #[test]
    fn projection_matrix_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..20 {
            let s = QuatSubspace::new(UnitQuaternion::random(&mut rng));
            let a = s.projection_matrix();
            for i in 0..4 {
                for j in 0..4 {
                    assert!((a[i][j] - a[j][i]).abs() < 1e-12);
                    let aa: f64 = (0..4).map(|k| a[i][k] * a[k][j]).sum();
                    assert!((aa - a[i][j]).abs() < 1e-12);
                }
            }
            let q = s.normal().as_array();
            let tr: f64 = (0..4).map(|i| q[i] * q[i]).sum();
            assert!((tr - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cost_examples() {
        let mut prob = WeiszfeldProblem::new(&[e(0), e(0), e(0)], 2.0).unwrap();
        assert!(cost_lq(&[1.0, 0.0, 0.0, 0.0], &prob) < 1e-30);
        prob.subspaces.truncate(1);
        assert_eq!(cost_lq(&[0.0, 3.0, 0.0, 0.0], &prob), 9.0);
        prob.q_norm = 1.0;
        assert_eq!(cost_lq(&[0.0, 3.0, 0.0, 0.0], &prob), 3.0);
    }

    #[test]
    fn invalid_problems() {
        assert!(WeiszfeldProblem::new(&[e(0), e(1)], 2.0).is_err());
        assert!(WeiszfeldProblem::new(&[e(0), e(1), e(2)], 0.5).is_err());
        assert!(WeiszfeldProblem::new(&[e(0), e(1), e(2)], 2.5).is_err());
    }

    #[test]
    fn l2_matches_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let n = rng.gen_range(3..10);
            let qs: Vec<_> = (0..n).map(|_| UnitQuaternion::random(&mut rng)).collect();
            let prob = WeiszfeldProblem::new(&qs, 2.0).unwrap();
            let sol = weiszfeld_solve(&prob, &UnitQuaternion::random(&mut rng)).unwrap();
            let mean = weighted_mean(&QuatSet::uniform(qs).unwrap()).unwrap();
            assert!(sol.solution.geodesic_distance(&mean) <= 1e-6);
            assert!(sol.iterates[0].geodesic_distance(&mean) <= 1e-6);
        }
    }

    #[test]
    fn identical_subspaces() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let qs = UnitQuaternion::random(&mut rng);
        for q_norm in [1.0, 1.5, 2.0] {
            let prob = WeiszfeldProblem::new(&[qs, qs.neg(), qs], q_norm).unwrap();
            let sol = weiszfeld_solve(&prob, &UnitQuaternion::random(&mut rng)).unwrap();
            assert!(sol.solution.geodesic_distance(&qs) < 1e-6);
        }
    }

    #[test]
    fn start_on_subspace_is_perturbed() {
        let qs = [e(0), e(1), e(2), e(3)];
        let prob = WeiszfeldProblem::new(&qs, 1.0).unwrap();
        let sol = weiszfeld_solve(&prob, &e(1)).unwrap();
        assert!(sol.perturbed);
        assert!(sol.trace.iter().all(|c| c.is_finite()));
    }

    #[test]
    fn l1_is_robust_to_an_outlier() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let center = UnitQuaternion::random(&mut rng);
        let mut qs: Vec<_> = (0..5)
            .map(|_| center.hamilton(&UnitQuaternion::random_with_angle(&mut rng, 0.05)))
            .collect();
        let inlier_mean = weighted_mean(&QuatSet::uniform(qs.clone()).unwrap()).unwrap();
        qs.push(center.hamilton(&UnitQuaternion::from_axis_angle([0.0, 1.0, 0.0], 2.5)));
        let x0 = center.hamilton(&UnitQuaternion::random_with_angle(&mut rng, 0.3));
        let l1 = weiszfeld_solve(&WeiszfeldProblem::new(&qs, 1.0).unwrap(), &x0).unwrap();
        let l2 = weiszfeld_solve(&WeiszfeldProblem::new(&qs, 2.0).unwrap(), &x0).unwrap();
        let d1 = l1.solution.geodesic_distance(&inlier_mean);
        let d2 = l2.solution.geodesic_distance(&inlier_mean);
        assert!(d1 <= 0.05, "{d1}");
        assert!(d1 < d2, "{d1} vs {d2}");
    }
}
