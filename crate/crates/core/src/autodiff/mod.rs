//! A small reverse-mode tape over flat `f64` buffers.
//!
//! Every operation appends a node holding its value and whatever it needs
//! for the backward pass. Quaternion operations work on trailing 4-vectors.

pub mod gradcheck;
mod mlp;
mod optim;

pub use mlp::{Hidden, MlpParams, MlpVars};
pub use optim::Adam;

use crate::error::{QecError, Result};
use crate::mean::{accumulate, dominant_eigen, mean_input_grad, resolvent_apply, DominantEigen};
use crate::quat::{canonical_sign, hamilton_raw};

/// |dot| is clamped to this in the derivative of `2·acos(|dot|)`.
pub const ACOS_CLAMP: f64 = 1.0 - 1e-7;
/// Vectors shorter than this normalize to the identity quaternion.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    AddBias { a: Var, bias: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: f64 },
    Relu { a: Var },
    Sigmoid { a: Var },
    SumGroups { a: Var, size: usize },
    Gather { a: Var, idx: Vec<usize>, row: usize },
    Reshape { a: Var },
    Normalize4 { a: Var, norms: Vec<f64> },
    Canon4 { a: Var, signs: Vec<f64> },
    Hamilton { a: Var, b: Var },
    Conjugate { a: Var },
    Geodesic { a: Var, b: Var },
    RotateInv { q: Var, x: Var },
    QuatMean { v: Var, w: Var, size: usize, eig: Vec<DominantEigen> },
    SpreadLoss { a: Var, target: usize, margin: f64 },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    zero_norm_events: usize,
    degenerate_means: usize,
}

fn mismatch(what: &str, a: &[usize], b: &[usize]) -> QecError {
    QecError::ShapeMismatch(format!("{what}: {a:?} vs {b:?}"))
}

#[inline]
fn quat(v: &[f64], i: usize) -> [f64; 4] {
    [v[4 * i], v[4 * i + 1], v[4 * i + 2], v[4 * i + 3]]
}

#[inline]
fn conj(q: &[f64; 4]) -> [f64; 4] {
    [q[0], -q[1], -q[2], -q[3]]
}

/// Vector part of `q̄ (0, x) q`; the rotation by `q⁻¹` when `q` is unit.
#[inline]
pub(crate) fn rotate_inv_raw(q: &[f64; 4], x: &[f64]) -> [f64; 3] {
    let p = hamilton_raw(&hamilton_raw(&conj(q), &[0.0, x[0], x[1], x[2]]), q);
    [p[1], p[2], p[3]]
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Near-zero vectors that `normalize4` replaced by the identity.
    pub fn zero_norm_events(&self) -> usize {
        self.zero_norm_events
    }

    /// Groups whose mean had no simple dominant eigenvalue; backward through
    /// them fails.
    pub fn degenerate_means(&self) -> usize {
        self.degenerate_means
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { value, shape, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].grad)
    }

    /// A constant input.
    pub fn constant(&mut self, value: Vec<f64>, shape: &[usize]) -> Result<Var> {
        self.input(value, shape, false)
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Vec<f64>, shape: &[usize]) -> Result<Var> {
        self.input(value, shape, true)
    }

    fn input(&mut self, value: Vec<f64>, shape: &[usize], grad: bool) -> Result<Var> {
        if value.len() != shape.iter().product::<usize>() {
            return Err(QecError::ShapeMismatch(format!("{} values for shape {shape:?}", value.len())));
        }
        Ok(self.push(value, shape.to_vec(), Op::Leaf, grad))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn quat_count(&self, v: Var, what: &str) -> Result<usize> {
        let n = self.value(v).len();
        if n % 4 != 0 {
            return Err(QecError::ShapeMismatch(format!("{what}: {n} values are not 4-vectors")));
        }
        Ok(n / 4)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, y) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += x * y;
                }
            }
        }
        let g = self.needs(&[a, b]);
        Ok(self.push(out, vec![m, n], Op::MatMul { a, b, m, k, n }, g))
    }

    /// Adds a length-`n` bias to every row of an `m × n` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(a).last().unwrap_or(&0);
        if self.value(bias).len() != n || n == 0 {
            return Err(mismatch("add_bias", self.shape(a), self.shape(bias)));
        }
        let bv = self.value(bias);
        let out: Vec<f64> = self.value(a).chunks(n).flat_map(|r| r.iter().zip(bv).map(|(x, y)| x + y)).collect();
        let g = self.needs(&[a, bias]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::AddBias { a, bias }, g))
    }

    fn same_len(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).len() != self.value(b).len() {
            return Err(mismatch(what, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let g = self.needs(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Add { a, b }, g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let g = self.needs(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Mul { a, b }, g))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let g = self.needs(&[a]);
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Scale { a, s }, g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.max(0.0)).collect();
        let g = self.needs(&[a]);
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Relu { a }, g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| crate::routing::sigmoid(x)).collect();
        let g = self.needs(&[a]);
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Sigmoid { a }, g)
    }

    /// Sums consecutive runs of `size` values.
    pub fn sum_groups(&mut self, a: Var, size: usize) -> Result<Var> {
        let n = self.value(a).len();
        if size == 0 || n % size != 0 {
            return Err(QecError::ShapeMismatch(format!("{n} values in groups of {size}")));
        }
        let out: Vec<f64> = self.value(a).chunks(size).map(|c| c.iter().sum()).collect();
        let g = self.needs(&[a]);
        let len = out.len();
        Ok(self.push(out, vec![len], Op::SumGroups { a, size }, g))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        self.sum_groups(a, n)
    }

    /// Row `r` of the output is row `idx[r]` of `a`, rows being `row` values.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>, row: usize) -> Result<Var> {
        let n = self.value(a).len();
        if row == 0 || n % row != 0 {
            return Err(QecError::ShapeMismatch(format!("{n} values in rows of {row}")));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n / row) {
            return Err(QecError::ShapeMismatch(format!("gather index {bad} past {} rows", n / row)));
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in &idx {
            out.extend_from_slice(&av[i * row..(i + 1) * row]);
        }
        let g = self.needs(&[a]);
        let shape = vec![idx.len(), row];
        Ok(self.push(out, shape, Op::Gather { a, idx, row }, g))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.value(a).len() != shape.iter().product::<usize>() {
            return Err(mismatch("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        let g = self.needs(&[a]);
        Ok(self.push(out, shape.to_vec(), Op::Reshape { a }, g))
    }

    /// Unit-normalizes every 4-vector; vectors shorter than `ZERO_NORM`
    /// become the identity and pass no gradient.
    pub fn normalize4(&mut self, a: Var) -> Result<Var> {
        let n = self.quat_count(a, "normalize4")?;
        let av = self.value(a);
        let mut out = Vec::with_capacity(4 * n);
        let mut norms = Vec::with_capacity(n);
        let mut events = 0;
        for i in 0..n {
            let q = quat(av, i);
            let len = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            if len < ZERO_NORM {
                out.extend_from_slice(&[1.0, 0.0, 0.0, 0.0]);
                norms.push(0.0);
                events += 1;
            } else {
                out.extend(q.iter().map(|x| x / len));
                norms.push(len);
            }
        }
        self.zero_norm_events += events;
        let g = self.needs(&[a]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Normalize4 { a, norms }, g))
    }

    /// Flips each 4-vector so its first nonzero component is positive.
    pub fn canon4(&mut self, a: Var) -> Result<Var> {
        let n = self.quat_count(a, "canon4")?;
        let av = self.value(a);
        let signs: Vec<f64> = (0..n).map(|i| canonical_sign(&quat(av, i))).collect();
        let out = av.iter().enumerate().map(|(k, x)| x * signs[k / 4]).collect();
        let g = self.needs(&[a]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Canon4 { a, signs }, g))
    }

    /// Elementwise Hamilton product `a_i ∘ b_i` (no renormalization).
    pub fn hamilton(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "hamilton")?;
        let n = self.quat_count(a, "hamilton")?;
        let (av, bv) = (self.value(a), self.value(b));
        let out = (0..n).flat_map(|i| hamilton_raw(&quat(av, i), &quat(bv, i))).collect();
        let g = self.needs(&[a, b]);
        Ok(self.push(out, vec![n, 4], Op::Hamilton { a, b }, g))
    }

    pub fn conjugate(&mut self, a: Var) -> Result<Var> {
        let n = self.quat_count(a, "conjugate")?;
        let out = (0..n).flat_map(|i| conj(&quat(self.value(a), i))).collect();
        let g = self.needs(&[a]);
        Ok(self.push(out, vec![n, 4], Op::Conjugate { a }, g))
    }

    /// `2·acos(|a_i · b_i|)` per quaternion pair.
    pub fn geodesic(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "geodesic")?;
        let n = self.quat_count(a, "geodesic")?;
        let (av, bv) = (self.value(a), self.value(b));
        let out = (0..n)
            .map(|i| {
                let d: f64 = (0..4).map(|c| av[4 * i + c] * bv[4 * i + c]).sum();
                2.0 * d.abs().min(1.0).acos()
            })
            .collect();
        let g = self.needs(&[a, b]);
        Ok(self.push(out, vec![n], Op::Geodesic { a, b }, g))
    }

    /// Rotates each 3-vector `x_i` by `q_i⁻¹`.
    pub fn rotate_inv(&mut self, q: Var, x: Var) -> Result<Var> {
        let n = self.quat_count(q, "rotate_inv")?;
        if self.value(x).len() != 3 * n {
            return Err(mismatch("rotate_inv", self.shape(q), self.shape(x)));
        }
        let (qv, xv) = (self.value(q), self.value(x));
        let out = (0..n).flat_map(|i| rotate_inv_raw(&quat(qv, i), &xv[3 * i..3 * i + 3])).collect();
        let g = self.needs(&[q, x]);
        Ok(self.push(out, vec![n, 3], Op::RotateInv { q, x }, g))
    }

    /// Weighted chordal mean of each run of `size` quaternions in `v`
    /// (weights `w`, one per quaternion). Output is one canonical unit
    /// quaternion per group.
    pub fn quat_mean(&mut self, v: Var, w: Var, size: usize) -> Result<Var> {
        let n = self.quat_count(v, "quat_mean")?;
        if self.value(w).len() != n || size == 0 || n % size != 0 {
            return Err(mismatch("quat_mean", self.shape(v), self.shape(w)));
        }
        let groups = n / size;
        let (vv, wv) = (self.value(v), self.value(w));
        let mut out = Vec::with_capacity(4 * groups);
        let mut eig = Vec::with_capacity(groups);
        let mut degenerate = 0;
        for g in 0..groups {
            let m = accumulate((g * size..(g + 1) * size).map(|i| quat(vv, i)), wv[g * size..(g + 1) * size].iter().copied());
            let e = dominant_eigen(&m);
            degenerate += e.degenerate as usize;
            out.extend_from_slice(&e.vector.as_array());
            eig.push(e);
        }
        self.degenerate_means += degenerate;
        let gr = self.needs(&[v, w]);
        Ok(self.push(out, vec![groups, 4], Op::QuatMean { v, w, size, eig }, gr))
    }

    /// `Σ_{i≠t} max(0, m − (a_t − a_i))²`.
    pub fn spread_loss(&mut self, a: Var, target: usize, margin: f64) -> Result<Var> {
        let av = self.value(a);
        if target >= av.len() {
            return Err(QecError::BadTarget {
                target,
                classes: av.len(),
            });
        }
        let at = av[target];
        let loss = av
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != target)
            .map(|(_, &ai)| (margin - (at - ai)).max(0.0).powi(2))
            .sum();
        let g = self.needs(&[a]);
        Ok(self.push(vec![loss], vec![1], Op::SpreadLoss { a, target, margin }, g))
    }

    /// Geodesic distance between two single quaternions.
    pub fn rotation_loss(&mut self, pred: Var, truth: Var) -> Result<Var> {
        if self.value(pred).len() != 4 || self.value(truth).len() != 4 {
            return Err(mismatch("rotation_loss", self.shape(pred), self.shape(truth)));
        }
        self.geodesic(pred, truth)
    }

    /// Reverse pass from a scalar node. Fails if the gradient has to cross
    /// a quaternion mean with a repeated top eigenvalue.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(QecError::ShapeMismatch(format!("backward from shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.grad {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            self.backward_node(node, &dy, &mut grads)?;
            grads[id] = Some(dy);
        }
        Ok(Gradients(grads))
    }

    fn backward_node(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.nodes[v.0].grad {
                let g = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
                f(g);
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (self.value(a), self.value(b));
                acc(a, &mut |ga| {
                    for i in 0..m {
                        let dr = &dy[i * n..(i + 1) * n];
                        for p in 0..k {
                            ga[i * k + p] += dr.iter().zip(&bv[p * n..(p + 1) * n]).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..m {
                        let dr = &dy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, d) in gb[p * n..(p + 1) * n].iter_mut().zip(dr) {
                                *o += x * d;
                            }
                        }
                    }
                });
            }
            &Op::AddBias { a, bias } => {
                acc(a, &mut |ga| ga.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                let n = self.value(bias).len();
                acc(bias, &mut |gb| {
                    for r in dy.chunks(n) {
                        gb.iter_mut().zip(r).for_each(|(g, d)| *g += d);
                    }
                });
            }
            &Op::Add { a, b } => {
                acc(a, &mut |ga| ga.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                acc(b, &mut |gb| gb.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                acc(a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += dy[i] * bv[i];
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += dy[i] * av[i];
                    }
                });
            }
            &Op::Scale { a, s } => acc(a, &mut |ga| ga.iter_mut().zip(dy).for_each(|(g, d)| *g += s * d)),
            &Op::Relu { a } => {
                let av = self.value(a);
                acc(a, &mut |ga| {
                    for i in 0..ga.len() {
                        if av[i] > 0.0 {
                            ga[i] += dy[i];
                        }
                    }
                });
            }
            &Op::Sigmoid { a } => {
                let y = &node.value;
                acc(a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += dy[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            &Op::SumGroups { a, size } => acc(a, &mut |ga| {
                for (i, g) in ga.iter_mut().enumerate() {
                    *g += dy[i / size];
                }
            }),
            Op::Gather { a, idx, row } => acc(*a, &mut |ga| {
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..*row {
                        ga[i * row + c] += dy[r * row + c];
                    }
                }
            }),
            &Op::Reshape { a } => acc(a, &mut |ga| ga.iter_mut().zip(dy).for_each(|(g, d)| *g += d)),
            Op::Normalize4 { a, norms } => {
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for (i, &len) in norms.iter().enumerate() {
                        if len == 0.0 {
                            continue;
                        }
                        let yq = quat(y, i);
                        let d = quat(dy, i);
                        let yd: f64 = (0..4).map(|c| yq[c] * d[c]).sum();
                        for c in 0..4 {
                            ga[4 * i + c] += (d[c] - yd * yq[c]) / len;
                        }
                    }
                });
            }
            Op::Canon4 { a, signs } => acc(*a, &mut |ga| {
                for (k, g) in ga.iter_mut().enumerate() {
                    *g += signs[k / 4] * dy[k];
                }
            }),
            &Op::Hamilton { a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let n = av.len() / 4;
                // <p r, y> = <p, y r̄> = <r, p̄ y>
                acc(a, &mut |ga| {
                    for i in 0..n {
                        let d = hamilton_raw(&quat(dy, i), &conj(&quat(bv, i)));
                        ga[4 * i..4 * i + 4].iter_mut().zip(d).for_each(|(g, x)| *g += x);
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..n {
                        let d = hamilton_raw(&conj(&quat(av, i)), &quat(dy, i));
                        gb[4 * i..4 * i + 4].iter_mut().zip(d).for_each(|(g, x)| *g += x);
                    }
                });
            }
            &Op::Conjugate { a } => acc(a, &mut |ga| {
                for (k, g) in ga.iter_mut().enumerate() {
                    *g += if k % 4 == 0 { dy[k] } else { -dy[k] };
                }
            }),
            &Op::Geodesic { a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let n = av.len() / 4;
                let coef: Vec<f64> = (0..n)
                    .map(|i| {
                        let d: f64 = (0..4).map(|c| av[4 * i + c] * bv[4 * i + c]).sum();
                        let c = d.abs().min(ACOS_CLAMP);
                        let s = if d < 0.0 { -1.0 } else { 1.0 };
                        -2.0 * s / (1.0 - c * c).sqrt() * dy[i]
                    })
                    .collect();
                acc(a, &mut |ga| {
                    for (k, g) in ga.iter_mut().enumerate() {
                        *g += coef[k / 4] * bv[k];
                    }
                });
                acc(b, &mut |gb| {
                    for (k, g) in gb.iter_mut().enumerate() {
                        *g += coef[k / 4] * av[k];
                    }
                });
            }
            &Op::RotateInv { q, x } => {
                let (qv, xv) = (self.value(q), self.value(x));
                let n = qv.len() / 4;
                // d/dq <y, q̄ x̂ q> = −2 x̂ q ŷ for pure x̂, ŷ; d/dx = rotation by q.
                acc(q, &mut |gq| {
                    for i in 0..n {
                        let xh = [0.0, xv[3 * i], xv[3 * i + 1], xv[3 * i + 2]];
                        let yh = [0.0, dy[3 * i], dy[3 * i + 1], dy[3 * i + 2]];
                        let d = hamilton_raw(&hamilton_raw(&xh, &quat(qv, i)), &yh);
                        for c in 0..4 {
                            gq[4 * i + c] -= 2.0 * d[c];
                        }
                    }
                });
                acc(x, &mut |gx| {
                    for i in 0..n {
                        let qi = quat(qv, i);
                        let r = rotate_inv_raw(&conj(&qi), &dy[3 * i..3 * i + 3]);
                        gx[3 * i..3 * i + 3].iter_mut().zip(r).for_each(|(g, v)| *g += v);
                    }
                });
            }
            Op::QuatMean { v, w, size, eig } => {
                let (vv, wv) = (self.value(*v), self.value(*w));
                let mut us = Vec::with_capacity(eig.len());
                for (g, e) in eig.iter().enumerate() {
                    let up = quat(dy, g);
                    if up.iter().all(|x| *x == 0.0) {
                        us.push(None);
                    } else {
                        us.push(Some(resolvent_apply(e, &up)?));
                    }
                }
                let mut dq = vec![0.0; vv.len()];
                let mut dw = vec![0.0; wv.len()];
                for (g, u) in us.iter().enumerate() {
                    let Some(u) = u else { continue };
                    let mean = quat(&node.value, g);
                    for i in g * size..(g + 1) * size {
                        let (gw, gq) = mean_input_grad(&quat(vv, i), wv[i], u, &mean);
                        dw[i] = gw;
                        dq[4 * i..4 * i + 4].copy_from_slice(&gq);
                    }
                }
                acc(*v, &mut |g| g.iter_mut().zip(&dq).for_each(|(a, b)| *a += b));
                acc(*w, &mut |g| g.iter_mut().zip(&dw).for_each(|(a, b)| *a += b));
            }
            &Op::SpreadLoss { a, target, margin } => {
                let av = self.value(a);
                acc(a, &mut |ga| {
                    for (i, &ai) in av.iter().enumerate() {
                        if i == target {
                            continue;
                        }
                        let h = (margin - (av[target] - ai)).max(0.0);
                        ga[i] += 2.0 * h * dy[0];
                        ga[target] -= 2.0 * h * dy[0];
                    }
                });
            }
        }
        Ok(())
    }
}

/// Gradients from one backward pass, indexed by `Var`.
#[derive(Debug)]
pub struct Gradients(Vec<Option<Vec<f64>>>);

impl Gradients {
    /// `None` when the variable did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.0.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like `get`, with zeros for untouched variables.
    pub fn dense(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; len])
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{op_checks, project};
    use super::*;
    use crate::quat::UnitQuaternion;

    #[test]
    fn every_op_matches_finite_differences() {
        for seed in 0..3 {
            for (name, e) in op_checks(seed) {
                assert!(e < 1e-4, "{name}: rel err {e}");
            }
        }
    }

    #[test]
    fn rotate_inv_value() {
        let mut t = Tape::new();
        let q = UnitQuaternion::from_axis_angle([0.0, 0.0, 1.0], 0.7);
        let x = [0.3, -1.2, 0.7];
        let qv = t.constant(q.as_array().to_vec(), &[1, 4]).unwrap();
        let xv = t.constant(x.to_vec(), &[1, 3]).unwrap();
        let r = t.rotate_inv(qv, xv).unwrap();
        let expect = q.inverse().rotate_point(x);
        for a in 0..3 {
            assert!((t.value(r)[a] - expect[a]).abs() < 1e-12);
        }
    }

    #[test]
    fn value_examples() {
        let mut t = Tape::new();
        let z = t.constant(vec![0.0], &[1]).unwrap();
        let s = t.sigmoid(z);
        assert_eq!(t.value(s), &[0.5]);
        let q = t.constant(vec![2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], &[2, 4]).unwrap();
        let n = t.normalize4(q).unwrap();
        assert_eq!(t.value(n), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(t.zero_norm_events(), 1);
        let a = t.constant(vec![0.9, 0.1], &[2]).unwrap();
        let l = t.spread_loss(a, 0, 0.2).unwrap();
        assert_eq!(t.value(l), &[0.0]);
        let a = t.constant(vec![0.5, 0.5], &[2]).unwrap();
        let l = t.spread_loss(a, 0, 0.2).unwrap();
        assert!((t.value(l)[0] - 0.04).abs() < 1e-15);
        let a = t.constant(vec![0.1, 0.9], &[2]).unwrap();
        let l = t.spread_loss(a, 0, 0.2).unwrap();
        assert!((t.value(l)[0] - 1.0).abs() < 1e-15);
        assert!(matches!(t.spread_loss(a, 2, 0.2), Err(QecError::BadTarget { .. })));
        let i = t.constant(vec![1.0, 0.0, 0.0, 0.0], &[4]).unwrap();
        let r = t.constant(vec![0.0, 1.0, 0.0, 0.0], &[4]).unwrap();
        let d0 = t.rotation_loss(i, i).unwrap();
        let d1 = t.rotation_loss(i, r).unwrap();
        assert_eq!(t.value(d0), &[0.0]);
        assert!((t.value(d1)[0] - std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::new();
        let a = t.constant(vec![0.0; 6], &[2, 3]).unwrap();
        let b = t.constant(vec![0.0; 6], &[2, 3]).unwrap();
        assert!(t.matmul(a, b).is_err());
        assert!(t.constant(vec![0.0; 5], &[2, 3]).is_err());
        assert!(t.normalize4(a).is_err());
        assert!(t.gather(a, vec![2], 3).is_err());
    }

    #[test]
    fn degenerate_mean_refuses_gradient() {
        let mut t = Tape::new();
        let v = t.param(vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0], &[2, 4]).unwrap();
        let w = t.param(vec![1.0, 1.0], &[2]).unwrap();
        let m = t.quat_mean(v, w, 2).unwrap();
        assert_eq!(t.degenerate_means(), 1);
        let l = project(&mut t, m, 0);
        assert!(matches!(t.backward(l), Err(QecError::DegenerateSpectrum { .. })));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(vec![1.0, 2.0], &[2]).unwrap();
        let b = t.param(vec![3.0, 4.0], &[2]).unwrap();
        let m = t.mul(a, b).unwrap();
        let s = t.sum(m).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap(), &[1.0, 2.0]);
    }
}
