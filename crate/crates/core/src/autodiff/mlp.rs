use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Tape, Var};
use crate::error::{QecError, Result};
use crate::routing::sigmoid;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hidden {
    #[default]
    Relu,
    Sigmoid,
}

/// Two fully connected layers: `n_in → hidden → n_out`, row-major weights.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub n_in: usize,
    pub hidden: usize,
    pub n_out: usize,
    pub activation: Hidden,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// The four parameter arrays once placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl MlpParams {
    /// He-scaled first layer; the output layer starts at `out_scale` times
    /// a 1/√hidden normal, with every 4-vector of the bias set to the
    /// identity quaternion so initial outputs are near identity.
    pub fn init<R: Rng + ?Sized>(
        n_in: usize,
        hidden: usize,
        n_out: usize,
        out_scale: f64,
        activation: Hidden,
        rng: &mut R,
    ) -> Self {
        let s1 = (2.0 / n_in as f64).sqrt();
        let s2 = out_scale / (hidden as f64).sqrt();
        let w1 = (0..n_in * hidden).map(|_| s1 * normal(rng)).collect();
        let w2 = (0..hidden * n_out).map(|_| s2 * normal(rng)).collect();
        let b2 = (0..n_out).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        Self {
            n_in,
            hidden,
            n_out,
            activation,
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2,
        }
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.w1.len() == self.n_in * self.hidden
            && self.b1.len() == self.hidden
            && self.w2.len() == self.hidden * self.n_out
            && self.b2.len() == self.n_out;
        if !ok {
            return Err(QecError::ShapeMismatch(format!(
                "MLP {}→{}→{} with arrays of {}, {}, {}, {}",
                self.n_in,
                self.hidden,
                self.n_out,
                self.w1.len(),
                self.b1.len(),
                self.w2.len(),
                self.b2.len()
            )));
        }
        if self.arrays().iter().any(|a| a.iter().any(|x| !x.is_finite())) {
            return Err(QecError::InvalidProblem("non-finite MLP parameter".into()));
        }
        Ok(())
    }

    pub fn arrays(&self) -> [&Vec<f64>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn arrays_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn shapes(&self) -> [Vec<usize>; 4] {
        [
            vec![self.n_in, self.hidden],
            vec![self.hidden],
            vec![self.hidden, self.n_out],
            vec![self.n_out],
        ]
    }

    /// Evaluates `rows` inputs laid out row-major.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let rows = x.len() / self.n_in;
        let mut out = Vec::with_capacity(rows * self.n_out);
        let mut h = vec![0.0; self.hidden];
        for r in 0..rows {
            h.iter_mut().for_each(|v| *v = 0.0);
            for (p, xv) in x[r * self.n_in..(r + 1) * self.n_in].iter().enumerate() {
                for (hj, w) in h.iter_mut().zip(&self.w1[p * self.hidden..(p + 1) * self.hidden]) {
                    *hj += xv * w;
                }
            }
            for (hj, b) in h.iter_mut().zip(&self.b1) {
                *hj += b;
                *hj = match self.activation {
                    Hidden::Relu => hj.max(0.0),
                    Hidden::Sigmoid => sigmoid(*hj),
                };
            }
            let start = out.len();
            out.resize(start + self.n_out, 0.0);
            let o = &mut out[start..];
            for (p, hv) in h.iter().enumerate() {
                if *hv == 0.0 {
                    continue;
                }
                for (oj, w) in o.iter_mut().zip(&self.w2[p * self.n_out..(p + 1) * self.n_out]) {
                    *oj += hv * w;
                }
            }
            o.iter_mut().zip(&self.b2).for_each(|(oj, b)| *oj += b);
        }
        out
    }

    pub fn to_tape(&self, tape: &mut Tape, trainable: bool) -> Result<MlpVars> {
        let [s1, s2, s3, s4] = self.shapes();
        let mk = |t: &mut Tape, v: &Vec<f64>, s: &[usize]| {
            if trainable {
                t.param(v.clone(), s)
            } else {
                t.constant(v.clone(), s)
            }
        };
        Ok(MlpVars {
            w1: mk(tape, &self.w1, &s1)?,
            b1: mk(tape, &self.b1, &s2)?,
            w2: mk(tape, &self.w2, &s3)?,
            b2: mk(tape, &self.b2, &s4)?,
        })
    }
}

impl MlpVars {
    pub fn apply(&self, tape: &mut Tape, x: Var, activation: Hidden) -> Result<Var> {
        let h = tape.matmul(x, self.w1)?;
        let h = tape.add_bias(h, self.b1)?;
        let h = match activation {
            Hidden::Relu => tape.relu(h),
            Hidden::Sigmoid => tape.sigmoid(h),
        };
        let o = tape.matmul(h, self.w2)?;
        tape.add_bias(o, self.b2)
    }

    pub fn vars(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}
