//! Quaternion equivariant dynamic routing.
//!
//! Votes `v_ij = q_i ∘ t_ij` are clustered per output capsule `j` by a few
//! rounds of weighted quaternion averaging, where each vote is weighted by its
//! input activation times `sigmoid(−δ(q̂_j, v_ij))`. Both the mean and the
//! geodesic distance commute with a left rotation of every input pose, so the
//! output poses rotate with the input and the activations stay fixed.

use serde::{Deserialize, Serialize};

use crate::error::{QecError, Result};
use crate::mean::{accumulate, dominant_eigen};
use crate::quat::UnitQuaternion;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Capsule {
    pub pose: UnitQuaternion,
    pub activation: f64,
}

impl Capsule {
    pub fn new(pose: UnitQuaternion, activation: f64) -> Self {
        Self {
            pose: pose.canonicalize(),
            activation,
        }
    }
}

/// Divisor of the summed vote distances in the activation update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationNorm {
    /// Divide by the number of votes `L`.
    #[default]
    PerVote,
    /// Divide by the patch size `K = L / N^c`.
    PerPatchPoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoutingConfig {
    pub iterations: usize,
    #[serde(default)]
    pub activation_norm: ActivationNorm,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            activation_norm: ActivationNorm::PerVote,
        }
    }
}

impl RoutingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(QecError::Config("routing iterations must be at least 1".into()));
        }
        Ok(())
    }

    pub(crate) fn normalizer(&self, votes: usize, channels: usize) -> f64 {
        match self.activation_norm {
            ActivationNorm::PerVote => votes as f64,
            ActivationNorm::PerPatchPoint => (votes / channels.max(1)).max(1) as f64,
        }
    }
}

/// `L × M` votes, row-major: `votes[i * M + j]`.
#[derive(Clone, Debug)]
pub struct VoteTensor {
    inputs: usize,
    outputs: usize,
    channels: usize,
    votes: Vec<UnitQuaternion>,
}

impl VoteTensor {
    pub fn new(inputs: usize, outputs: usize, votes: Vec<UnitQuaternion>) -> Result<Self> {
        if votes.len() != inputs * outputs {
            return Err(QecError::ShapeMismatch(format!(
                "{} votes for {inputs}×{outputs}",
                votes.len()
            )));
        }
        Ok(Self {
            inputs,
            outputs,
            channels: 1,
            votes,
        })
    }

    /// Records `N^c`, the number of input capsules per point.
    pub fn with_channels(mut self, channels: usize) -> Self {
        self.channels = channels.max(1);
        self
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }
    pub fn outputs(&self) -> usize {
        self.outputs
    }
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn get(&self, i: usize, j: usize) -> UnitQuaternion {
        self.votes[i * self.outputs + j]
    }

    /// Votes cast for output `j`.
    pub fn column(&self, j: usize) -> impl Iterator<Item = UnitQuaternion> + '_ {
        (0..self.inputs).map(move |i| self.get(i, j))
    }
}

/// `v_ij = canonicalize(q_i ∘ t_ij)`; `transforms` is `L × M` row-major.
pub fn compute_votes(caps_in: &[Capsule], transforms: &[UnitQuaternion], outputs: usize) -> Result<VoteTensor> {
    if transforms.len() != caps_in.len() * outputs {
        return Err(QecError::ShapeMismatch(format!(
            "{} transforms for {} inputs × {outputs} outputs",
            transforms.len(),
            caps_in.len()
        )));
    }
    let votes = caps_in
        .iter()
        .enumerate()
        .flat_map(|(i, c)| {
            transforms[i * outputs..(i + 1) * outputs]
                .iter()
                .map(move |t| c.pose.hamilton(t).canonicalize())
        })
        .collect();
    VoteTensor::new(caps_in.len(), outputs, votes)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug)]
pub struct RoutingOutput {
    pub capsules: Vec<Capsule>,
    /// Per output: some mean along the way had a repeated top eigenvalue.
    pub degenerate: Vec<bool>,
    /// Per output: the initial pose followed by the pose after each iteration.
    pub pose_trace: Vec<Vec<UnitQuaternion>>,
}

pub fn dynamic_route(votes: &VoteTensor, alpha_in: &[f64], cfg: &RoutingConfig) -> Result<RoutingOutput> {
    route_with(votes, alpha_in, cfg, &|d| sigmoid(-d))
}

/// Routing with the agreement weight `sigmoid(−δ)` replaced by `weight(δ)`.
/// Exists to compare the inner loop against plain IRLS iterations.
#[doc(hidden)]
pub fn dynamic_route_with_weight(
    votes: &VoteTensor,
    alpha_in: &[f64],
    cfg: &RoutingConfig,
    weight: &dyn Fn(f64) -> f64,
) -> Result<RoutingOutput> {
    route_with(votes, alpha_in, cfg, weight)
}

fn route_with(
    votes: &VoteTensor,
    alpha_in: &[f64],
    cfg: &RoutingConfig,
    weight: &dyn Fn(f64) -> f64,
) -> Result<RoutingOutput> {
    cfg.validate()?;
    let l = votes.inputs;
    if alpha_in.len() != l {
        return Err(QecError::ShapeMismatch(format!(
            "{} activations for {l} input capsules",
            alpha_in.len()
        )));
    }
    if let Some(&a) = alpha_in.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(QecError::InvalidActivation(a));
    }
    if alpha_in.iter().all(|&a| a == 0.0) {
        return Err(QecError::AllZeroActivations);
    }
    let z = cfg.normalizer(l, votes.channels);
    let mut capsules = Vec::with_capacity(votes.outputs);
    let mut degenerate = Vec::with_capacity(votes.outputs);
    let mut pose_trace = Vec::with_capacity(votes.outputs);
    let mut w = vec![0.0; l];
    let mut col: Vec<[f64; 4]> = Vec::with_capacity(l);
    for j in 0..votes.outputs {
        col.clear();
        col.extend(votes.column(j).map(|v| v.as_array()));
        let eig = dominant_eigen(&accumulate(col.iter().copied(), alpha_in.iter().copied()));
        let mut pose = eig.vector;
        let mut degen = eig.degenerate;
        let mut trace = Vec::with_capacity(cfg.iterations + 1);
        trace.push(pose);
        for _ in 0..cfg.iterations {
            for ((wi, v), a) in w.iter_mut().zip(votes.column(j)).zip(alpha_in) {
                *wi = a * weight(pose.geodesic_distance(&v));
            }
            let eig = dominant_eigen(&accumulate(col.iter().copied(), w.iter().copied()));
            pose = eig.vector;
            degen |= eig.degenerate;
            trace.push(pose);
        }
        let total: f64 = votes.column(j).map(|v| pose.geodesic_distance(&v)).sum();
        capsules.push(Capsule {
            pose,
            activation: sigmoid(-total / z),
        });
        degenerate.push(degen);
        pose_trace.push(trace);
    }
    Ok(RoutingOutput {
        capsules,
        degenerate,
        pose_trace,
    })
}

/// Closed-form operation count of one routing call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoutingComplexity {
    /// `LM + M(K + 2kL + L)`.
    pub expanded: u64,
    /// `M(K + 2(k+1)L)`.
    pub closed_form: u64,
}

pub fn routing_complexity(l: u64, m: u64, k_patch: u64, iterations: u64) -> RoutingComplexity {
    RoutingComplexity {
        expanded: l * m + m * (k_patch + iterations * 2 * l + l),
        closed_form: m * (k_patch + 2 * (iterations + 1) * l),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mean::{weighted_mean, QuatSet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn caps(poses: &[UnitQuaternion]) -> Vec<Capsule> {
        poses.iter().map(|p| Capsule::new(*p, 1.0)).collect()
    }

    #[test]
    fn identity_transforms_copy_poses() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let poses: Vec<_> = (0..4).map(|_| UnitQuaternion::random(&mut rng).canonicalize()).collect();
        let t = vec![UnitQuaternion::IDENTITY; 4 * 3];
        let v = compute_votes(&caps(&poses), &t, 3).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                assert_eq!(v.get(i, j), poses[i]);
            }
        }
        assert!(compute_votes(&caps(&poses), &t[..5], 3).is_err());
    }

    #[test]
    fn votes_are_left_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let poses: Vec<_> = (0..5).map(|_| UnitQuaternion::random(&mut rng)).collect();
        let t: Vec<_> = (0..10).map(|_| UnitQuaternion::random(&mut rng)).collect();
        let g = UnitQuaternion::random(&mut rng);
        let v = compute_votes(&caps(&poses), &t, 2).unwrap();
        let rotated: Vec<_> = poses.iter().map(|p| g.hamilton(p)).collect();
        let vg = compute_votes(&caps(&rotated), &t, 2).unwrap();
        for i in 0..5 {
            for j in 0..2 {
                assert!(vg.get(i, j).geodesic_distance(&g.hamilton(&v.get(i, j))) < 1e-7);
            }
        }
        let single = compute_votes(&caps(&poses[..1]), &t[..1], 1).unwrap();
        assert!(single.get(0, 0).geodesic_distance(&poses[0].hamilton(&t[0])) < 1e-7);
    }

    #[test]
    fn single_vote() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let q = UnitQuaternion::random(&mut rng);
        let v = compute_votes(&caps(&[q]), &[UnitQuaternion::IDENTITY], 1).unwrap();
        let out = dynamic_route(&v, &[1.0], &RoutingConfig::default()).unwrap();
        assert!(out.capsules[0].pose.geodesic_distance(&q) < 1e-7);
        assert!((out.capsules[0].activation - 0.5).abs() < 1e-7);
    }

    #[test]
    fn identical_votes() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let q = UnitQuaternion::random(&mut rng).canonicalize();
        let v = VoteTensor::new(6, 1, vec![q; 6]).unwrap();
        let out = dynamic_route(&v, &[0.3, 1.0, 0.5, 0.2, 1.0, 0.9], &RoutingConfig::default()).unwrap();
        assert!(out.capsules[0].pose.geodesic_distance(&q) < 1e-7);
        assert!((out.capsules[0].activation - 0.5).abs() < 1e-7);
    }

    /// Replays the three iterations with the plain mean to check the weights.
    #[test]
    fn outliers_are_downweighted() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let mut votes: Vec<_> = (0..8)
            .map(|_| {
                let ang = rng.gen_range(0.0..0.05);
                UnitQuaternion::random_with_angle(&mut rng, ang).canonicalize()
            })
            .collect();
        for _ in 0..2 {
            votes.push(UnitQuaternion::random_with_angle(&mut rng, 150f64.to_radians()).canonicalize());
        }
        let alpha = vec![1.0; 10];
        let vt = VoteTensor::new(10, 1, votes.clone()).unwrap();
        let out = dynamic_route(&vt, &alpha, &RoutingConfig::default()).unwrap();
        let pose = out.capsules[0].pose;
        assert!(pose.geodesic_distance(&UnitQuaternion::IDENTITY) <= 0.05);

        let mut q = weighted_mean(&QuatSet::uniform(votes.clone()).unwrap()).unwrap();
        let mut w = vec![];
        for _ in 0..3 {
            w = votes.iter().map(|v| sigmoid(-q.geodesic_distance(v))).collect::<Vec<_>>();
            q = weighted_mean(&QuatSet::new(votes.clone(), w.clone()).unwrap()).unwrap();
        }
        let diff = q.as_array().iter().zip(pose.as_array()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
        let min_inlier = w[..8].iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(w[8] < min_inlier && w[9] < min_inlier);
    }

    #[test]
    fn activation_normalization_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let votes: Vec<_> = (0..6).map(|_| UnitQuaternion::random(&mut rng).canonicalize()).collect();
        let vt = VoteTensor::new(6, 1, votes).unwrap().with_channels(2);
        let per_vote = dynamic_route(&vt, &[1.0; 6], &RoutingConfig::default()).unwrap();
        let literal = dynamic_route(
            &vt,
            &[1.0; 6],
            &RoutingConfig {
                iterations: 3,
                activation_norm: ActivationNorm::PerPatchPoint,
            },
        )
        .unwrap();
        let s = per_vote.capsules[0].activation;
        let total = -((1.0 / s) - 1.0).ln() * -6.0;
        let expect_literal = sigmoid(-total / 3.0);
        assert!((literal.capsules[0].activation - expect_literal).abs() < 1e-12);
        assert!(literal.capsules[0].activation < s);
    }

    #[test]
    fn input_errors() {
        let vt = VoteTensor::new(2, 1, vec![UnitQuaternion::IDENTITY; 2]).unwrap();
        let cfg = RoutingConfig::default();
        assert!(matches!(dynamic_route(&vt, &[0.0, 0.0], &cfg), Err(QecError::AllZeroActivations)));
        assert!(matches!(dynamic_route(&vt, &[1.0], &cfg), Err(QecError::ShapeMismatch(_))));
        assert!(matches!(dynamic_route(&vt, &[1.5, 0.0], &cfg), Err(QecError::InvalidActivation(_))));
        let bad = RoutingConfig {
            iterations: 0,
            ..cfg
        };
        assert!(dynamic_route(&vt, &[1.0, 1.0], &bad).is_err());
    }

    #[test]
    fn activation_in_half_open_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..20 {
            let l = rng.gen_range(1..12);
            let votes: Vec<_> = (0..l * 2).map(|_| UnitQuaternion::random(&mut rng).canonicalize()).collect();
            let alpha: Vec<f64> = (0..l).map(|_| rng.gen_range(0.01..1.0)).collect();
            let out = dynamic_route(&VoteTensor::new(l, 2, votes).unwrap(), &alpha, &RoutingConfig::default()).unwrap();
            for c in &out.capsules {
                assert!(c.activation > 0.0 && c.activation <= 0.5);
                assert!(c.activation >= sigmoid(-PI));
            }
        }
    }

    #[test]
    fn complexity_formula() {
        assert_eq!(routing_complexity(1, 1, 1, 1).closed_form, 5);
        assert_eq!(routing_complexity(1, 1, 1, 1).expanded, 5);
        assert_eq!(routing_complexity(64, 0, 9, 3).closed_form, 0);
        for (l, m, k, it) in [(9, 64, 9, 3), (4096, 10, 64, 3), (7, 3, 2, 5)] {
            let c = routing_complexity(l, m, k, it);
            assert_eq!(c.expanded, c.closed_form);
        }
    }
}
