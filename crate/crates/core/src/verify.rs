//! Randomized invariant checks: equivariance of the mean, routing, one QEC
//! module, the full network and LRFs, Weiszfeld monotonicity and the
//! quaternion homomorphism.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Hidden, MlpParams};
use crate::capsnet::train::prepare_cloud;
use crate::capsnet::{network_forward, qec_forward, ForwardOptions, NetworkConfig, NetworkParams, QecLayerConfig};
use crate::error::Result;
use crate::lrf::{build_lrf, build_lrf_detailed, rotate_frame, Patch};
use crate::mean::{weighted_mean, QuatSet};
use crate::pointcloud::sample_surface;
use crate::pointcloud::toy::ToyClass;
use crate::quat::{add3, UnitQuaternion, Vec3};
use crate::weiszfeld::{weiszfeld_solve, WeiszfeldProblem};
use crate::routing::{dynamic_route, Capsule, RoutingConfig, VoteTensor};

pub const POSE_TOL: f64 = 1e-4;
pub const ACTIVATION_TOL: f64 = 1e-6;
pub const PERMUTATION_TOL: f64 = 1e-9;

pub const ALGEBRA_TOL: f64 = 1e-9;
pub const MONOTONE_TOL: f64 = 1e-12;

#[derive(Clone, Debug, Serialize)]
pub struct Metric {
    pub name: &'static str,
    /// Worst value over all trials.
    pub value: f64,
    pub tolerance: f64,
    /// Trial that produced the worst value.
    pub worst_trial: usize,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub trials: usize,
    pub metrics: Vec<Metric>,
}

impl CheckResult {
    fn new(name: &'static str, trials: usize, metrics: &[(&'static str, f64)]) -> Self {
        Self {
            name,
            trials,
            metrics: metrics
                .iter()
                .map(|&(name, tolerance)| Metric {
                    name,
                    value: 0.0,
                    tolerance,
                    worst_trial: 0,
                })
                .collect(),
        }
    }

    fn record(&mut self, metric: usize, trial: usize, value: f64) {
        let m = &mut self.metrics[metric];
        // NaN counts as a failure.
        if value > m.value || value.is_nan() {
            m.value = value;
            m.worst_trial = trial;
        }
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == name).map(|m| m.value)
    }

    pub fn passed(&self) -> bool {
        self.metrics.iter().all(|m| m.value <= m.tolerance)
    }
}

/// Pose, activation and permutation metrics of an equivariance check.
const EQUIVARIANCE: [(&str, f64); 3] = [
    ("pose", POSE_TOL),
    ("activation", ACTIVATION_TOL),
    ("permutation", PERMUTATION_TOL),
];

#[derive(Clone, Debug, Default, Serialize)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SuiteOptions {
    pub trials: usize,
    pub seed: u64,
    /// Skips the canonicalizing rotation inside the QEC module, which must
    /// make the module and network checks fail.
    pub inject_bug: bool,
}

fn pose_err(a: &UnitQuaternion, b: &UnitQuaternion) -> f64 {
    a.geodesic_distance(b)
}

/// Largest componentwise difference up to a global sign per quaternion.
fn quat_diff(a: &UnitQuaternion, b: &UnitQuaternion) -> f64 {
    let (a, b) = (a.canonicalize().as_array(), b.canonicalize().as_array());
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn compare(base: &[Capsule], other: &[Capsule], g: Option<&UnitQuaternion>) -> (f64, f64) {
    let mut pose = 0.0f64;
    let mut act = 0.0f64;
    for (a, b) in base.iter().zip(other) {
        let expect = g.map_or(a.pose, |g| g.hamilton(&a.pose));
        pose = pose.max(if g.is_some() { pose_err(&expect, &b.pose) } else { quat_diff(&expect, &b.pose) });
        act = act.max((a.activation - b.activation).abs());
    }
    (pose, act)
}

fn check_mean(rng: &mut ChaCha8Rng, trials: usize) -> Result<CheckResult> {
    let mut r = CheckResult::new("weighted_mean", trials, &EQUIVARIANCE);
    for t in 0..trials {
        let n = rng.gen_range(2..20);
        let center = UnitQuaternion::random(rng);
        let quats: Vec<UnitQuaternion> = (0..n)
            .map(|_| {
                let ang = rng.gen_range(0.0..1.0);
                let q = center.hamilton(&UnitQuaternion::random_with_angle(rng, ang));
                if rng.gen_bool(0.5) {
                    q.neg()
                } else {
                    q
                }
            })
            .collect();
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
        let g = UnitQuaternion::random(rng);
        let m = weighted_mean(&QuatSet::new(quats.clone(), w.clone())?)?;
        let rotated: Vec<_> = quats.iter().map(|q| g.hamilton(q)).collect();
        let mg = weighted_mean(&QuatSet::new(rotated, w.clone())?)?;
        r.record(0, t, pose_err(&g.hamilton(&m), &mg));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        let mp = weighted_mean(&QuatSet::new(perm.iter().map(|&i| quats[i]).collect(), perm.iter().map(|&i| w[i]).collect())?)?;
        r.record(2, t, quat_diff(&m, &mp));
    }
    Ok(r)
}

fn check_routing(rng: &mut ChaCha8Rng, trials: usize) -> Result<CheckResult> {
    let mut r = CheckResult::new("dynamic_route", trials, &EQUIVARIANCE);
    let cfg = RoutingConfig::default();
    for t in 0..trials {
        let (l, m) = (rng.gen_range(2..12), rng.gen_range(1..5));
        let centers: Vec<UnitQuaternion> = (0..m).map(|_| UnitQuaternion::random(rng)).collect();
        let mut votes = Vec::with_capacity(l * m);
        for _ in 0..l {
            for c in &centers {
                let ang = rng.gen_range(0.0..1.2);
                votes.push(c.hamilton(&UnitQuaternion::random_with_angle(rng, ang)).canonicalize());
            }
        }
        let alpha: Vec<f64> = (0..l).map(|_| rng.gen_range(0.1..1.0)).collect();
        let g = UnitQuaternion::random(rng);
        let base = dynamic_route(&VoteTensor::new(l, m, votes.clone())?, &alpha, &cfg)?;
        let rotated: Vec<_> = votes.iter().map(|v| g.hamilton(v).canonicalize()).collect();
        let rot = dynamic_route(&VoteTensor::new(l, m, rotated)?, &alpha, &cfg)?;
        let (p, a) = compare(&base.capsules, &rot.capsules, Some(&g));
        r.record(0, t, p);
        r.record(1, t, a);
        let mut perm: Vec<usize> = (0..l).collect();
        perm.shuffle(rng);
        let pv: Vec<_> = perm.iter().flat_map(|&i| votes[i * m..(i + 1) * m].iter().copied()).collect();
        let pa: Vec<f64> = perm.iter().map(|&i| alpha[i]).collect();
        let per = dynamic_route(&VoteTensor::new(l, m, pv)?, &pa, &cfg)?;
        let (p, a) = compare(&base.capsules, &per.capsules, None);
        r.record(2, t, p.max(a));
    }
    Ok(r)
}

fn check_module(rng: &mut ChaCha8Rng, trials: usize, opts: &ForwardOptions) -> Result<CheckResult> {
    let mut r = CheckResult::new("qec_forward", trials, &EQUIVARIANCE);
    for t in 0..trials {
        let cfg = QecLayerConfig {
            k: rng.gen_range(2..10),
            channels: rng.gen_range(1..4),
            outputs: rng.gen_range(1..5),
            routing: RoutingConfig::default(),
        };
        let mlp = MlpParams::init(cfg.mlp_in(), 16, cfg.mlp_out(), 1.0, Hidden::Relu, rng);
        let pts: Vec<Vec3> = (0..cfg.k).map(|_| [0; 3].map(|_: i32| rng.gen_range(-1.0..1.0))).collect();
        let base_q = UnitQuaternion::random(rng);
        let caps: Vec<Capsule> = (0..cfg.votes())
            .map(|_| {
                let ang = rng.gen_range(0.0..1.0);
                Capsule::new(base_q.hamilton(&UnitQuaternion::random_with_angle(rng, ang)), rng.gen_range(0.2..1.0))
            })
            .collect();
        let g = UnitQuaternion::random(rng);
        let base = qec_forward(&pts, &caps, &mlp, &cfg, opts)?;
        let rp: Vec<Vec3> = pts.iter().map(|p| g.rotate_point(*p)).collect();
        let rc: Vec<Capsule> = caps.iter().map(|c| Capsule::new(g.hamilton(&c.pose), c.activation)).collect();
        let rot = qec_forward(&rp, &rc, &mlp, &cfg, opts)?;
        let (p, a) = compare(&base.capsules, &rot.capsules, Some(&g));
        r.record(0, t, p);
        r.record(1, t, a);
        let mut perm: Vec<usize> = (0..cfg.k).collect();
        perm.shuffle(rng);
        let pp: Vec<Vec3> = perm.iter().map(|&i| pts[i]).collect();
        let pc: Vec<Capsule> = perm
            .iter()
            .flat_map(|&i| caps[i * cfg.channels..(i + 1) * cfg.channels].iter().copied())
            .collect();
        let per = qec_forward(&pp, &pc, &mlp, &cfg, opts)?;
        let (p, a) = compare(&base.capsules, &per.capsules, None);
        r.record(2, t, p.max(a));
    }
    Ok(r)
}

/// Small network used by the suite; the architecture matches the default
/// one apart from its sizes.
pub fn suite_network(seed: u64) -> NetworkConfig {
    let mut cfg = NetworkConfig::with_sizes(3, 12, 6);
    cfg.dense_points = 500;
    cfg.lrf_points = 100;
    cfg.hidden = 16;
    cfg.init_scale = 1.0;
    cfg.seed = seed;
    cfg
}

fn check_network(rng: &mut ChaCha8Rng, trials: usize, opts: &ForwardOptions) -> Result<CheckResult> {
    let mut r = CheckResult::new("network_forward", trials, &EQUIVARIANCE);
    for t in 0..trials {
        let cfg = suite_network(rng.gen());
        let params = NetworkParams::init(&cfg)?;
        let class = ToyClass::ALL[t % ToyClass::ALL.len()];
        let dense = sample_surface(&class.template(), cfg.dense_points, rng.gen())?;
        let (cloud, _) = prepare_cloud(&dense, &cfg)?;
        let g = UnitQuaternion::random(rng);
        let base = network_forward(&cloud, &params, &cfg, opts)?;
        let rot = network_forward(&cloud.rotated(&g), &params, &cfg, opts)?;
        let (p, a) = compare(&base.latent.capsules, &rot.latent.capsules, Some(&g));
        r.record(0, t, p);
        r.record(1, t, a);
        let mut perm: Vec<usize> = (0..cloud.len()).collect();
        perm.shuffle(rng);
        let per = network_forward(&cloud.select(&perm), &params, &cfg, opts)?;
        let (p, a) = compare(&base.latent.capsules, &per.latent.capsules, None);
        r.record(2, t, p.max(a));
    }
    Ok(r)
}

fn check_lrf(rng: &mut ChaCha8Rng, trials: usize) -> Result<CheckResult> {
    let mut r = CheckResult::new("lrf", trials, &[("pose", POSE_TOL), ("translation", ALGEBRA_TOL)]);
    for t in 0..trials {
        let center: Vec3 = [0; 3].map(|_: i32| rng.gen_range(-1.0..1.0));
        let pts: Vec<Vec3> = (0..12)
            .map(|_| {
                let (u, v): (f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                let h = 0.3 * u * u - 0.2 * v + 0.1 * u * v + rng.gen_range(-0.05..0.05);
                [center[0] + u, center[1] + v, center[2] + h]
            })
            .collect();
        let patch = Patch::new(center, pts).with_viewpoint([0.0, 0.0, -3.0]);
        let g = UnitQuaternion::random(rng);
        let (f, choice) = build_lrf_detailed(&patch)?;
        if choice.ambiguous {
            continue;
        }
        let rp = Patch::new(g.rotate_point(patch.center), patch.points.iter().map(|x| g.rotate_point(*x)).collect())
            .with_viewpoint(g.rotate_point(patch.viewpoint));
        r.record(0, t, build_lrf(&rp)?.q.geodesic_distance(&rotate_frame(&f, &g).q));
        let shift: Vec3 = [0; 3].map(|_: i32| rng.gen_range(-5.0..5.0));
        let moved = |x: &Vec3| add3(x, &shift);
        let tp = Patch::new(moved(&patch.center), patch.points.iter().map(moved).collect()).with_viewpoint(moved(&patch.viewpoint));
        r.record(1, t, quat_diff(&build_lrf(&tp)?.q, &f.q));
    }
    Ok(r)
}

fn check_weiszfeld(rng: &mut ChaCha8Rng, trials: usize) -> Result<CheckResult> {
    let mut r = CheckResult::new("weiszfeld", trials, &[("cost_increase", MONOTONE_TOL)]);
    for t in 0..trials {
        let center = UnitQuaternion::random(rng);
        let n = rng.gen_range(3..15);
        let quats: Vec<UnitQuaternion> = (0..n)
            .map(|_| {
                let ang = rng.gen_range(0.05..1.5);
                center.hamilton(&UnitQuaternion::random_with_angle(rng, ang))
            })
            .collect();
        let start = center.hamilton(&UnitQuaternion::random_with_angle(rng, 0.3));
        for q in [1.0, 1.5, 2.0] {
            let sol = weiszfeld_solve(&WeiszfeldProblem::new(&quats, q)?, &start)?;
            let rise = sol.trace.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
            r.record(0, t, rise);
        }
    }
    Ok(r)
}

fn check_homomorphism(rng: &mut ChaCha8Rng, trials: usize) -> Result<CheckResult> {
    let mut r = CheckResult::new("homomorphism", trials, &[("matrix", ALGEBRA_TOL), ("metric", ALGEBRA_TOL)]);
    for t in 0..trials {
        let (p, q, g) = (UnitQuaternion::random(rng), UnitQuaternion::random(rng), UnitQuaternion::random(rng));
        r.record(0, t, p.hamilton(&q).to_matrix().max_abs_diff(&p.to_matrix().mul_mat(&q.to_matrix())));
        let d = p.geodesic_distance(&q);
        r.record(1, t, (g.hamilton(&p).geodesic_distance(&g.hamilton(&q)) - d).abs());
    }
    Ok(r)
}

/// Runs every check with `opts.trials` random trials each.
pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let fwd = ForwardOptions {
        weighted_channel_mean: true,
        skip_canonicalization: opts.inject_bug,
    };
    let checks = vec![
        check_mean(&mut rng, opts.trials)?,
        check_routing(&mut rng, opts.trials)?,
        check_module(&mut rng, opts.trials, &fwd)?,
        check_network(&mut rng, opts.trials, &fwd)?,
        check_lrf(&mut rng, opts.trials)?,
        check_weiszfeld(&mut rng, opts.trials)?,
        check_homomorphism(&mut rng, 10 * opts.trials)?,
    ];
    Ok(SuiteReport {
        checks,
        seconds: start.elapsed().as_secs_f64(),
    })
}
