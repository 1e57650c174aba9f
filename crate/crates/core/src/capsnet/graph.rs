//! The network recorded on a tape, batched over patches, for training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{fd_check, project};
use crate::autodiff::{Hidden, MlpParams, MlpVars, Tape, Var};
use crate::error::Result;
use crate::pointcloud::{centroid, PointCloud};
use crate::quat::{sub3, UnitQuaternion, Vec3};
use crate::routing::RoutingConfig;

use super::forward::{pooling, require_frames};
use super::{ForwardOptions, NetworkConfig, QecLayerConfig};

/// Output capsules of a recorded layer: `count` poses (`count × 4`) and
/// activations, ordered patch-major.
#[derive(Clone, Copy, Debug)]
pub struct TapeCapsules {
    pub poses: Var,
    pub activations: Var,
    pub count: usize,
}

/// Records one QEC module for each of `patches` patches.
///
/// `points` holds `patches × K × 3` center-relative coordinates; `poses`
/// and `acts` hold the `patches × K × N^c` input capsules.
#[allow(clippy::too_many_arguments)]
pub fn qec_on_tape(
    tape: &mut Tape,
    points: &[f64],
    patches: usize,
    poses: Var,
    acts: Var,
    kernel: &MlpVars,
    hidden: Hidden,
    cfg: &QecLayerConfig,
    opts: &ForwardOptions,
) -> Result<TapeCapsules> {
    let (k, nc, m) = (cfg.k, cfg.channels, cfg.outputs);
    let l = k * nc;
    let cap = |p: usize, i: usize, n: usize| (p * k + i) * nc + n;

    let mut by_channel = Vec::with_capacity(patches * l);
    for p in 0..patches {
        for n in 0..nc {
            by_channel.extend((0..k).map(|i| cap(p, i, n)));
        }
    }
    let pts = tape.constant(points.to_vec(), &[patches * k, 3])?;
    let rows: Vec<usize> = (0..patches * l).map(|c| c / nc).collect();
    let xg = tape.gather(pts, rows, 3)?;
    let x = if opts.skip_canonicalization {
        xg
    } else {
        let cq = tape.gather(poses, by_channel.clone(), 4)?;
        let cw = if opts.weighted_channel_mean {
            tape.gather(acts, by_channel, 1)?
        } else {
            tape.constant(vec![1.0; patches * l], &[patches * l])?
        };
        let mu = tape.quat_mean(cq, cw, k)?;
        let mu_idx: Vec<usize> = (0..patches * l).map(|c| (c / l) * nc + c % nc).collect();
        let mg = tape.gather(mu, mu_idx, 4)?;
        tape.rotate_inv(mg, xg)?
    };
    let x = tape.reshape(x, &[patches * k, 3 * nc])?;
    let t = kernel.apply(tape, x, hidden)?;
    let t = tape.reshape(t, &[patches * l * m, 4])?;
    let t = tape.normalize4(t)?;

    let mut t_idx = Vec::with_capacity(patches * m * l);
    let mut q_idx = Vec::with_capacity(patches * m * l);
    for p in 0..patches {
        for j in 0..m {
            for i in 0..k {
                for n in 0..nc {
                    t_idx.push(cap(p, i, n) * m + j);
                    q_idx.push(cap(p, i, n));
                }
            }
        }
    }
    let tg = tape.gather(t, t_idx, 4)?;
    let qg = tape.gather(poses, q_idx.clone(), 4)?;
    let v = tape.hamilton(qg, tg)?;
    let v = tape.canon4(v)?;
    let alpha = tape.gather(acts, q_idx, 1)?;

    let groups = patches * m;
    let bcast: Vec<usize> = (0..groups * l).map(|r| r / l).collect();
    let mut mean = tape.quat_mean(v, alpha, l)?;
    for _ in 0..cfg.routing.iterations {
        let mb = tape.gather(mean, bcast.clone(), 4)?;
        let d = tape.geodesic(mb, v)?;
        let nd = tape.scale(d, -1.0);
        let s = tape.sigmoid(nd);
        let w = tape.mul(alpha, s)?;
        mean = tape.quat_mean(v, w, l)?;
    }
    let mb = tape.gather(mean, bcast, 4)?;
    let d = tape.geodesic(mb, v)?;
    let total = tape.sum_groups(d, l)?;
    let z = cfg.routing.normalizer(l, nc);
    let e = tape.scale(total, -1.0 / z);
    let activations = tape.sigmoid(e);
    Ok(TapeCapsules {
        poses: mean,
        activations,
        count: groups,
    })
}

/// Both layers on a tape. `kernels` are the per-layer MLP variables.
pub fn network_on_tape(
    tape: &mut Tape,
    cloud: &PointCloud,
    kernels: &[MlpVars],
    cfg: &NetworkConfig,
    opts: &ForwardOptions,
) -> Result<TapeCapsules> {
    require_frames(cloud, cfg)?;
    let frames = cloud.frames.as_ref().expect("checked above");
    let (centers, patches) = pooling(cloud, cfg)?;
    let (l1, l2) = (&cfg.layers[0], &cfg.layers[1]);

    let mut pts = Vec::with_capacity(centers.len() * l1.k * 3);
    let mut q = Vec::with_capacity(centers.len() * l1.k * 4);
    for (&c, patch) in centers.iter().zip(&patches) {
        for &i in patch {
            pts.extend_from_slice(&sub3(&cloud.points[i], &cloud.points[c]));
            q.extend_from_slice(&frames[i].q.as_array());
        }
    }
    let n1 = centers.len() * l1.k;
    let poses = tape.constant(q, &[n1, 4])?;
    let acts = tape.constant(vec![1.0; n1], &[n1])?;
    let c1 = qec_on_tape(tape, &pts, centers.len(), poses, acts, &kernels[0], cfg.activation, l1, opts)?;

    let cpos: Vec<Vec3> = centers.iter().map(|&c| cloud.points[c]).collect();
    let mid = centroid(&cpos);
    let pts2: Vec<f64> = cpos.iter().flat_map(|p| sub3(p, &mid)).collect();
    qec_on_tape(tape, &pts2, 1, c1.poses, c1.activations, &kernels[1], cfg.activation, l2, opts)
}

/// Central-difference check of a tiny QEC layer (K=4, two patches, two
/// outputs) with respect to its kernel, input poses and activations.
/// `channels == 1` uses a sigmoid kernel, otherwise ReLU.
pub fn qec_gradient_check(seed: u64, channels: usize) -> f64 {
    let cfg = QecLayerConfig {
        k: 4,
        channels,
        outputs: 2,
        routing: RoutingConfig::default(),
    };
    let hidden = if channels == 1 { Hidden::Sigmoid } else { Hidden::Relu };
    let patches = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mlp = MlpParams::init(cfg.mlp_in(), 5, cfg.mlp_out(), 1.0, hidden, &mut rng);
    let n = patches * cfg.votes();
    let pts: Vec<f64> = (0..patches * 4 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let poses: Vec<f64> = (0..n).flat_map(|_| UnitQuaternion::random(&mut rng).as_array()).collect();
    let acts: Vec<f64> = (0..n).map(|_| rng.gen_range(0.3..1.0)).collect();
    let [s1, s2, s3, s4] = mlp.shapes();
    let inputs = vec![
        (mlp.w1.clone(), s1),
        (mlp.b1.clone(), s2),
        (mlp.w2.clone(), s3),
        (mlp.b2.clone(), s4),
        (poses, vec![n, 4]),
        (acts, vec![n]),
    ];
    let opts = ForwardOptions {
        weighted_channel_mean: true,
        skip_canonicalization: false,
    };
    let f = |t: &mut Tape, v: &[Var]| {
        let kernel = MlpVars {
            w1: v[0],
            b1: v[1],
            w2: v[2],
            b2: v[3],
        };
        let q = t.normalize4(v[4]).unwrap();
        let out = qec_on_tape(t, &pts, patches, q, v[5], &kernel, hidden, &cfg, &opts).unwrap();
        let a = project(t, out.poses, 1);
        let b = project(t, out.activations, 2);
        t.add(a, b).unwrap()
    };
    fd_check(&inputs, &f, 1e-6)
}
