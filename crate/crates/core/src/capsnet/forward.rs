use crate::autodiff::{rotate_inv_raw, MlpParams, ZERO_NORM};
use crate::error::{QecError, Result};
use crate::mean::{weighted_mean_outcome, QuatSet};
use crate::pointcloud::{centroid, fps_from, group_knn, PointCloud};
use crate::quat::{canonical_raw, dot3, hamilton_raw, sub3, UnitQuaternion, Vec3};
use crate::routing::{dynamic_route, Capsule, VoteTensor};

use super::{ForwardOptions, LatentCapsules, NetworkConfig, NetworkParams, QecLayerConfig};

#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub capsules: Vec<Capsule>,
    /// Some mean in the layer had a repeated top eigenvalue.
    pub degenerate: bool,
}

/// One QEC module on a patch of `K` center-relative points with `N^c`
/// input capsules each (`caps_in[i * N^c + n]`).
pub fn qec_forward(
    points: &[Vec3],
    caps_in: &[Capsule],
    params: &MlpParams,
    cfg: &QecLayerConfig,
    opts: &ForwardOptions,
) -> Result<LayerOutput> {
    let (k, nc, m) = (cfg.k, cfg.channels, cfg.outputs);
    if points.len() != k || caps_in.len() != k * nc {
        return Err(QecError::ShapeMismatch(format!(
            "{} points and {} capsules for K={k}, N^c={nc}",
            points.len(),
            caps_in.len()
        )));
    }
    if params.n_in != cfg.mlp_in() || params.n_out != cfg.mlp_out() {
        return Err(QecError::ShapeMismatch(format!("kernel {}→{} for layer {cfg:?}", params.n_in, params.n_out)));
    }
    let mut degenerate = false;
    let mut x = vec![0.0; k * 3 * nc];
    for n in 0..nc {
        let quats: Vec<UnitQuaternion> = (0..k).map(|i| caps_in[i * nc + n].pose).collect();
        let weights: Vec<f64> = if opts.weighted_channel_mean {
            (0..k).map(|i| caps_in[i * nc + n].activation).collect()
        } else {
            vec![1.0; k]
        };
        let mu = weighted_mean_outcome(&QuatSet::new(quats, weights)?)?;
        degenerate |= mu.degenerate();
        let mu = mu.mean.as_array();
        for (i, p) in points.iter().enumerate() {
            let xr = if opts.skip_canonicalization { *p } else { rotate_inv_raw(&mu, p) };
            x[i * 3 * nc + 3 * n..i * 3 * nc + 3 * n + 3].copy_from_slice(&xr);
        }
    }
    let t = params.forward(&x);
    let l = k * nc;
    let mut votes = Vec::with_capacity(l * m);
    for (idx, cap) in caps_in.iter().enumerate() {
        let q = cap.pose.as_array();
        for j in 0..m {
            let o = 4 * (idx * m + j);
            let raw = [t[o], t[o + 1], t[o + 2], t[o + 3]];
            let len = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            let tq = if len < ZERO_NORM {
                [1.0, 0.0, 0.0, 0.0]
            } else {
                raw.map(|v| v / len)
            };
            votes.push(UnitQuaternion::from_unit_unchecked(canonical_raw(&hamilton_raw(&q, &tq))));
        }
    }
    let votes = VoteTensor::new(l, m, votes)?.with_channels(nc);
    let alpha: Vec<f64> = caps_in.iter().map(|c| c.activation).collect();
    let out = dynamic_route(&votes, &alpha, &cfg.routing)?;
    Ok(LayerOutput {
        capsules: out.capsules,
        degenerate: degenerate || out.degenerate.iter().any(|&d| d),
    })
}

#[derive(Clone, Debug)]
pub struct NetworkOutput {
    pub latent: LatentCapsules,
    /// Indices of the pooling centers in the input cloud.
    pub centers: Vec<usize>,
    /// Layer-1 capsules per pooling center.
    pub layer1: Vec<Vec<Capsule>>,
    pub degenerate: bool,
}

pub(crate) fn require_frames(cloud: &PointCloud, cfg: &NetworkConfig) -> Result<()> {
    let have = cloud.frames.as_ref().map_or(0, |f| f.len().min(cloud.len()));
    if have < cfg.min_points() {
        return Err(QecError::InsufficientPoints {
            available: have,
            required: cfg.min_points(),
        });
    }
    Ok(())
}

/// Pooling centers and their patches. FPS starts at the point farthest from
/// the centroid, so the choice is independent of point order and pose.
pub(crate) fn pooling(cloud: &PointCloud, cfg: &NetworkConfig) -> Result<(Vec<usize>, Vec<Vec<usize>>)> {
    let mid = centroid(&cloud.points);
    let mut start = 0;
    let mut best = -1.0;
    for (i, p) in cloud.points.iter().enumerate() {
        let d = dot3(&sub3(p, &mid), &sub3(p, &mid));
        if d > best {
            best = d;
            start = i;
        }
    }
    let centers = fps_from(&cloud.points, cfg.centers, start)?;
    let g = group_knn(cloud, &centers, cfg.layers[0].k)?;
    Ok((centers, g.patches))
}

/// Both layers on a cloud carrying one LRF per point.
pub fn network_forward(
    cloud: &PointCloud,
    params: &NetworkParams,
    cfg: &NetworkConfig,
    opts: &ForwardOptions,
) -> Result<NetworkOutput> {
    cfg.validate()?;
    params.check(cfg)?;
    require_frames(cloud, cfg)?;
    let frames = cloud.frames.as_ref().expect("checked above");
    let (centers, patches) = pooling(cloud, cfg)?;
    let (l1, l2) = (&cfg.layers[0], &cfg.layers[1]);
    let mut degenerate = false;
    let mut layer1 = Vec::with_capacity(centers.len());
    for (&c, patch) in centers.iter().zip(&patches) {
        let pts: Vec<Vec3> = patch.iter().map(|&i| sub3(&cloud.points[i], &cloud.points[c])).collect();
        let caps: Vec<Capsule> = patch
            .iter()
            .map(|&i| Capsule {
                pose: frames[i].q,
                activation: 1.0,
            })
            .collect();
        let out = qec_forward(&pts, &caps, &params.layers[0], l1, opts)?;
        degenerate |= out.degenerate;
        layer1.push(out.capsules);
    }
    let cpos: Vec<Vec3> = centers.iter().map(|&c| cloud.points[c]).collect();
    let mid = centroid(&cpos);
    let pts: Vec<Vec3> = cpos.iter().map(|p| sub3(p, &mid)).collect();
    let caps: Vec<Capsule> = layer1.iter().flatten().copied().collect();
    let out = qec_forward(&pts, &caps, &params.layers[1], l2, opts)?;
    Ok(NetworkOutput {
        latent: LatentCapsules { capsules: out.capsules },
        centers,
        layer1,
        degenerate: degenerate || out.degenerate,
    })
}
