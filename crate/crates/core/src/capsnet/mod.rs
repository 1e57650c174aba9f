//! Quaternion equivariant capsule layers and the two-level network.
//!
//! Layer 1 runs one QEC module per pooling center on its `K` nearest LRF
//! points. Layer 2 treats all pooling centers as a single patch whose
//! channels are the layer-1 capsules and emits one capsule per class.

mod forward;
pub mod graph;
pub mod train;

pub use forward::{network_forward, qec_forward, LayerOutput, NetworkOutput};
pub use graph::{network_on_tape, qec_on_tape, TapeCapsules};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Hidden, MlpParams};
use crate::error::{QecError, Result};
use crate::quat::{relative_rotation, UnitQuaternion};
use crate::routing::{Capsule, RoutingConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QecLayerConfig {
    /// Points per patch.
    pub k: usize,
    /// Input capsules per point.
    pub channels: usize,
    /// Output capsules.
    pub outputs: usize,
    #[serde(default)]
    pub routing: RoutingConfig,
}

impl QecLayerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.channels == 0 || self.outputs == 0 {
            return Err(QecError::Config(format!("layer sizes must be positive: {self:?}")));
        }
        self.routing.validate()
    }

    /// Votes per output capsule.
    pub fn votes(&self) -> usize {
        self.k * self.channels
    }

    pub fn mlp_in(&self) -> usize {
        3 * self.channels
    }

    pub fn mlp_out(&self) -> usize {
        4 * self.channels * self.outputs
    }
}

/// When `layers` is omitted from a config file it is derived from
/// `classes`, `centers`, `capsules` and `routing`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "NetworkConfigFile")]
pub struct NetworkConfig {
    /// Surface samples drawn from a mesh before LRF estimation.
    pub dense_points: usize,
    /// Points that receive an LRF (chosen from the dense cloud by FPS).
    pub lrf_points: usize,
    /// Neighbours used for each LRF plane fit.
    pub lrf_neighbors: usize,
    /// Neighbours searched for the farthest point that fixes the second
    /// LRF axis.
    pub lrf_support: usize,
    /// Pooling centers `N`.
    pub centers: usize,
    pub classes: usize,
    pub layers: Vec<QecLayerConfig>,
    pub hidden: usize,
    pub activation: Hidden,
    /// Weight deeper channel means by incoming activations.
    pub weighted_channel_mean: bool,
    /// Scale of the initial output-layer weights relative to 1/√hidden.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::with_sizes(10, 64, 64)
    }
}

impl NetworkConfig {
    /// Two layers: `centers` patches of 9 points with `caps1` capsules
    /// each, then one patch of all centers emitting `classes` capsules.
    pub fn with_sizes(classes: usize, centers: usize, caps1: usize) -> Self {
        Self {
            dense_points: 2048,
            lrf_points: 512,
            lrf_neighbors: 16,
            lrf_support: 16,
            centers,
            classes,
            layers: vec![
                QecLayerConfig {
                    k: 9,
                    channels: 1,
                    outputs: caps1,
                    routing: RoutingConfig::default(),
                },
                QecLayerConfig {
                    k: centers,
                    channels: caps1,
                    outputs: classes,
                    routing: RoutingConfig::default(),
                },
            ],
            hidden: 64,
            activation: Hidden::Relu,
            weighted_channel_mean: true,
            init_scale: 0.5,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != 2 {
            return Err(QecError::Unsupported(format!("{} layers (the network has exactly 2)", self.layers.len())));
        }
        for l in &self.layers {
            l.validate()?;
        }
        let (l1, l2) = (&self.layers[0], &self.layers[1]);
        if l1.channels != 1 {
            return Err(QecError::Config("layer 1 reads one LRF per point (channels = 1)".into()));
        }
        if l1.outputs != l2.channels {
            return Err(QecError::Config(format!(
                "layer 1 emits {} capsules but layer 2 expects {} channels",
                l1.outputs, l2.channels
            )));
        }
        if l2.k != self.centers {
            return Err(QecError::Config(format!("layer 2 patch size {} != {} centers", l2.k, self.centers)));
        }
        if l2.outputs != self.classes || self.classes == 0 {
            return Err(QecError::Config(format!("layer 2 must emit {} class capsules", self.classes)));
        }
        if self.centers > self.lrf_points || self.lrf_points > self.dense_points {
            return Err(QecError::Config("need centers ≤ lrf_points ≤ dense_points".into()));
        }
        if l1.k > self.lrf_points || self.lrf_neighbors < 3 || self.lrf_support < 2 || self.hidden == 0 {
            return Err(QecError::Config("patch or neighbourhood sizes out of range".into()));
        }
        Ok(())
    }

    /// Minimum number of points with valid frames a cloud needs.
    pub fn min_points(&self) -> usize {
        self.centers.max(self.layers[0].k)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.mlp_in() * self.hidden + self.hidden + self.hidden * l.mlp_out() + l.mlp_out())
            .sum()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, default)]
struct NetworkConfigFile {
    dense_points: usize,
    lrf_points: usize,
    lrf_neighbors: usize,
    lrf_support: usize,
    centers: usize,
    classes: usize,
    capsules: usize,
    routing: RoutingConfig,
    layers: Option<Vec<QecLayerConfig>>,
    hidden: usize,
    activation: Hidden,
    weighted_channel_mean: bool,
    init_scale: f64,
    seed: u64,
}

impl Default for NetworkConfigFile {
    fn default() -> Self {
        let d = NetworkConfig::default();
        Self {
            dense_points: d.dense_points,
            lrf_points: d.lrf_points,
            lrf_neighbors: d.lrf_neighbors,
            lrf_support: d.lrf_support,
            centers: d.centers,
            classes: d.classes,
            capsules: d.layers[0].outputs,
            routing: RoutingConfig::default(),
            layers: None,
            hidden: d.hidden,
            activation: d.activation,
            weighted_channel_mean: d.weighted_channel_mean,
            init_scale: d.init_scale,
            seed: d.seed,
        }
    }
}

impl From<NetworkConfigFile> for NetworkConfig {
    fn from(f: NetworkConfigFile) -> Self {
        let mut base = NetworkConfig::with_sizes(f.classes, f.centers, f.capsules);
        let layers = f.layers.unwrap_or_else(|| {
            for l in &mut base.layers {
                l.routing = f.routing;
            }
            base.layers
        });
        Self {
            dense_points: f.dense_points,
            lrf_points: f.lrf_points,
            lrf_neighbors: f.lrf_neighbors,
            lrf_support: f.lrf_support,
            centers: f.centers,
            classes: f.classes,
            layers,
            hidden: f.hidden,
            activation: f.activation,
            weighted_channel_mean: f.weighted_channel_mean,
            init_scale: f.init_scale,
            seed: f.seed,
        }
    }
}

/// Behaviour switches that are not part of the architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct ForwardOptions {
    pub weighted_channel_mean: bool,
    /// Feeds raw patch coordinates to the kernel. Breaks equivariance; only
    /// used as a negative control.
    #[doc(hidden)]
    pub skip_canonicalization: bool,
}

impl ForwardOptions {
    pub fn from_config(cfg: &NetworkConfig) -> Self {
        Self {
            weighted_channel_mean: cfg.weighted_channel_mean,
            skip_canonicalization: false,
        }
    }
}

/// One transform kernel per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<MlpParams>,
}

impl NetworkParams {
    pub fn init(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let layers = cfg
            .layers
            .iter()
            .map(|l| MlpParams::init(l.mlp_in(), cfg.hidden, l.mlp_out(), cfg.init_scale, cfg.activation, &mut rng))
            .collect();
        Ok(Self { layers })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(MlpParams::param_count).sum()
    }

    pub fn check(&self, cfg: &NetworkConfig) -> Result<()> {
        if self.layers.len() != cfg.layers.len() {
            return Err(QecError::ShapeMismatch(format!("{} kernels for {} layers", self.layers.len(), cfg.layers.len())));
        }
        for (p, l) in self.layers.iter().zip(&cfg.layers) {
            p.validate()?;
            if p.n_in != l.mlp_in() || p.n_out != l.mlp_out() || p.hidden != cfg.hidden {
                return Err(QecError::ShapeMismatch(format!(
                    "kernel {}→{}→{} does not fit layer {l:?}",
                    p.n_in, p.hidden, p.n_out
                )));
            }
        }
        Ok(())
    }

    /// Flat views in a fixed order, for the optimizer.
    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers.iter_mut().flat_map(|l| l.arrays_mut()).collect()
    }

    pub fn buffer_sizes(&self) -> Vec<usize> {
        self.layers.iter().flat_map(|l| l.arrays().map(Vec::len)).collect()
    }
}

/// Per-class output capsules.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCapsules {
    pub capsules: Vec<Capsule>,
}

impl LatentCapsules {
    pub fn activations(&self) -> Vec<f64> {
        self.capsules.iter().map(|c| c.activation).collect()
    }
}

/// Index of the largest activation; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn classify(latent: &LatentCapsules) -> usize {
    argmax(&latent.activations())
}

pub fn canonical_pose(latent: &LatentCapsules) -> UnitQuaternion {
    latent.capsules[classify(latent)].pose.canonicalize()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativePose {
    pub rotation: UnitQuaternion,
    pub class_a: usize,
    pub class_b: usize,
}

impl RelativePose {
    /// The two inputs were assigned different classes.
    pub fn class_mismatch(&self) -> bool {
        self.class_a != self.class_b
    }
}

/// Rotation taking the most active capsule of `a` onto that of `b`.
pub fn siamese_relative_pose(a: &LatentCapsules, b: &LatentCapsules) -> RelativePose {
    let (class_a, class_b) = (classify(a), classify(b));
    RelativePose {
        rotation: relative_rotation(&a.capsules[class_a].pose, &b.capsules[class_b].pose),
        class_a,
        class_b,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn latent(acts: &[f64]) -> LatentCapsules {
        let mut rng = ChaCha8Rng::seed_from_u64(acts.len() as u64);
        LatentCapsules {
            capsules: acts.iter().map(|&a| Capsule::new(UnitQuaternion::random(&mut rng), a)).collect(),
        }
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify(&latent(&[0.1, 0.4, 0.2])), 1);
        assert_eq!(classify(&latent(&[0.3, 0.3, 0.3])), 0);
        assert_eq!(classify(&latent(&[0.2])), 0);
    }

    #[test]
    fn canonical_pose_examples() {
        let l = latent(&[0.25]);
        assert_eq!(canonical_pose(&l), l.capsules[0].pose.canonicalize());
        let l = latent(&[0.1, 0.45, 0.3, 0.2]);
        let mut scaled = l.clone();
        for c in &mut scaled.capsules {
            c.activation *= 0.37;
        }
        assert_eq!(classify(&scaled), classify(&l));
        assert_eq!(canonical_pose(&scaled), canonical_pose(&l));
    }

    #[test]
    fn relative_pose_of_identical_inputs() {
        let l = latent(&[0.1, 0.4]);
        let r = siamese_relative_pose(&l, &l);
        assert!(r.rotation.geodesic_distance(&UnitQuaternion::IDENTITY) < 1e-7);
        assert!(!r.class_mismatch());
    }

    #[test]
    fn default_parameter_count() {
        let cfg = NetworkConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.param_count(), 195_648);
        assert_eq!(NetworkParams::init(&cfg).unwrap().param_count(), 195_648);
    }

    #[test]
    fn config_file_derives_layers() {
        let c: NetworkConfig = toml::from_str("classes = 3\ncenters = 16\ncapsules = 8\n[routing]\niterations = 2\n").unwrap();
        assert_eq!(c.layers, NetworkConfig::with_sizes(3, 16, 8).layers.iter().map(|l| QecLayerConfig {
            routing: RoutingConfig { iterations: 2, ..l.routing },
            ..*l
        }).collect::<Vec<_>>());
        c.validate().unwrap();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<NetworkConfig>(&text).unwrap(), c);
        assert!(toml::from_str::<NetworkConfig>("clases = 3").is_err());
    }

    #[test]
    fn config_chaining_is_checked() {
        let mut cfg = NetworkConfig::with_sizes(3, 16, 8);
        cfg.validate().unwrap();
        cfg.layers[1].channels = 9;
        assert!(cfg.validate().is_err());
        let mut cfg = NetworkConfig::with_sizes(3, 16, 8);
        cfg.layers.pop();
        assert!(cfg.validate().is_err());
    }
}
