//! The toy classification and alignment protocol: train without rotation
//! augmentation, then test on aligned (NR) and arbitrarily rotated (AR)
//! copies and on rotated, resampled pairs.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capsnet::train::{
    accuracy, cumulative_histogram, median, pair_raes, prepare_cloud, train, EpochRecord, Example, RunLog, TrainConfig,
    Validation,
};
use crate::capsnet::{NetworkConfig, NetworkParams};
use crate::error::Result;
use crate::pointcloud::toy::{make_toy_dataset, ToyClass, ToySample};
use crate::pointcloud::{patch_dropout, PointCloud};
use crate::quat::UnitQuaternion;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyProtocol {
    pub classes: Vec<ToyClass>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of the vertex noise.
    pub noise: f64,
    /// Independent surface samplings per training shape, cycled by epoch.
    pub views: usize,
    /// Fraction of frame-carrying points removed from the second cloud of
    /// each pair in the robustness run.
    pub dropout: f64,
    pub seed: u64,
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

impl Default for ToyProtocol {
    fn default() -> Self {
        let mut network = NetworkConfig::with_sizes(3, 32, 16);
        network.dense_points = 1024;
        network.lrf_points = 256;
        network.lrf_support = 1024;
        network.hidden = 32;
        let train = TrainConfig {
            epochs: 120,
            batch_size: 8,
            lr: 0.01,
            siamese: true,
            rotation_weight: 0.2,
            eval_every: 20,
            ..TrainConfig::default()
        };
        Self {
            classes: ToyClass::ALL[1..].to_vec(),
            train_per_class: 50,
            test_per_class: 20,
            noise: 0.01,
            views: 4,
            dropout: 0.5,
            seed: 0,
            network,
            train,
        }
    }
}

/// `(A, B, g)` with `B` a rotated, independently resampled copy of `A`.
pub type Pair = (PointCloud, PointCloud, UnitQuaternion);

#[derive(Clone, Debug)]
pub struct ToyData {
    pub train: Vec<Example>,
    pub test_nr: Vec<(PointCloud, usize)>,
    pub test_ar: Vec<(PointCloud, usize)>,
    pub pairs: Vec<Pair>,
    /// Same pairs with patch dropout applied to `B`.
    pub pairs_dropout: Vec<Pair>,
}

fn prepared(dense: &PointCloud, cfg: &NetworkConfig) -> Result<PointCloud> {
    Ok(prepare_cloud(dense, cfg)?.0)
}

pub fn build_toy_data(p: &ToyProtocol) -> Result<ToyData> {
    let cfg = &p.network;
    let n = cfg.dense_points;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let train_set = make_toy_dataset(&p.classes, p.train_per_class, p.noise, rng.gen(), n)?;
    let test_set = make_toy_dataset(&p.classes, p.test_per_class, p.noise, rng.gen(), n)?;

    let mut train = Vec::with_capacity(train_set.len());
    for s in &train_set {
        let a = prepared(&s.cloud, cfg)?;
        let partner = if p.train.siamese {
            Some((prepared(&s.resample(n, rng.gen())?, cfg)?, UnitQuaternion::IDENTITY))
        } else {
            None
        };
        let views = (1..p.views.max(1))
            .map(|_| prepared(&s.resample(n, rng.gen())?, cfg))
            .collect::<Result<_>>()?;
        train.push(Example {
            cloud: a,
            label: s.label,
            partner,
            views,
        });
    }

    let mut data = ToyData {
        train,
        test_nr: vec![],
        test_ar: vec![],
        pairs: vec![],
        pairs_dropout: vec![],
    };
    for s in &test_set {
        let a = prepared(&s.cloud, cfg)?;
        let g = UnitQuaternion::random(&mut rng);
        data.test_ar.push((prepared(&s.cloud.rotated(&g), cfg)?, s.label));
        data.test_nr.push((a.clone(), s.label));
        let g = UnitQuaternion::random(&mut rng);
        let rotated: ToySample = s.rotated(&g);
        let b = prepared(&rotated.resample(n, rng.gen())?, cfg)?;
        // Frames come from the full-density cloud; dropout removes patches
        // of frame-carrying points.
        let dropped = patch_dropout(&b, p.dropout, rng.gen())?;
        data.pairs.push((a.clone(), b, g));
        data.pairs_dropout.push((a, dropped, g));
    }
    Ok(data)
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct PairStats {
    pub median_rae: f64,
    pub mean_rae: f64,
    pub class_mismatches: usize,
    /// `(threshold in degrees, percent below)`.
    pub histogram: Vec<(f64, f64)>,
}

impl PairStats {
    pub fn from_raes(raes: &[f64], class_mismatches: usize) -> Self {
        Self {
            median_rae: median(raes),
            mean_rae: raes.iter().sum::<f64>() / raes.len().max(1) as f64,
            class_mismatches,
            histogram: cumulative_histogram(raes),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct ToyReport {
    pub nr_accuracy: f64,
    pub ar_accuracy: f64,
    pub pairs: PairStats,
    pub pairs_dropout: PairStats,
    pub train_seconds: f64,
    pub records: Vec<EpochRecord>,
}

impl ToyReport {
    /// RAE median with dropout over the baseline median.
    pub fn dropout_factor(&self) -> f64 {
        self.pairs_dropout.median_rae / self.pairs.median_rae
    }
}

pub fn evaluate_toy(params: &NetworkParams, cfg: &NetworkConfig, data: &ToyData) -> Result<ToyReport> {
    let (raes, mm) = pair_raes(params, cfg, &data.pairs)?;
    let (raes_d, mm_d) = pair_raes(params, cfg, &data.pairs_dropout)?;
    Ok(ToyReport {
        nr_accuracy: accuracy(params, cfg, &data.test_nr)?,
        ar_accuracy: accuracy(params, cfg, &data.test_ar)?,
        pairs: PairStats::from_raes(&raes, mm),
        pairs_dropout: PairStats::from_raes(&raes_d, mm_d),
        ..Default::default()
    })
}

/// Builds the data, trains from scratch and evaluates.
pub fn run_toy(
    p: &ToyProtocol,
    log: &mut RunLog<'_>,
    progress: impl FnMut(&EpochRecord),
) -> Result<(NetworkParams, ToyReport)> {
    let data = build_toy_data(p)?;
    let mut params = NetworkParams::init(&p.network)?;
    let start = Instant::now();
    let val = Validation {
        nr: &data.test_nr,
        ar: &data.test_ar,
        pairs: &data.pairs,
    };
    let records = train(&mut params, &p.network, &p.train, &data.train, &val, log, progress)?;
    let train_seconds = start.elapsed().as_secs_f64();
    let mut report = evaluate_toy(&params, &p.network, &data)?;
    report.train_seconds = train_seconds;
    report.records = records;
    Ok((params, report))
}
