//! Training, evaluation and the run log.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, MlpVars, Tape};
use crate::error::{QecError, Result};
use crate::lrf::frames_two_scale;
use crate::pointcloud::io::{write_atomic, Geometry};
use crate::pointcloud::{fps_from, sample_surface, PointCloud};
use crate::quat::{rae, UnitQuaternion};

use super::{argmax, network_forward, network_on_tape, siamese_relative_pose, ForwardOptions, NetworkConfig, NetworkParams};

/// FPS picks `lrf_points` points of a dense cloud and gives each an LRF:
/// the normal from its `lrf_neighbors` nearest dense neighbours, the second
/// axis from the farthest of its `lrf_support` nearest. Points whose frame is
/// degenerate are dropped; their count is returned alongside.
pub fn prepare_cloud(dense: &PointCloud, cfg: &NetworkConfig) -> Result<(PointCloud, usize)> {
    dense.validate()?;
    let n = cfg.lrf_points.min(dense.len());
    let picked = fps_from(&dense.points, n, 0)?;
    let queries: Vec<_> = picked.iter().map(|&i| dense.points[i]).collect();
    let (k, ks) = (cfg.lrf_neighbors.min(dense.len()), cfg.lrf_support.min(dense.len()));
    let mut points = Vec::with_capacity(n);
    let mut frames = Vec::with_capacity(n);
    for (p, f) in queries.iter().zip(frames_two_scale(&dense.points, &queries, k, ks)) {
        if let Ok(f) = f {
            points.push(*p);
            frames.push(f);
        }
    }
    let dropped = n - points.len();
    let mut out = PointCloud::new(points);
    out.frames = Some(frames);
    out.label = dense.label;
    out.source = dense.source.clone();
    Ok((out, dropped))
}

/// Samples a mesh (or takes a point set as is) and prepares LRFs.
pub fn prepare_geometry(geom: &Geometry, cfg: &NetworkConfig, seed: u64) -> Result<PointCloud> {
    let dense = match geom {
        Geometry::Mesh(m) => sample_surface(m, cfg.dense_points, seed)?,
        Geometry::Points(c) => c.clone(),
    };
    Ok(prepare_cloud(&dense, cfg)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Spread-loss margin at the first epoch.
    pub margin: f64,
    /// Margin reached after `margin_ramp_epochs` (linear); equal to
    /// `margin` for a constant schedule.
    pub margin_final: f64,
    pub margin_ramp_epochs: usize,
    /// Adds the rotation loss on relative poses of paired copies.
    pub siamese: bool,
    pub rotation_weight: f64,
    /// Validation every this many epochs (and always after the last).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            lr: 1e-3,
            margin: 0.2,
            margin_final: 0.2,
            margin_ramp_epochs: 0,
            siamese: false,
            rotation_weight: 1.0,
            eval_every: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.margin) || self.eval_every == 0 {
            return Err(QecError::Config(format!("invalid training settings {self:?}")));
        }
        Ok(())
    }

    pub fn margin_at(&self, epoch: usize) -> f64 {
        if self.margin_ramp_epochs == 0 {
            return self.margin;
        }
        let f = (epoch as f64 / self.margin_ramp_epochs as f64).min(1.0);
        self.margin + f * (self.margin_final - self.margin)
    }
}

/// A training example: a prepared cloud and, in siamese mode, a second
/// prepared view of the same shape related by `relative` (B = relative·A).
///
/// `views` are further samplings of the same shape in the same pose; epoch
/// `e` trains on view `e mod (1 + views.len())`, with view 0 being `cloud`.
#[derive(Clone, Debug)]
pub struct Example {
    pub cloud: PointCloud,
    pub label: usize,
    pub partner: Option<(PointCloud, UnitQuaternion)>,
    pub views: Vec<PointCloud>,
}

impl Example {
    pub fn new(cloud: PointCloud, label: usize) -> Self {
        Self {
            cloud,
            label,
            partner: None,
            views: vec![],
        }
    }

    pub fn view(&self, epoch: usize) -> &PointCloud {
        match epoch % (1 + self.views.len()) {
            0 => &self.cloud,
            i => &self.views[i - 1],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub nr_acc: Option<f64>,
    pub ar_acc: Option<f64>,
    pub rae: Option<f64>,
    /// Samples whose gradient crossed a degenerate mean and was dropped.
    pub skipped: usize,
    pub seconds: f64,
}

/// Line-delimited JSON records, rewritten atomically after every epoch.
pub struct RunLog<'a> {
    path: Option<&'a Path>,
    lines: String,
}

impl<'a> RunLog<'a> {
    pub fn new(path: Option<&'a Path>) -> Self {
        Self {
            path,
            lines: String::new(),
        }
    }

    pub fn push(&mut self, rec: &EpochRecord) -> Result<()> {
        self.lines.push_str(&serde_json::to_string(rec).map_err(|e| QecError::Config(e.to_string()))?);
        self.lines.push('\n');
        match self.path {
            Some(p) => write_atomic(p, self.lines.as_bytes()),
            None => Ok(()),
        }
    }

    pub fn contents(&self) -> &str {
        &self.lines
    }
}

/// Validation sets evaluated during training.
#[derive(Clone, Copy, Debug, Default)]
pub struct Validation<'a> {
    pub nr: &'a [(PointCloud, usize)],
    pub ar: &'a [(PointCloud, usize)],
    /// `(A, B, g)` with `B ≈ g·A`.
    pub pairs: &'a [(PointCloud, PointCloud, UnitQuaternion)],
}

struct SampleResult {
    loss: f64,
    grads: Option<Vec<Vec<f64>>>,
}

fn sample_grad(
    params: &NetworkParams,
    cfg: &NetworkConfig,
    tcfg: &TrainConfig,
    ex: &Example,
    epoch: usize,
    margin: f64,
) -> Result<SampleResult> {
    let opts = ForwardOptions::from_config(cfg);
    let mut tape = Tape::new();
    let kernels: Vec<MlpVars> = params.layers.iter().map(|p| p.to_tape(&mut tape, true)).collect::<Result<_>>()?;
    let a = network_on_tape(&mut tape, ex.view(epoch), &kernels, cfg, &opts)?;
    let mut loss = tape.spread_loss(a.activations, ex.label, margin)?;
    if tcfg.siamese {
        if let Some((cloud_b, rel)) = &ex.partner {
            let b = network_on_tape(&mut tape, cloud_b, &kernels, cfg, &opts)?;
            let qa = tape.gather(a.poses, vec![ex.label], 4)?;
            let qb = tape.gather(b.poses, vec![ex.label], 4)?;
            let qa_inv = tape.conjugate(qa)?;
            let r = tape.hamilton(qb, qa_inv)?;
            let truth = tape.constant(rel.as_array().to_vec(), &[4])?;
            let rl = tape.rotation_loss(r, truth)?;
            let rl = tape.scale(rl, tcfg.rotation_weight);
            loss = tape.add(loss, rl)?;
        }
    }
    let value = tape.value(loss)[0];
    if !value.is_finite() {
        return Ok(SampleResult {
            loss: value,
            grads: None,
        });
    }
    let grads = match tape.backward(loss) {
        Ok(g) => g,
        Err(QecError::DegenerateSpectrum { .. }) => return Ok(SampleResult { loss: value, grads: None }),
        Err(e) => return Err(e),
    };
    let flat = kernels
        .iter()
        .zip(&params.layers)
        .flat_map(|(k, p)| k.vars().into_iter().zip(p.arrays()).map(|(v, a)| grads.dense(v, a.len())))
        .collect();
    Ok(SampleResult {
        loss: value,
        grads: Some(flat),
    })
}

/// `QEC_THREADS` if set, else the available parallelism.
pub fn thread_budget() -> usize {
    std::env::var("QEC_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Runs `f` on every item, in parallel when allowed, results in item order.
pub fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.min(items.len()).max(1);
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<R>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Mini-batch Adam on the spread loss (plus the rotation loss in siamese
/// mode). Gradients are summed in batch order, so a fixed seed reproduces
/// the same trajectory regardless of thread count.
pub fn train(
    params: &mut NetworkParams,
    cfg: &NetworkConfig,
    tcfg: &TrainConfig,
    data: &[Example],
    val: &Validation<'_>,
    log: &mut RunLog<'_>,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    tcfg.validate()?;
    params.check(cfg)?;
    if let Some(ex) = data.iter().find(|e| e.label >= cfg.classes) {
        return Err(QecError::BadTarget {
            target: ex.label,
            classes: cfg.classes,
        });
    }
    let threads = thread_budget();
    let mut adam = Adam::new(tcfg.lr, &params.buffer_sizes());
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut records = Vec::with_capacity(tcfg.epochs);
    for epoch in 0..tcfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let margin = tcfg.margin_at(epoch);
        let (mut total, mut counted, mut skipped) = (0.0, 0usize, 0usize);
        for batch in order.chunks(tcfg.batch_size) {
            let items: Vec<&Example> = batch.iter().map(|&i| &data[i]).collect();
            let snapshot = &*params;
            let results = par_map(&items, threads, |ex| sample_grad(snapshot, cfg, tcfg, ex, epoch, margin));
            let mut sum: Option<Vec<Vec<f64>>> = None;
            let mut used = 0usize;
            for (r, &idx) in results.into_iter().zip(batch) {
                let r = r?;
                if !r.loss.is_finite() {
                    return Err(QecError::NonFiniteLoss {
                        epoch,
                        sample: idx,
                        detail: format!("loss {}", r.loss),
                    });
                }
                total += r.loss;
                counted += 1;
                let Some(g) = r.grads else {
                    skipped += 1;
                    continue;
                };
                used += 1;
                match &mut sum {
                    None => sum = Some(g),
                    Some(s) => {
                        for (a, b) in s.iter_mut().zip(&g) {
                            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            if let Some(mut g) = sum {
                let inv = 1.0 / used as f64;
                g.iter_mut().flatten().for_each(|x| *x *= inv);
                if g.iter().flatten().any(|x| !x.is_finite()) {
                    return Err(QecError::NonFiniteLoss {
                        epoch,
                        sample: batch[0],
                        detail: "non-finite gradient".into(),
                    });
                }
                adam.step(&mut params.buffers_mut(), &g);
            }
        }
        let mut rec = EpochRecord {
            epoch: epoch + 1,
            loss: total / counted.max(1) as f64,
            skipped,
            ..Default::default()
        };
        if (epoch + 1) % tcfg.eval_every == 0 || epoch + 1 == tcfg.epochs {
            if !val.nr.is_empty() {
                rec.nr_acc = Some(accuracy(params, cfg, val.nr)?);
            }
            if !val.ar.is_empty() {
                rec.ar_acc = Some(accuracy(params, cfg, val.ar)?);
            }
            if !val.pairs.is_empty() {
                rec.rae = Some(median(&pair_raes(params, cfg, val.pairs)?.0));
            }
        }
        rec.seconds = start.elapsed().as_secs_f64();
        log.push(&rec)?;
        progress(&rec);
        records.push(rec);
    }
    Ok(records)
}

/// Predicted class of every cloud, in input order.
pub fn predict(params: &NetworkParams, cfg: &NetworkConfig, clouds: &[&PointCloud]) -> Result<Vec<usize>> {
    let opts = ForwardOptions::from_config(cfg);
    par_map(clouds, thread_budget(), |c| {
        network_forward(c, params, cfg, &opts).map(|o| argmax(&o.latent.activations()))
    })
    .into_iter()
    .collect()
}

pub fn accuracy(params: &NetworkParams, cfg: &NetworkConfig, set: &[(PointCloud, usize)]) -> Result<f64> {
    let clouds: Vec<&PointCloud> = set.iter().map(|(c, _)| c).collect();
    let pred = predict(params, cfg, &clouds)?;
    let hits = pred.iter().zip(set).filter(|(p, (_, l))| *p == l).count();
    Ok(hits as f64 / set.len().max(1) as f64)
}

/// RAE of the siamese relative pose for every `(A, B, g)` pair, plus the
/// number of pairs whose two argmax classes differed.
pub fn pair_raes(
    params: &NetworkParams,
    cfg: &NetworkConfig,
    pairs: &[(PointCloud, PointCloud, UnitQuaternion)],
) -> Result<(Vec<f64>, usize)> {
    let opts = ForwardOptions::from_config(cfg);
    let out: Vec<Result<(f64, bool)>> = par_map(pairs, thread_budget(), |(a, b, g)| {
        let la = network_forward(a, params, cfg, &opts)?.latent;
        let lb = network_forward(b, params, cfg, &opts)?.latent;
        let r = siamese_relative_pose(&la, &lb);
        Ok((rae(&r.rotation, g), r.class_mismatch()))
    });
    let mut raes = Vec::with_capacity(out.len());
    let mut mismatches = 0;
    for r in out {
        let (e, m) = r?;
        raes.push(e);
        mismatches += m as usize;
    }
    Ok((raes, mismatches))
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Thresholds of the cumulative angular-error histogram, in degrees.
pub const HISTOGRAM_BINS: [f64; 6] = [5.0, 10.0, 15.0, 20.0, 30.0, 60.0];

/// Percentage of errors (given as RAE) below each threshold.
pub fn cumulative_histogram(raes: &[f64]) -> Vec<(f64, f64)> {
    HISTOGRAM_BINS
        .iter()
        .map(|&deg| {
            let below = raes.iter().filter(|&&r| r * 180.0 < deg).count();
            (deg, 100.0 * below as f64 / raes.len().max(1) as f64)
        })
        .collect()
}
