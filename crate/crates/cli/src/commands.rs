use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use qec_core::capsnet::train::{
    accuracy, cumulative_histogram, median, pair_raes, par_map, prepare_geometry, thread_budget, train,
    Example, RunLog, Validation,
};
use qec_core::capsnet::{
    canonical_pose, classify, network_forward, siamese_relative_pose, ForwardOptions, NetworkConfig, NetworkParams,
};
use qec_core::checkpoint::Checkpoint;
use qec_core::experiment::{run_toy, ToyProtocol};
use qec_core::lrf::frames_for_points;
use qec_core::pointcloud::io::{load_geometry, write_atomic, write_off, Geometry};
use qec_core::pointcloud::manifest::{Manifest, ManifestEntry, Split};
use qec_core::pointcloud::toy::{make_toy_dataset, ToyClass};
use qec_core::pointcloud::{sample_surface, PointCloud};
use qec_core::quat::{rae, UnitQuaternion};
use qec_core::routing::{dynamic_route, routing_complexity, RoutingConfig, VoteTensor};
use qec_core::verify::{run_suite, SuiteOptions};
use qec_core::{QecError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;

/// Per-file seed so that results do not depend on processing order.
fn file_seed(base: u64, index: usize) -> u64 {
    base ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn load_prepared(path: &Path, cfg: &NetworkConfig, seed: u64) -> Result<PointCloud> {
    prepare_geometry(&load_geometry(path)?, cfg, seed)
}

fn load_split(
    entries: &[&ManifestEntry],
    cfg: &NetworkConfig,
    seed: u64,
    rotate: bool,
) -> Result<Vec<(PointCloud, usize, Option<UnitQuaternion>)>> {
    let idx: Vec<usize> = (0..entries.len()).collect();
    let out = par_map(&idx, thread_budget(), |&i| -> Result<_> {
        let e = entries[i];
        let s = file_seed(seed, i);
        let geom = load_geometry(&e.path)?;
        if !rotate {
            return Ok((prepare_geometry(&geom, cfg, s)?, e.label, None));
        }
        let g = UnitQuaternion::random(&mut ChaCha8Rng::seed_from_u64(s ^ 0x5EED));
        let rotated = match geom {
            Geometry::Mesh(m) => Geometry::Mesh(m.rotated(&g)),
            Geometry::Points(c) => Geometry::Points(c.rotated(&g)),
        };
        Ok((prepare_geometry(&rotated, cfg, s.wrapping_add(1))?, e.label, Some(g)))
    });
    out.into_iter().collect()
}

pub fn lrf(input: &Path, k: usize, points: usize, seed: u64, out: Option<&Path>) -> Result<()> {
    let cloud = match load_geometry(input)? {
        Geometry::Mesh(m) => sample_surface(&m, points, seed)?,
        Geometry::Points(c) => c,
    };
    cloud.validate()?;
    let frames = frames_for_points(&cloud.points, &cloud.points, k.min(cloud.len()));
    let mut text = String::new();
    let mut degenerate = 0;
    for (p, f) in cloud.points.iter().zip(&frames) {
        match f {
            Ok(f) => {
                let q = f.q.as_array();
                let _ = writeln!(text, "{} {} {} {} {} {} {}", p[0], p[1], p[2], q[0], q[1], q[2], q[3]);
            }
            Err(_) => degenerate += 1,
        }
    }
    eprintln!("{} frames, {degenerate} degenerate patches skipped", cloud.len() - degenerate);
    if degenerate == cloud.len() {
        return Err(QecError::DegeneratePatch("every neighbourhood is degenerate".into()));
    }
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Returns whether every check passed.
pub fn verify(trials: usize, seed: u64, inject_bug: bool, json: bool) -> Result<bool> {
    let report = run_suite(&SuiteOptions {
        trials,
        seed,
        inject_bug,
    })?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report).map_err(|e| QecError::Config(e.to_string()))?);
    } else {
        println!("{:<16} {:<14} {:>12} {:>10}  status", "check", "metric", "max error", "tolerance");
        for c in &report.checks {
            for m in &c.metrics {
                let ok = m.value <= m.tolerance;
                println!(
                    "{:<16} {:<14} {:>12.3e} {:>10.0e}  {}",
                    c.name,
                    m.name,
                    m.value,
                    m.tolerance,
                    if ok { "ok" } else { "FAIL" }
                );
                if !ok {
                    println!("  worst trial {} of {} (suite seed {seed})", m.worst_trial, c.trials);
                }
            }
        }
        println!("{} trials per check in {:.2} s", trials, report.seconds);
    }
    Ok(report.passed())
}

pub fn train_cmd(manifest: &Path, config: Option<&Path>, out: &Path, log_path: Option<&Path>, seed: u64) -> Result<()> {
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let manifest = Manifest::load(manifest)?;
    let net = &cfg.network;
    if manifest.classes.len() != net.classes {
        return Err(QecError::Config(format!(
            "manifest has {} classes, network expects {}",
            manifest.classes.len(),
            net.classes
        )));
    }
    let train_entries: Vec<&ManifestEntry> = manifest.split(Split::Train).collect();
    if train_entries.is_empty() {
        return Err(QecError::Config("manifest has no training samples".into()));
    }
    let val_entries: Vec<&ManifestEntry> = manifest.split(Split::Val).collect();
    eprintln!("loading {} training and {} validation files", train_entries.len(), val_entries.len());

    let mut data = Vec::with_capacity(train_entries.len());
    for (cloud, label, _) in load_split(&train_entries, net, seed, false)? {
        data.push(Example::new(cloud, label));
    }
    if cfg.train.siamese {
        let partners = load_split(&train_entries, net, seed.wrapping_add(7), false)?;
        for (ex, (b, _, _)) in data.iter_mut().zip(partners) {
            ex.partner = Some((b, UnitQuaternion::IDENTITY));
        }
    }
    let strip = |v: Vec<(PointCloud, usize, Option<UnitQuaternion>)>| v.into_iter().map(|(c, l, _)| (c, l)).collect::<Vec<_>>();
    let nr = strip(load_split(&val_entries, net, seed, false)?);
    let ar = if cfg.rotate_validation {
        strip(load_split(&val_entries, net, seed, true)?)
    } else {
        vec![]
    };

    let log_file: PathBuf = log_path
        .map(Path::to_path_buf)
        .or_else(|| cfg.run_log.clone())
        .unwrap_or_else(|| out.with_extension("jsonl"));
    let mut log = RunLog::new(Some(&log_file));
    let mut params = NetworkParams::init(net)?;
    let val = Validation {
        nr: &nr,
        ar: &ar,
        pairs: &[],
    };
    train(&mut params, net, &cfg.train, &data, &val, &mut log, |r| {
        let mut line = format!("epoch {:>4}  loss {:.5}", r.epoch, r.loss);
        if let Some(a) = r.nr_acc {
            let _ = write!(line, "  nr {:.1}%", 100.0 * a);
        }
        if let Some(a) = r.ar_acc {
            let _ = write!(line, "  ar {:.1}%", 100.0 * a);
        }
        if r.skipped > 0 {
            let _ = write!(line, "  skipped {}", r.skipped);
        }
        eprintln!("{line}  ({:.1} s)", r.seconds);
    })?;
    Checkpoint::new(net.clone(), params)?.save(out)?;
    eprintln!("wrote {} and {}", out.display(), log_file.display());
    Ok(())
}

pub fn eval_cmd(manifest: &Path, ckpt: &Path, rotate: bool, split: Split, seed: u64) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let manifest = Manifest::load(manifest)?;
    let entries: Vec<&ManifestEntry> = manifest.split(split).collect();
    if entries.is_empty() {
        return Err(QecError::Config(format!("no {split:?} samples in manifest")));
    }
    let base = load_split(&entries, &ck.config, seed, false)?;
    let set: Vec<(PointCloud, usize)> = base.iter().map(|(c, l, _)| (c.clone(), *l)).collect();
    let acc = accuracy(&ck.params, &ck.config, &set)?;
    println!("samples   {}", set.len());
    println!("accuracy  {:.2}%", 100.0 * acc);
    if rotate {
        let rotated = load_split(&entries, &ck.config, seed, true)?;
        let rset: Vec<(PointCloud, usize)> = rotated.iter().map(|(c, l, _)| (c.clone(), *l)).collect();
        println!("rotated accuracy  {:.2}%", 100.0 * accuracy(&ck.params, &ck.config, &rset)?);
        let pairs: Vec<_> = base
            .into_iter()
            .zip(rotated)
            .map(|((a, _, _), (b, _, g))| (a, b, g.expect("rotated copies carry their rotation")))
            .collect();
        let (raes, mismatches) = pair_raes(&ck.params, &ck.config, &pairs)?;
        println!("relative pose RAE  mean {:.4}  median {:.4}", raes.iter().sum::<f64>() / raes.len() as f64, median(&raes));
        println!("class mismatches  {mismatches}");
        println!("cumulative error histogram");
        for (deg, pct) in cumulative_histogram(&raes) {
            println!("  <{deg:>2}°  {pct:6.2}%");
        }
    }
    Ok(())
}

pub fn pose(input: &Path, ckpt: &Path, seed: u64) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let cloud = load_prepared(input, &ck.config, seed)?;
    let out = network_forward(&cloud, &ck.params, &ck.config, &ForwardOptions::from_config(&ck.config))?;
    let q = canonical_pose(&out.latent).as_array();
    println!("class {}", classify(&out.latent));
    println!("activations {:?}", out.latent.activations());
    println!("pose {} {} {} {}", q[0], q[1], q[2], q[3]);
    Ok(())
}

pub fn align(a: &Path, b: &Path, ckpt: &Path, truth: Option<[f64; 4]>, seed: u64) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let opts = ForwardOptions::from_config(&ck.config);
    let ca = load_prepared(a, &ck.config, seed)?;
    let cb = if a == b { ca.clone() } else { load_prepared(b, &ck.config, seed)? };
    let la = network_forward(&ca, &ck.params, &ck.config, &opts)?.latent;
    let lb = network_forward(&cb, &ck.params, &ck.config, &opts)?.latent;
    let r = siamese_relative_pose(&la, &lb);
    if r.class_mismatch() {
        eprintln!("warning: inputs classified differently ({} vs {})", r.class_a, r.class_b);
    }
    let q = r.rotation.canonicalize().as_array();
    println!("relative {} {} {} {}", q[0], q[1], q[2], q[3]);
    if let Some(t) = truth {
        println!("rae {}", rae(&r.rotation, &UnitQuaternion::from_array(t)));
    }
    Ok(())
}

pub fn bench_routing(ls: &[usize], ms: &[usize], ks: &[usize], patch: usize, reps: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    println!("{:>6} {:>5} {:>3} {:>12} {:>14}", "L", "M", "k", "seconds", "closed form");
    for &l in ls {
        for &m in ms {
            for &k in ks {
                let votes: Vec<UnitQuaternion> = (0..l * m).map(|_| UnitQuaternion::random(&mut rng)).collect();
                let votes = VoteTensor::new(l, m, votes)?;
                let alpha: Vec<f64> = (0..l).map(|_| rng.gen_range(0.1..1.0)).collect();
                let cfg = RoutingConfig {
                    iterations: k,
                    ..RoutingConfig::default()
                };
                dynamic_route(&votes, &alpha, &cfg)?;
                let start = Instant::now();
                for _ in 0..reps {
                    std::hint::black_box(dynamic_route(&votes, &alpha, &cfg)?);
                }
                let secs = start.elapsed().as_secs_f64() / reps as f64;
                let c = routing_complexity(l as u64, m as u64, patch as u64, k as u64);
                println!("{l:>6} {m:>5} {k:>3} {secs:>12.3e} {:>14}", c.closed_form);
            }
        }
    }
    Ok(())
}

pub fn params(config: Option<&Path>) -> Result<()> {
    let net = match config {
        Some(p) => RunConfig::load(p)?.network,
        None => NetworkConfig::default(),
    };
    net.validate()?;
    for (i, l) in net.layers.iter().enumerate() {
        let n = l.mlp_in() * net.hidden + net.hidden + net.hidden * l.mlp_out() + l.mlp_out();
        println!(
            "layer {}: K={} N^c={} M={} kernel {}→{}→{}  {n} parameters",
            i + 1,
            l.k,
            l.channels,
            l.outputs,
            l.mlp_in(),
            net.hidden,
            l.mlp_out()
        );
    }
    println!("total {}", net.param_count());
    Ok(())
}

pub fn toy(out: &Path, classes: &[ToyClass], train_per_class: usize, test_per_class: usize, noise: f64, seed: u64) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = Manifest {
        classes: classes.iter().map(|c| c.name().to_string()).collect(),
        samples: vec![],
    };
    for (split, n) in [(Split::Train, train_per_class), (Split::Test, test_per_class)] {
        let set = make_toy_dataset(classes, n, noise, rng.gen(), 1)?;
        for (i, s) in set.iter().enumerate() {
            let name = format!("{}_{:?}_{i:03}.off", s.class.name(), split).to_lowercase();
            write_off(&out.join(&name), &s.mesh)?;
            manifest.samples.push(ManifestEntry {
                path: PathBuf::from(name),
                label: s.label,
                split,
                rotation: None,
            });
        }
    }
    manifest.save(&out.join("manifest.toml"))?;
    eprintln!("wrote {} meshes and manifest.toml to {}", manifest.samples.len(), out.display());
    Ok(())
}

pub fn experiment(config: Option<&Path>, log_path: Option<&Path>, ckpt: Option<&Path>) -> Result<()> {
    let p: ToyProtocol = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            toml::from_str(&text).map_err(|e| QecError::Config(format!("{}: {}", path.display(), e.message())))?
        }
        None => ToyProtocol::default(),
    };
    let mut log = RunLog::new(log_path);
    let (params, report) = run_toy(&p, &mut log, |r| {
        eprintln!("epoch {:>4}  loss {:.5}  ({:.1} s)", r.epoch, r.loss, r.seconds);
    })?;
    if let Some(path) = ckpt {
        Checkpoint::new(p.network.clone(), params)?.save(path)?;
    }
    println!("{}", serde_json::to_string_pretty(&report).map_err(|e| QecError::Config(e.to_string()))?);
    Ok(())
}
