//! `qec`: LRF extraction, invariant checks, training, evaluation, pose
//! estimation, alignment and routing benchmarks.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use qec_core::pointcloud::manifest::Split;
use qec_core::pointcloud::toy::ToyClass;
use qec_core::QecError;

#[derive(Parser)]
#[command(name = "qec", version, about = "Quaternion equivariant capsule networks for point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Per-point local reference frames as "x y z qw qx qy qz" lines.
    Lrf {
        cloud: PathBuf,
        /// Neighbours per plane fit.
        #[arg(long, default_value_t = 9)]
        k: usize,
        /// Surface samples drawn when the input is a mesh.
        #[arg(long, default_value_t = 2048)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Randomized equivariance and invariant checks; exit code 2 on failure.
    VerifyEquivariance {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
        #[arg(long, hide = true)]
        inject_bug: bool,
    },
    /// Trains a network on the train split of a manifest.
    Train {
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Run log (JSON lines); defaults to the checkpoint path with `.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Accuracy on a split; with --rotate also on rotated copies, plus the
    /// relative pose error histogram.
    Eval {
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        rotate: bool,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Class and canonical orientation of one cloud.
    Pose {
        cloud: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Relative rotation taking cloud A onto cloud B.
    Align {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Ground-truth rotation "w,x,y,z"; prints the RAE against it.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        truth: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Wall time of dynamic routing against the closed-form operation count.
    BenchRouting {
        #[arg(long = "L", value_delimiter = ',', default_values_t = vec![64, 128, 256])]
        l: Vec<usize>,
        #[arg(long = "M", value_delimiter = ',', default_values_t = vec![10])]
        m: Vec<usize>,
        /// Routing iterations.
        #[arg(long, value_delimiter = ',', default_values_t = vec![3])]
        k: Vec<usize>,
        /// Patch size used in the operation count.
        #[arg(long = "K", default_value_t = 9)]
        patch: usize,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parameter count of a configuration (default: 10 classes).
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Writes a procedural toy dataset (OFF meshes and manifest.toml).
    Toy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "l_shape,cone,tetra_flag")]
        classes: Vec<ToyClass>,
        #[arg(long, default_value_t = 50)]
        train_per_class: usize,
        #[arg(long, default_value_t = 20)]
        test_per_class: usize,
        #[arg(long, default_value_t = 0.01)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Runs the full toy protocol in memory and prints a JSON report.
    Experiment {
        /// Protocol overrides (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<bool, QecError> {
    match cli.command {
        Command::Lrf {
            cloud,
            k,
            points,
            seed,
            out,
        } => commands::lrf(&cloud, k, points, seed, out.as_deref())?,
        Command::VerifyEquivariance {
            trials,
            seed,
            json,
            inject_bug,
        } => return commands::verify(trials, seed, inject_bug, json),
        Command::Train {
            manifest,
            config,
            out,
            log,
            seed,
        } => commands::train_cmd(&manifest, config.as_deref(), &out, log.as_deref(), seed)?,
        Command::Eval {
            manifest,
            ckpt,
            rotate,
            split,
            seed,
        } => commands::eval_cmd(&manifest, &ckpt, rotate, split.into(), seed)?,
        Command::Pose { cloud, ckpt, seed } => commands::pose(&cloud, &ckpt, seed)?,
        Command::Align {
            a,
            b,
            ckpt,
            truth,
            seed,
        } => {
            let truth = match truth.as_deref() {
                None => None,
                Some(&[w, x, y, z]) => Some([w, x, y, z]),
                Some(t) => return Err(QecError::Config(format!("--truth needs 4 components, got {}", t.len()))),
            };
            commands::align(&a, &b, &ckpt, truth, seed)?
        }
        Command::BenchRouting {
            l,
            m,
            k,
            patch,
            reps,
            seed,
        } => commands::bench_routing(&l, &m, &k, patch, reps.max(1), seed)?,
        Command::Params { config } => commands::params(config.as_deref())?,
        Command::Toy {
            out,
            classes,
            train_per_class,
            test_per_class,
            noise,
            seed,
        } => commands::toy(&out, &classes, train_per_class, test_per_class, noise, seed)?,
        Command::Experiment { config, log, ckpt } => commands::experiment(config.as_deref(), log.as_deref(), ckpt.as_deref())?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
