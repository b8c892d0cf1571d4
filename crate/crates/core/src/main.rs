use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gpda::data::{export_task_csv, SyntheticSpec};
use gpda::experiment::{run_experiment, ExperimentSpec, IdxPaths, TaskSource};
use gpda::training::{Mode, TrainConfig};
use gpda::{Error, Result};

#[derive(Parser)]
#[command(name = "gpda", version, about = "Graph partial domain adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every requested mode on every seed and write metric CSVs.
    Run(Box<RunArgs>),
    /// Write a synthetic task as CSV (x…, label, domain).
    Synth {
        #[command(flatten)]
        synth: SynthArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskKind {
    Synthetic,
    Idx,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F64,
    F32,
}

#[derive(Args)]
struct SynthArgs {
    /// Source classes.
    #[arg(long, default_value_t = 6)]
    classes: usize,
    /// Leading classes present in the target.
    #[arg(long, default_value_t = 3)]
    shared: usize,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value_t = 0.6)]
    sigma: f64,
    /// Target rotation about the origin, degrees.
    #[arg(long, default_value_t = 25.0)]
    rotation: f64,
    #[arg(long, num_args = 2, value_names = ["DX", "DY"], default_values_t = [1.5, 0.0])]
    translation: Vec<f64>,
}

impl SynthArgs {
    fn spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.classes,
            shared: self.shared,
            per_class: self.per_class,
            sigma: self.sigma,
            rotation_deg: self.rotation,
            translation: [self.translation[0], self.translation[1]],
            ..SyntheticSpec::reference(seed)
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_enum, default_value_t = TaskKind::Synthetic)]
    task: TaskKind,
    /// Comma-separated: gpda, no_cs, no_graph, baseline, source_only, dann_like.
    #[arg(long, value_delimiter = ',', default_value = "gpda")]
    mode: Vec<String>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 150)]
    epochs: usize,
    /// Samples per domain in each step.
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Base learning rate.
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda1: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda2: f64,
    /// Pseudo-label confidence threshold.
    #[arg(long, default_value_t = 0.8)]
    threshold: f64,
    #[arg(long, default_value_t = 0.7)]
    centroid_momentum: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    #[arg(long, default_value_t = 1.0)]
    grad_clip: f64,
    /// Feed raw rather than unit-length features to the centroids.
    #[arg(long)]
    raw_centroids: bool,
    /// Use γ as raw column means instead of dividing by the largest entry.
    #[arg(long)]
    raw_gamma: bool,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
    #[arg(long)]
    out: PathBuf,
    /// Also write a checkpoint per run.
    #[arg(long)]
    save_checkpoints: bool,

    #[command(flatten)]
    synth: SynthArgs,

    #[arg(long, required_if_eq("task", "idx"))]
    source_images: Option<PathBuf>,
    #[arg(long, required_if_eq("task", "idx"))]
    source_labels: Option<PathBuf>,
    #[arg(long, required_if_eq("task", "idx"))]
    target_images: Option<PathBuf>,
    #[arg(long, required_if_eq("task", "idx"))]
    target_labels: Option<PathBuf>,
    /// Target classes kept for IDX tasks, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    keep: Vec<usize>,
    /// Use only the first N samples of each IDX domain.
    #[arg(long)]
    limit: Option<usize>,
}

impl RunArgs {
    fn spec(&self) -> Result<ExperimentSpec> {
        let modes = self.mode.iter().map(|m| m.parse()).collect::<Result<Vec<Mode>>>()?;
        let task = match self.task {
            TaskKind::Synthetic => TaskSource::Synthetic(self.synth.spec(0)),
            TaskKind::Idx => {
                let path = |p: &Option<PathBuf>| p.clone().expect("enforced by clap");
                TaskSource::Idx {
                    source: IdxPaths {
                        images: path(&self.source_images),
                        labels: path(&self.source_labels),
                    },
                    target: IdxPaths {
                        images: path(&self.target_images),
                        labels: path(&self.target_labels),
                    },
                    keep: self.keep.clone(),
                    limit: self.limit,
                }
            }
        };
        let config = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            learning_rate: self.lr,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            pseudo_label_threshold: self.threshold,
            centroid_momentum: self.centroid_momentum,
            grad_clip_norm: self.grad_clip,
            normalize_centroid_features: !self.raw_centroids,
            normalize_gamma: !self.raw_gamma,
            ..TrainConfig::default()
        };
        Ok(ExperimentSpec {
            task,
            config,
            modes,
            seeds: self.seeds.clone(),
            out_dir: self.out.clone(),
            save_checkpoints: self.save_checkpoints,
        })
    }
}

fn run(args: &RunArgs) -> Result<()> {
    let spec = args.spec()?;
    let outcome = match args.precision {
        Precision::F64 => run_experiment::<f64>(&spec)?,
        Precision::F32 => run_experiment::<f32>(&spec)?,
    };
    println!("{:<12} {:>8} {:>8}", "mode", "mean", "std");
    for s in &outcome.summary {
        println!("{:<12} {:>8.4} {:>8.4}", s.mode.name(), s.mean, s.std);
    }
    println!("wrote {}", spec.summary_path().display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => run(args),
        Command::Synth { synth, seed, out } => {
            gpda::data::gen_synthetic_pda(&synth.spec(*seed)).and_then(|task| export_task_csv(&task, out))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gpda: {e}");
            if let Error::NonFiniteLoss { .. } = e {
                eprintln!("gpda: partial results are in the output directory");
            }
            ExitCode::FAILURE
        }
    }
}
