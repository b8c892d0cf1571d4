//! Seed × mode experiment runs and their CSV outputs.
//!
//! Per run, `<out>/<mode>_seed<seed>.csv` holds the metric history, written
//! row by row as epochs finish. `<out>/summary.csv` lists the final target
//! accuracy of every run followed by `mean` and `std` rows per mode.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::data::{
    gen_synthetic_pda, idx_dataset, make_partial_target, parse_idx_images, parse_idx_labels, resize_bilinear,
    LabeledDataset, PdaTask, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::models::{Architecture, GpdaNets};
use crate::scalar::Scalar;
use crate::training::{accuracy, fit_observed, EpochMetrics, Mode, TrainConfig};

/// Fixed columns of the metric history, before the γ columns.
pub const METRIC_COLUMNS: [&str; 7] = ["epoch", "L_S", "L_T", "L_D", "L_CS", "total", "target_accuracy"];

#[derive(Clone, Debug, PartialEq)]
pub struct IdxPaths {
    pub images: PathBuf,
    pub labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TaskSource {
    /// Regenerated per run with the run's seed.
    Synthetic(SyntheticSpec),
    Idx {
        source: IdxPaths,
        target: IdxPaths,
        /// Target classes kept; empty keeps all.
        keep: Vec<usize>,
        /// Use only the first this many samples of each domain.
        limit: Option<usize>,
    },
}

impl TaskSource {
    /// Task for one run. Synthetic data follows `seed`; IDX data does not
    /// depend on it.
    pub fn build(&self, seed: u64) -> Result<PdaTask> {
        match self {
            TaskSource::Synthetic(spec) => gen_synthetic_pda(&SyntheticSpec { seed, ..spec.clone() }),
            TaskSource::Idx {
                source,
                target,
                keep,
                limit,
            } => {
                let (src, src_dims) = read_idx(source, *limit)?;
                let (mut tgt, tgt_dims) = read_idx(target, *limit)?;
                if tgt_dims != src_dims {
                    tgt = resize_bilinear(&tgt, tgt_dims, src_dims)?;
                }
                let classes = src.classes.max(tgt.classes);
                let src = LabeledDataset { classes, ..src };
                let mut tgt = LabeledDataset { classes, ..tgt };
                if !keep.is_empty() {
                    tgt = make_partial_target(&tgt, keep)?;
                }
                PdaTask::new(src, tgt)
            }
        }
    }
}

fn read_idx(paths: &IdxPaths, limit: Option<usize>) -> Result<(LabeledDataset, (usize, usize))> {
    let img = fs::read(&paths.images).map_err(|e| Error::io(&paths.images, e))?;
    let lbl = fs::read(&paths.labels).map_err(|e| Error::io(&paths.labels, e))?;
    let mut images = parse_idx_images(&img)?;
    let mut labels = parse_idx_labels(&lbl)?;
    if let Some(n) = limit {
        let n = n.min(images.count).min(labels.len());
        images.pixels.truncate(n * images.rows * images.cols);
        images.count = n;
        labels.truncate(n);
    }
    let dims = (images.rows, images.cols);
    Ok((idx_dataset(&images, &labels)?, dims))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub task: TaskSource,
    /// Shared settings; each mode overrides the ablation flags.
    pub config: TrainConfig,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub save_checkpoints: bool,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.modes.is_empty() {
            return Err(Error::contract("an experiment needs at least one seed and one mode"));
        }
        let mut modes = self.modes.clone();
        modes.sort();
        modes.dedup();
        if modes.len() != self.modes.len() {
            return Err(Error::contract("modes must not repeat"));
        }
        self.config.validate()
    }

    pub fn history_path(&self, mode: Mode, seed: u64) -> PathBuf {
        self.out_dir.join(format!("{mode}_seed{seed}.csv"))
    }

    pub fn summary_path(&self) -> PathBuf {
        self.out_dir.join("summary.csv")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub mode: Mode,
    pub seed: u64,
    pub final_accuracy: f64,
    pub history: Vec<EpochMetrics>,
}

/// Aggregate over seeds for one mode.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeSummary {
    pub mode: Mode,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
}

impl ModeSummary {
    pub fn from_accuracies(mode: Mode, accuracies: Vec<f64>) -> Self {
        let n = accuracies.len() as f64;
        let mean = if accuracies.is_empty() {
            f64::NAN
        } else {
            accuracies.iter().sum::<f64>() / n
        };
        let std = if accuracies.len() < 2 {
            0.0
        } else {
            (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        ModeSummary {
            mode,
            accuracies,
            mean,
            std,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutcome {
    pub runs: Vec<RunResult>,
    /// One entry per requested mode, in request order.
    pub summary: Vec<ModeSummary>,
}

/// Fits every mode on every seed, writing histories and the summary as it
/// goes. On an abort the files written so far are complete and flushed.
pub fn run_experiment<T: Scalar>(spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    spec.validate()?;
    fs::create_dir_all(&spec.out_dir).map_err(|e| Error::io(&spec.out_dir, e))?;
    let mut summary_writer = SummaryWriter::create(&spec.summary_path())?;

    let mut runs = Vec::new();
    let mut summary = Vec::new();
    for &mode in &spec.modes {
        let mut accuracies = Vec::new();
        for &seed in &spec.seeds {
            let task = spec.task.build(seed)?;
            let config = TrainConfig {
                seed,
                ablation: mode.ablation(),
                ..spec.config.clone()
            };
            let nets = GpdaNets::<T>::init(
                config
                    .architecture
                    .clone()
                    .unwrap_or_else(|| Architecture::desk(task.dim(), task.classes())),
                seed,
            )?;
            // Accuracy before any training, reported when there are no epochs.
            let untrained = accuracy(&nets.predict_classes(&task.target.samples.cast())?, &task.target.labels);

            let mut metrics = MetricsWriter::create(&spec.history_path(mode, seed), task.classes())?;
            let outcome = fit_observed(&config, &task, nets, |row| metrics.write(row));
            metrics.finish()?;
            let outcome = match outcome {
                Ok(o) => o,
                Err(e) => {
                    summary_writer.finish()?;
                    return Err(e);
                }
            };
            if spec.save_checkpoints {
                checkpoint::save(&outcome.nets, &spec.out_dir.join(format!("{mode}_seed{seed}")))?;
            }
            let final_accuracy = outcome.history.last().map_or(untrained, |h| h.target_accuracy);
            summary_writer.run(mode, seed, final_accuracy)?;
            accuracies.push(final_accuracy);
            runs.push(RunResult {
                mode,
                seed,
                final_accuracy,
                history: outcome.history,
            });
        }
        summary.push(ModeSummary::from_accuracies(mode, accuracies));
    }
    for s in &summary {
        summary_writer.aggregate(s)?;
    }
    summary_writer.finish()?;
    Ok(ExperimentOutcome { runs, summary })
}

fn csv_error(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// Incremental writer for the metric history CSV.
pub struct MetricsWriter {
    path: PathBuf,
    inner: csv::Writer<File>,
    classes: usize,
}

impl MetricsWriter {
    /// Creates the file and writes the header.
    pub fn create(path: &Path, classes: usize) -> Result<Self> {
        let mut inner = csv::Writer::from_path(path).map_err(csv_error(path))?;
        inner.write_record(metric_header(classes)).map_err(csv_error(path))?;
        inner.flush().map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            inner,
            classes,
        })
    }

    pub fn write(&mut self, row: &EpochMetrics) -> Result<()> {
        if row.gamma.len() != self.classes {
            return Err(Error::contract(format!(
                "history row has {} γ entries, header has {}",
                row.gamma.len(),
                self.classes
            )));
        }
        let l = &row.losses;
        let mut rec = vec![row.epoch.to_string()];
        rec.extend(
            [l.source, l.target, l.domain, l.centroid, l.total, row.target_accuracy]
                .iter()
                .map(f64::to_string),
        );
        rec.extend(row.gamma.iter().map(f64::to_string));
        self.inner.write_record(&rec).map_err(csv_error(&self.path))?;
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn metric_header(classes: usize) -> Vec<String> {
    METRIC_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain((0..classes).map(|k| format!("gamma_{k}")))
        .collect()
}

/// Writes a whole history; an empty history gives a header-only file.
pub fn emit_metrics(history: &[EpochMetrics], classes: usize, path: &Path) -> Result<()> {
    let mut w = MetricsWriter::create(path, classes)?;
    for row in history {
        w.write(row)?;
    }
    w.finish()
}

/// Parses a file written by [`emit_metrics`]. λ₁ and λ₂ are not stored and
/// come back as NaN.
pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error(path))?;
    let header = r.headers().map_err(csv_error(path))?.clone();
    let fixed = METRIC_COLUMNS.len();
    if header.len() < fixed || header.iter().take(fixed).ne(METRIC_COLUMNS) {
        return Err(Error::Format {
            kind: "metric CSV",
            offset: 0,
            detail: format!("unexpected header {header:?}"),
        });
    }
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_error(path))?;
        let bad = |detail: String| Error::Format {
            kind: "metric CSV",
            offset: line + 1,
            detail,
        };
        let epoch = rec[0].parse::<usize>().map_err(|e| bad(format!("epoch: {e}")))?;
        let nums = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        out.push(EpochMetrics {
            epoch,
            losses: LossBreakdown {
                source: nums[0],
                target: nums[1],
                domain: nums[2],
                centroid: nums[3],
                total: nums[4],
                lambda1: f64::NAN,
                lambda2: f64::NAN,
            },
            target_accuracy: nums[5],
            gamma: nums[6..].to_vec(),
        });
    }
    Ok(out)
}

struct SummaryWriter {
    path: PathBuf,
    inner: csv::Writer<File>,
}

impl SummaryWriter {
    fn create(path: &Path) -> Result<Self> {
        let mut inner = csv::Writer::from_path(path).map_err(csv_error(path))?;
        inner.write_record(["mode", "seed", "final_accuracy"]).map_err(csv_error(path))?;
        inner.flush().map_err(|e| Error::io(path, e))?;
        Ok(SummaryWriter {
            path: path.to_path_buf(),
            inner,
        })
    }

    fn record(&mut self, fields: [String; 3]) -> Result<()> {
        self.inner.write_record(&fields).map_err(csv_error(&self.path))?;
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }

    fn run(&mut self, mode: Mode, seed: u64, accuracy: f64) -> Result<()> {
        self.record([mode.to_string(), seed.to_string(), accuracy.to_string()])
    }

    fn aggregate(&mut self, s: &ModeSummary) -> Result<()> {
        self.record([s.mode.to_string(), "mean".into(), s.mean.to_string()])?;
        self.record([s.mode.to_string(), "std".into(), s.std.to_string()])
    }

    fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}
