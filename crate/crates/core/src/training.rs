//! The adversarial training procedure.
//!
//! Each step records a fresh tape over a joint source/target batch:
//! features `E(x)`, label classifiers on the source rows, pseudo-labels for
//! the target rows, the label relational graph and GCN features, the domain
//! classifier behind a gradient reversal, and the centroid separation term.
//! One backward pass over the weighted total drives an SGD-with-momentum
//! update of every network; the reversal hands the domain classifier its
//! ascent direction.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::PdaTask;
use crate::error::{Error, Result};
use crate::graph::{assign_pseudo_labels, assign_soft_labels, LabelGraph, NodeLabels};
use crate::losses::{
    estimate_gamma, loss_centroid_separation_tracked, loss_domain_logits, loss_source, loss_target_weighted,
    total_loss_tracked, CentroidAssignment, CentroidBank, ClassWeights, Domain, LossBreakdown,
    DEFAULT_CENTROID_MOMENTUM, DEFAULT_LAMBDA1, DEFAULT_LAMBDA2,
};
use crate::matrix::Matrix;
use crate::models::{
    classify, discriminate_logits, feature_extract, gcn_forward, Architecture, GpdaNets, Parameters,
};
use crate::scalar::Scalar;

/// Keeps the unit-length scaling of centroid features smooth at the origin.
pub const CENTROID_NORM_EPS: f64 = 1e-12;

/// Adversarial weight schedule `2 / (1 + e^(−10p)) − 1`, rising from 0 to ≈1.
pub fn grl_coefficient(progress: f64) -> f64 {
    2.0 / (1.0 + (-10.0 * progress).exp()) - 1.0
}

/// Annealed step size `η₀ / (1 + 10p)^0.75`.
pub fn learning_rate(base: f64, progress: f64) -> f64 {
    base / (1.0 + 10.0 * progress).powf(0.75)
}

/// Which parts of the objective are switched off.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Drop the label relational graph and the GCN: the domain classifier and
    /// the centroids read extractor features directly.
    pub no_graph: bool,
    /// Drop the centroid separation term.
    pub no_cs: bool,
    /// Both of the above; kept as its own flag to mirror the experiment table.
    pub baseline: bool,
    /// Supervised source training only: no domain classifier, graph or
    /// centroids, and γ ≡ 1.
    pub source_only: bool,
    /// Pin γ ≡ 1 instead of estimating it.
    pub uniform_gamma: bool,
}

impl Ablation {
    fn validate(&self) -> Result<()> {
        if self.baseline && !(self.no_graph && self.no_cs) {
            return Err(Error::contract("baseline requires no_graph and no_cs"));
        }
        Ok(())
    }

    pub fn uses_graph(&self) -> bool {
        !(self.no_graph || self.source_only)
    }

    pub fn uses_centroids(&self) -> bool {
        !(self.no_cs || self.source_only)
    }

    pub fn uses_adversary(&self) -> bool {
        !self.source_only
    }

    pub fn estimates_gamma(&self) -> bool {
        !(self.uniform_gamma || self.source_only)
    }
}

/// Named configurations compared in the experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    Gpda,
    NoCs,
    NoGraph,
    Baseline,
    SourceOnly,
    DannLike,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Gpda,
        Mode::NoCs,
        Mode::NoGraph,
        Mode::Baseline,
        Mode::SourceOnly,
        Mode::DannLike,
    ];

    pub fn ablation(self) -> Ablation {
        let mut a = Ablation::default();
        match self {
            Mode::Gpda => {}
            Mode::NoCs => a.no_cs = true,
            Mode::NoGraph => a.no_graph = true,
            Mode::Baseline => {
                a.baseline = true;
                a.no_graph = true;
                a.no_cs = true;
            }
            Mode::SourceOnly => {
                a.source_only = true;
                a.uniform_gamma = true;
            }
            Mode::DannLike => {
                a.uniform_gamma = true;
                a.no_graph = true;
                a.no_cs = true;
            }
        }
        a
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Gpda => "gpda",
            Mode::NoCs => "no_cs",
            Mode::NoGraph => "no_graph",
            Mode::Baseline => "baseline",
            Mode::SourceOnly => "source_only",
            Mode::DannLike => "dann_like",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Samples per domain in each step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// γ is re-estimated over the whole target set every this many epochs.
    pub gamma_refresh_epochs: usize,
    pub normalize_gamma: bool,
    pub pseudo_label_threshold: f64,
    /// Use full probability vectors for target rows of the graph instead of
    /// thresholded one-hot labels.
    pub soft_pseudo_labels: bool,
    pub centroid_momentum: f64,
    /// Scale features to unit length before they enter the centroids. The raw
    /// separation term is unbounded below and runs away within a few steps.
    pub normalize_centroid_features: bool,
    /// Global gradient-norm ceiling applied before the momentum update; 0
    /// turns clipping off. Without it the discriminator and the GCN feed each
    /// other ever larger steps and diverge within the first epoch.
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub ablation: Ablation,
    /// Network widths; `None` picks [`Architecture::desk`].
    pub architecture: Option<Architecture>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            lambda1: DEFAULT_LAMBDA1,
            lambda2: DEFAULT_LAMBDA2,
            gamma_refresh_epochs: 1,
            normalize_gamma: true,
            pseudo_label_threshold: 0.8,
            soft_pseudo_labels: false,
            centroid_momentum: DEFAULT_CENTROID_MOMENTUM,
            normalize_centroid_features: true,
            grad_clip_norm: 1.0,
            seed: 0,
            ablation: Ablation::default(),
            architecture: None,
        }
    }
}

impl TrainConfig {
    pub fn for_mode(mode: Mode) -> Self {
        TrainConfig {
            ablation: mode.ablation(),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ablation.validate()?;
        let positive = [
            ("learning_rate", self.learning_rate),
            ("pseudo_label_threshold", self.pseudo_label_threshold),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::contract(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 || self.gamma_refresh_epochs == 0 {
            return Err(Error::contract("batch_size and gamma_refresh_epochs must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.centroid_momentum) {
            return Err(Error::contract("momentum values must lie in [0, 1)"));
        }
        if self.pseudo_label_threshold > 1.0 {
            return Err(Error::contract("pseudo_label_threshold must be at most 1"));
        }
        if !(self.grad_clip_norm >= 0.0) || !self.grad_clip_norm.is_finite() {
            return Err(Error::contract("grad_clip_norm must be a finite non-negative number"));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::contract("trade-off weights must be non-negative"));
        }
        Ok(())
    }

    fn architecture_for(&self, task: &PdaTask) -> Architecture {
        self.architecture
            .clone()
            .unwrap_or_else(|| Architecture::desk(task.dim(), task.classes()))
    }
}

/// One row of the metric history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Step-averaged loss terms.
    pub losses: LossBreakdown<f64>,
    pub target_accuracy: f64,
    /// γ after the epoch's refresh.
    pub gamma: Vec<f64>,
}

/// Mutable training state.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub nets: GpdaNets<T>,
    pub bank: CentroidBank<T>,
    pub gamma: ClassWeights<T>,
    /// Fraction of the schedule completed, in `[0, 1]`.
    pub progress: f64,
    pub step: usize,
    pub total_steps: usize,
    velocity: Vec<Matrix<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(nets: GpdaNets<T>, config: &TrainConfig, total_steps: usize) -> Result<Self> {
        let arch = &nets.architecture;
        let width = if config.ablation.uses_graph() {
            arch.graph_width()
        } else {
            arch.feature_width()
        };
        let bank = CentroidBank::new(arch.classes, width, T::lit(config.centroid_momentum))?;
        let velocity = nets
            .params()
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Ok(TrainState {
            gamma: ClassWeights::uniform(arch.classes),
            nets,
            bank,
            progress: 0.0,
            step: 0,
            total_steps,
            velocity,
            // Offset draws and batch shuffles share this stream.
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15),
        })
    }
}

/// A source/target mini-batch.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub source_inputs: Matrix<T>,
    pub source_labels: Vec<usize>,
    pub target_inputs: Matrix<T>,
}

/// Folds a batch of features into the centroid bank.
pub fn update_centroids<T: Scalar>(
    bank: &mut CentroidBank<T>,
    features: &Matrix<T>,
    labels: &NodeLabels<T>,
    domains: &[Domain],
) -> Result<()> {
    bank.update(features, &centroid_assignments(labels, domains))
}

fn centroid_assignments<T: Scalar>(labels: &NodeLabels<T>, domains: &[Domain]) -> Vec<CentroidAssignment> {
    (0..labels.len())
        .map(|i| labels.class_of(i).map(|k| (domains[i], k)))
        .collect()
}

fn finite<T: Scalar>(term: &'static str, value: T, state: &TrainState<T>) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            term,
            value: value.as_f64(),
            epoch: 0,
            step: state.step,
        })
    }
}

/// The recorded objective of one step.
#[derive(Clone, Debug)]
pub struct Objective {
    pub total: Var,
    pub source: Var,
    pub target: Var,
    pub domain: Option<Var>,
    pub centroid: Option<Var>,
    /// Parameter leaves in [`Parameters`] order of [`GpdaNets`].
    pub params: Vec<Var>,
}

/// Records the full weighted objective of a batch on `tape` without touching
/// any weights. `bank` receives this batch's centroid update; `grl_coeff` is
/// the reversal strength and `offset` the centroid pairing shift.
#[allow(clippy::too_many_arguments)]
pub fn build_objective<T: Scalar>(
    tape: &mut Tape<T>,
    nets: &GpdaNets<T>,
    bank: &mut CentroidBank<T>,
    gamma: &ClassWeights<T>,
    config: &TrainConfig,
    batch: &Batch<T>,
    grl_coeff: T,
    offset: usize,
) -> Result<Objective> {
    let n_s = batch.source_inputs.rows();
    let n_t = batch.target_inputs.rows();
    if n_s == 0 || n_t == 0 {
        return Err(Error::contract("a step needs non-empty source and target batches"));
    }
    let ablation = config.ablation;
    let classes = nets.architecture.classes;

    let extractor = nets.extractor.bind(tape);
    let gcn = nets.gcn.bind(tape);
    let f_s = nets.source_classifier.bind(tape);
    let f_t = nets.target_classifier.bind(tape);
    let disc = nets.discriminator.bind(tape);
    let mut params: Vec<Var> = extractor.params();
    params.extend(gcn.params());
    params.extend(f_s.params());
    params.extend(f_t.params());
    params.extend(disc.params());

    let joint = tape.constant(batch.source_inputs.vstack(&batch.target_inputs)?);
    let feats = feature_extract(tape, &extractor, joint)?;
    let src_feats = tape.slice_rows(feats, 0..n_s)?;
    let tgt_feats = tape.slice_rows(feats, n_s..n_s + n_t)?;

    let logits_s = classify(tape, &f_s, src_feats)?;
    let source = loss_source(tape, logits_s, &batch.source_labels)?;

    let uniform = ClassWeights::uniform(classes);
    let gamma = if ablation.estimates_gamma() { gamma } else { &uniform };
    let logits_t = classify(tape, &f_t, src_feats)?;
    let target = loss_target_weighted(tape, logits_t, &batch.source_labels, gamma)?;

    let mut domain = None;
    let mut centroid = None;
    if ablation.uses_adversary() {
        let mut domains = vec![Domain::Source; n_s];
        domains.extend(std::iter::repeat_n(Domain::Target, n_t));

        // Pseudo-labels come from the target classifier on extractor features.
        let tgt_probs = nets.target_classifier.predict(tape.value(tgt_feats))?.softmax_rows();
        let hard = assign_pseudo_labels(&tgt_probs, T::lit(config.pseudo_label_threshold))?;
        let node_labels = NodeLabels::ground_truth(&batch.source_labels, classes)?.concat(&hard)?;

        let graph_feats = if ablation.uses_graph() {
            let graph_labels = if config.soft_pseudo_labels {
                NodeLabels::ground_truth(&batch.source_labels, classes)?.concat(&assign_soft_labels(&tgt_probs)?)?
            } else {
                node_labels.clone()
            };
            let graph = LabelGraph::build(&graph_labels)?;
            let p = tape.constant(graph.propagation().clone());
            gcn_forward(tape, &gcn, feats, p)?
        } else {
            feats
        };

        let logits = discriminate_logits(tape, &disc, graph_feats, grl_coeff)?;
        let mut weights: Vec<T> = batch.source_labels.iter().map(|&y| gamma.get(y)).collect();
        weights.extend(std::iter::repeat_n(T::one(), n_t));
        domain = Some(loss_domain_logits(tape, logits, &domains, &weights)?);

        if ablation.uses_centroids() && classes > 1 {
            let centroid_feats = if config.normalize_centroid_features {
                tape.normalize_rows(graph_feats, T::lit(CENTROID_NORM_EPS))
            } else {
                graph_feats
            };
            let assignments = centroid_assignments(&node_labels, &domains);
            let tracked = bank.update_tracked(tape, centroid_feats, &assignments)?;
            centroid = Some(loss_centroid_separation_tracked(tape, bank, tracked, offset)?);
        }
    }

    let (lambda1, lambda2) = (T::lit(config.lambda1), T::lit(config.lambda2));
    let total = total_loss_tracked(tape, source, Some(target), domain, centroid, lambda1, lambda2)?;
    Ok(Objective {
        total,
        source,
        target,
        domain,
        centroid,
        params,
    })
}

/// One optimization step. Advances `state.step` and `state.progress`.
pub fn train_step<T: Scalar>(state: &mut TrainState<T>, config: &TrainConfig, batch: &Batch<T>) -> Result<LossBreakdown<T>> {
    let classes = state.nets.architecture.classes;
    let progress = state.progress;
    let offset = if config.ablation.uses_centroids() && classes > 1 {
        state.rng.random_range(1..classes)
    } else {
        1
    };
    let mut tape = Tape::new();
    let objective = build_objective(
        &mut tape,
        &state.nets,
        &mut state.bank,
        &state.gamma,
        config,
        batch,
        T::lit(grl_coefficient(progress)),
        offset,
    )?;
    let Objective {
        total,
        source,
        target,
        domain,
        centroid,
        params: param_vars,
    } = objective;

    let (lambda1, lambda2) = (T::lit(config.lambda1), T::lit(config.lambda2));
    let value = |v: Option<Var>| v.map_or(T::zero(), |v| tape.scalar(v));
    let breakdown = LossBreakdown::new(
        tape.scalar(source),
        tape.scalar(target),
        value(domain),
        value(centroid),
        lambda1,
        lambda2,
    );
    finite("L_S", breakdown.source, state)?;
    finite("L_T", breakdown.target, state)?;
    finite("L_D", breakdown.domain, state)?;
    finite("L_CS", breakdown.centroid, state)?;
    finite("total", tape.scalar(total), state)?;

    tape.backward(total)?;

    let lr = T::lit(learning_rate(config.learning_rate, progress));
    let mu = T::lit(config.momentum);
    let scale = clip_scale(&tape, &param_vars, config.grad_clip_norm);
    for ((param, velocity), var) in state
        .nets
        .params_mut()
        .into_iter()
        .zip(state.velocity.iter_mut())
        .zip(&param_vars)
    {
        let grad = tape.grad(*var);
        for ((p, v), &g) in param.as_mut_slice().iter_mut().zip(velocity.as_mut_slice()).zip(grad.as_slice()) {
            *v = mu * *v + g * scale;
            *p -= lr * *v;
        }
    }
    if !state.nets.is_finite() {
        return Err(Error::NonFiniteLoss {
            term: "parameters",
            value: f64::NAN,
            epoch: 0,
            step: state.step,
        });
    }

    state.step += 1;
    state.progress = if state.total_steps == 0 {
        1.0
    } else {
        (state.step as f64 / state.total_steps as f64).min(1.0)
    };
    Ok(breakdown)
}

/// Factor that brings the global gradient norm down to `max_norm`; 1 when
/// already below it or when clipping is off (`max_norm == 0`).
fn clip_scale<T: Scalar>(tape: &Tape<T>, params: &[Var], max_norm: f64) -> T {
    if max_norm == 0.0 {
        return T::one();
    }
    let norm = params
        .iter()
        .flat_map(|v| tape.grad(*v).as_slice())
        .map(|g| g.as_f64().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        T::lit(max_norm / norm)
    } else {
        T::one()
    }
}

/// Re-estimates γ from the source classifier over the whole target set, or
/// pins it to 1 when the ablation says so.
pub fn refresh_gamma<T: Scalar>(state: &mut TrainState<T>, config: &TrainConfig, target_inputs: &Matrix<T>) -> Result<()> {
    state.gamma = if config.ablation.estimates_gamma() {
        let probs = state.nets.source_probabilities(target_inputs)?;
        estimate_gamma(&probs, config.normalize_gamma)?
    } else {
        ClassWeights::uniform(state.nets.architecture.classes)
    };
    Ok(())
}

/// Fraction of rows whose predicted class matches the label.
pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Steps per epoch: the longer stream is exhausted once.
pub fn steps_per_epoch(n_source: usize, n_target: usize, batch_size: usize) -> usize {
    n_source.max(n_target).div_ceil(batch_size)
}

/// Indices of batch `step` in a shuffled order of `n`, wrapping around.
fn wrapped(order: &[usize], step: usize, batch_size: usize) -> Vec<usize> {
    (0..batch_size).map(|r| order[(step * batch_size + r) % order.len()]).collect()
}

#[derive(Clone, Debug)]
pub struct FitOutcome<T> {
    pub nets: GpdaNets<T>,
    pub history: Vec<EpochMetrics>,
    pub gamma: ClassWeights<T>,
}

/// Full training run on a task.
pub fn fit<T: Scalar>(config: &TrainConfig, task: &PdaTask) -> Result<FitOutcome<T>> {
    let nets = GpdaNets::init(config.architecture_for(task), config.seed)?;
    fit_from(config, task, nets)
}

/// [`fit`] starting from given networks.
pub fn fit_from<T: Scalar>(config: &TrainConfig, task: &PdaTask, nets: GpdaNets<T>) -> Result<FitOutcome<T>> {
    fit_observed(config, task, nets, |_| Ok(()))
}

/// [`fit_from`] that hands every finished epoch to `on_epoch` before moving
/// on, so callers can persist progress ahead of a later abort.
pub fn fit_observed<T: Scalar>(
    config: &TrainConfig,
    task: &PdaTask,
    nets: GpdaNets<T>,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<FitOutcome<T>> {
    config.validate()?;
    let classes = task.classes();
    if nets.architecture.classes != classes || nets.architecture.input_dim != task.dim() {
        return Err(Error::contract(format!(
            "networks built for {} inputs / {} classes, task has {} / {}",
            nets.architecture.input_dim,
            nets.architecture.classes,
            task.dim(),
            classes
        )));
    }
    if task.source.present_classes().len() != classes {
        return Err(Error::contract("every source class needs at least one sample"));
    }
    if task.target.is_empty() {
        return Err(Error::contract("target set is empty"));
    }

    let source_x: Matrix<T> = task.source.samples.cast();
    let target_x: Matrix<T> = task.target.samples.cast();
    let (n_s, n_t) = (task.source.len(), task.target.len());
    let per_epoch = steps_per_epoch(n_s, n_t, config.batch_size);
    let mut state = TrainState::new(nets, config, per_epoch * config.epochs)?;
    refresh_gamma(&mut state, config, &target_x)?;

    let mut history = Vec::with_capacity(config.epochs);
    let mut source_order: Vec<usize> = (0..n_s).collect();
    let mut target_order: Vec<usize> = (0..n_t).collect();
    for epoch in 0..config.epochs {
        source_order.shuffle(&mut state.rng);
        target_order.shuffle(&mut state.rng);
        let mut sums = [0.0f64; 5];
        for step in 0..per_epoch {
            let s_idx = wrapped(&source_order, step, config.batch_size);
            let t_idx = wrapped(&target_order, step, config.batch_size);
            let batch = Batch {
                source_inputs: source_x.select_rows(&s_idx),
                source_labels: s_idx.iter().map(|&i| task.source.labels[i]).collect(),
                target_inputs: target_x.select_rows(&t_idx),
            };
            let b = train_step(&mut state, config, &batch).map_err(|e| match e {
                Error::NonFiniteLoss { term, value, step, .. } => Error::NonFiniteLoss {
                    term,
                    value,
                    epoch,
                    step,
                },
                other => other,
            })?;
            for (acc, v) in sums.iter_mut().zip([b.source, b.target, b.domain, b.centroid, b.total]) {
                *acc += v.as_f64();
            }
        }
        if (epoch + 1) % config.gamma_refresh_epochs == 0 {
            refresh_gamma(&mut state, config, &target_x)?;
        }
        let k = per_epoch.max(1) as f64;
        let [ls, lt, ld, lc, total] = sums.map(|s| s / k);
        let predicted = state.nets.predict_classes(&target_x)?;
        let row = EpochMetrics {
            epoch,
            losses: LossBreakdown {
                source: ls,
                target: lt,
                domain: ld,
                centroid: lc,
                total,
                lambda1: config.lambda1,
                lambda2: config.lambda2,
            },
            target_accuracy: accuracy(&predicted, &task.target.labels),
            gamma: state.gamma.as_slice().iter().map(|g| g.as_f64()).collect(),
        };
        on_epoch(&row)?;
        history.push(row);
    }
    Ok(FitOutcome {
        nets: state.nets,
        history,
        gamma: state.gamma,
    })
}
