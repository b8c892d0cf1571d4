//! Objective terms, the class-weight estimator and the moving-average
//! centroid bank.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::one_hot;
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Trade-off weights of the adversarial and centroid terms.
pub const DEFAULT_LAMBDA1: f64 = 1.0;
pub const DEFAULT_LAMBDA2: f64 = 1.0;

/// Which domain a row of a joint batch comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    /// Binary label seen by the domain classifier: source 0, target 1.
    pub fn label<T: Scalar>(self) -> T {
        match self {
            Domain::Source => T::zero(),
            Domain::Target => T::one(),
        }
    }
}

/// Per-class weights γ over the source label space.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights<T> {
    gamma: Vec<T>,
}

impl<T: Scalar> ClassWeights<T> {
    pub fn new(gamma: Vec<T>) -> Result<Self> {
        if gamma.iter().any(|g| !g.is_finite()) {
            return Err(Error::contract("class weights must be finite"));
        }
        Ok(ClassWeights { gamma })
    }

    /// γ ≡ 1.
    pub fn uniform(classes: usize) -> Self {
        ClassWeights {
            gamma: vec![T::one(); classes],
        }
    }

    pub fn as_slice(&self) -> &[T] {
        &self.gamma
    }

    pub fn classes(&self) -> usize {
        self.gamma.len()
    }

    pub fn get(&self, class: usize) -> T {
        self.gamma[class]
    }

    /// Mean of γ over a subset of classes.
    pub fn mean_over(&self, classes: &[usize]) -> T {
        let total: T = classes.iter().map(|&c| self.gamma[c]).sum();
        total / T::from_count(classes.len().max(1))
    }
}

/// Column mean of the source classifier's softmax over target samples,
/// optionally rescaled so the largest entry is 1.
pub fn estimate_gamma<T: Scalar>(target_probs: &Matrix<T>, normalize: bool) -> Result<ClassWeights<T>> {
    let n = target_probs.rows();
    if n == 0 {
        return Err(Error::contract("class weights need at least one target sample"));
    }
    let mut gamma = vec![T::zero(); target_probs.cols()];
    for row in target_probs.iter_rows() {
        for (g, &p) in gamma.iter_mut().zip(row) {
            *g += p;
        }
    }
    let inv_n = T::one() / T::from_count(n);
    gamma.iter_mut().for_each(|g| *g *= inv_n);
    if normalize {
        let max = gamma.iter().copied().fold(T::zero(), T::max);
        if max > T::zero() {
            gamma.iter_mut().for_each(|g| *g /= max);
        }
    }
    ClassWeights::new(gamma)
}

fn check_labels(labels: &[usize], classes: usize, rows: usize) -> Result<()> {
    if rows == 0 {
        return Err(Error::contract("empty source batch"));
    }
    if labels.len() != rows {
        return Err(Error::Shape {
            op: "labels",
            left: (rows, classes),
            right: (labels.len(), 1),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= classes) {
        return Err(Error::contract(format!("label {bad} outside [0, {classes})")));
    }
    Ok(())
}

/// Mean cross entropy of the source classifier on a source batch.
pub fn loss_source<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = tape.shape(logits);
    check_labels(labels, c, n)?;
    tape.softmax_cross_entropy(logits, &one_hot(labels, c), &vec![T::one(); n])
}

/// `(1/n_s) Σᵢ γ_{yᵢ} · CEᵢ`. The normalization stays `1/n_s` whatever γ is.
pub fn loss_target_weighted<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    gamma: &ClassWeights<T>,
) -> Result<Var> {
    let (n, c) = tape.shape(logits);
    check_labels(labels, c, n)?;
    if gamma.classes() != c {
        return Err(Error::Shape {
            op: "loss_target_weighted gamma",
            left: (n, c),
            right: (gamma.classes(), 1),
        });
    }
    let weights: Vec<T> = labels.iter().map(|&y| gamma.get(y)).collect();
    tape.softmax_cross_entropy(logits, &one_hot(labels, c), &weights)
}

/// Domain classification loss in the form the discriminator minimizes:
/// `(1/n_s) Σ_src wᵢ·BCEᵢ + (1/n_t) Σ_tgt wᵢ·BCEᵢ`.
///
/// `sample_weights` carries γ_{yᵢ} on source rows and 1 on target rows. The
/// feature path maximizes this through the reversal inside
/// [`crate::models::discriminate`].
pub fn loss_domain<T: Scalar>(
    tape: &mut Tape<T>,
    domain_probs: Var,
    domains: &[Domain],
    sample_weights: &[T],
) -> Result<Var> {
    let (targets, coeffs) = domain_coefficients(domains, sample_weights)?;
    tape.binary_cross_entropy(domain_probs, &targets, &coeffs)
}

/// [`loss_domain`] on discriminator logits; same value, but the gradient
/// does not vanish where the clamp is active.
pub fn loss_domain_logits<T: Scalar>(
    tape: &mut Tape<T>,
    domain_logits: Var,
    domains: &[Domain],
    sample_weights: &[T],
) -> Result<Var> {
    let (targets, coeffs) = domain_coefficients(domains, sample_weights)?;
    tape.logit_binary_cross_entropy(domain_logits, &targets, &coeffs)
}

fn domain_coefficients<T: Scalar>(domains: &[Domain], sample_weights: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    if sample_weights.len() != domains.len() {
        return Err(Error::Shape {
            op: "loss_domain weights",
            left: (domains.len(), 1),
            right: (sample_weights.len(), 1),
        });
    }
    let n_s = domains.iter().filter(|&&d| d == Domain::Source).count();
    let n_t = domains.len() - n_s;
    let inv = |k: usize| if k == 0 { T::zero() } else { T::one() / T::from_count(k) };
    let (inv_s, inv_t) = (inv(n_s), inv(n_t));
    let targets = domains.iter().map(|d| d.label()).collect();
    let coeffs = domains
        .iter()
        .zip(sample_weights)
        .map(|(d, &w)| match d {
            Domain::Source => w * inv_s,
            Domain::Target => w * inv_t,
        })
        .collect();
    Ok((targets, coeffs))
}

/// Moving-average class centroids per domain.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidBank<T> {
    source: Matrix<T>,
    target: Matrix<T>,
    seen_source: Vec<bool>,
    seen_target: Vec<bool>,
    momentum: T,
}

/// Default moving-average momentum for the centroid bank.
pub const DEFAULT_CENTROID_MOMENTUM: f64 = 0.7;

/// Where a feature row goes in a centroid update: its domain and class, or
/// nowhere (unlabeled targets).
pub type CentroidAssignment = Option<(Domain, usize)>;

/// Centroids of the current step on the tape, differentiable through the
/// current batch only.
#[derive(Clone, Copy, Debug)]
pub struct TrackedCentroids {
    pub source: Var,
    pub target: Var,
}

impl<T: Scalar> CentroidBank<T> {
    pub fn new(classes: usize, width: usize, momentum: T) -> Result<Self> {
        if !(momentum >= T::zero() && momentum < T::one()) {
            return Err(Error::contract(format!("centroid momentum {momentum} outside [0, 1)")));
        }
        Ok(CentroidBank {
            source: Matrix::zeros(classes, width),
            target: Matrix::zeros(classes, width),
            seen_source: vec![false; classes],
            seen_target: vec![false; classes],
            momentum,
        })
    }

    /// A bank with explicit centroids; every row is marked seen.
    pub fn from_centroids(source: Matrix<T>, target: Matrix<T>, momentum: T) -> Result<Self> {
        if source.shape() != target.shape() {
            return Err(Error::Shape {
                op: "CentroidBank::from_centroids",
                left: source.shape(),
                right: target.shape(),
            });
        }
        let mut bank = Self::new(source.rows(), source.cols(), momentum)?;
        bank.seen_source.fill(true);
        bank.seen_target.fill(true);
        bank.source = source;
        bank.target = target;
        Ok(bank)
    }

    pub fn classes(&self) -> usize {
        self.source.rows()
    }

    pub fn width(&self) -> usize {
        self.source.cols()
    }

    pub fn momentum(&self) -> T {
        self.momentum
    }

    pub fn centroids(&self, domain: Domain) -> &Matrix<T> {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    pub fn seen(&self, domain: Domain) -> &[bool] {
        match domain {
            Domain::Source => &self.seen_source,
            Domain::Target => &self.seen_target,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.source.is_finite() && self.target.is_finite()
    }

    /// Per-domain update plan: row weights `W` (classes × n) and the constant
    /// carry-over `B` (classes × width) with `new = W·Z + B`.
    fn plan(&self, domain: Domain, assignments: &[CentroidAssignment]) -> (Matrix<T>, Matrix<T>, Vec<bool>) {
        let classes = self.classes();
        let mut counts = vec![0usize; classes];
        for &(d, k) in assignments.iter().flatten() {
            if d == domain {
                counts[k] += 1;
            }
        }
        let old = self.centroids(domain);
        let seen = self.seen(domain);
        let m = self.momentum;
        let mut weights = Matrix::zeros(classes, assignments.len());
        let mut carry = Matrix::zeros(classes, self.width());
        for k in 0..classes {
            let (fresh, keep) = match (counts[k] > 0, seen[k]) {
                (false, _) => (T::zero(), T::one()),
                (true, false) => (T::one(), T::zero()),
                (true, true) => (T::one() - m, m),
            };
            for (dst, &src) in carry.row_mut(k).iter_mut().zip(old.row(k)) {
                *dst = keep * src;
            }
            if counts[k] > 0 {
                let w = fresh / T::from_count(counts[k]);
                for (j, a) in assignments.iter().enumerate() {
                    if *a == Some((domain, k)) {
                        weights[(k, j)] = w;
                    }
                }
            }
        }
        let now_seen = seen.iter().zip(&counts).map(|(&s, &c)| s || c > 0).collect();
        (weights, carry, now_seen)
    }

    fn check_assignments(&self, rows: usize, width: usize, assignments: &[CentroidAssignment]) -> Result<()> {
        if assignments.len() != rows || width != self.width() {
            return Err(Error::Shape {
                op: "centroid update",
                left: (rows, width),
                right: (assignments.len(), self.width()),
            });
        }
        if let Some((_, k)) = assignments.iter().flatten().find(|(_, k)| *k >= self.classes()) {
            return Err(Error::contract(format!("centroid class {k} outside bank")));
        }
        Ok(())
    }

    /// `c ← m·c + (1−m)·batch_mean` for every (class, domain) present; a first
    /// sighting sets `c = batch_mean`; absent classes keep their centroid.
    pub fn update(&mut self, features: &Matrix<T>, assignments: &[CentroidAssignment]) -> Result<()> {
        self.check_assignments(features.rows(), features.cols(), assignments)?;
        for domain in [Domain::Source, Domain::Target] {
            let (w, carry, seen) = self.plan(domain, assignments);
            let mut next = w.matmul(features)?;
            next.add_assign(&carry);
            self.store(domain, next, seen);
        }
        Ok(())
    }

    /// Same update as [`update`](Self::update), recorded on the tape. The
    /// stored centroids enter as constants, so gradient reaches `features`
    /// only through the current batch means.
    pub fn update_tracked(
        &mut self,
        tape: &mut Tape<T>,
        features: Var,
        assignments: &[CentroidAssignment],
    ) -> Result<TrackedCentroids> {
        let (rows, width) = tape.shape(features);
        self.check_assignments(rows, width, assignments)?;
        let mut out = [features; 2];
        for (slot, domain) in [Domain::Source, Domain::Target].into_iter().enumerate() {
            let (w, carry, seen) = self.plan(domain, assignments);
            let w = tape.constant(w);
            let carry = tape.constant(carry);
            let fresh = tape.matmul(w, features)?;
            let next = tape.add(fresh, carry)?;
            self.store(domain, tape.value(next).clone(), seen);
            out[slot] = next;
        }
        Ok(TrackedCentroids {
            source: out[0],
            target: out[1],
        })
    }

    fn store(&mut self, domain: Domain, centroids: Matrix<T>, seen: Vec<bool>) {
        match domain {
            Domain::Source => {
                self.source = centroids;
                self.seen_source = seen;
            }
            Domain::Target => {
                self.target = centroids;
                self.seen_target = seen;
            }
        }
    }

    /// Pair mask for offset `i`: `k` pairs with target class `(k+i) mod C`
    /// when both sides have been seen.
    fn pair_mask(&self, offset: usize) -> Vec<bool> {
        let c = self.classes();
        (0..c)
            .map(|k| self.seen_source[k] && self.seen_target[(k + offset) % c])
            .collect()
    }
}

fn check_offset(offset: usize, classes: usize) -> Result<()> {
    if offset == 0 || offset >= classes {
        return Err(Error::contract(format!(
            "centroid offset {offset} outside [1, {}]",
            classes.saturating_sub(1)
        )));
    }
    Ok(())
}

/// `−Σₖ ‖c^s_k − c^t_{(k+i) mod C}‖²` over pairs where both centroids exist.
pub fn loss_centroid_separation<T: Scalar>(bank: &CentroidBank<T>, offset: usize) -> Result<T> {
    let c = bank.classes();
    check_offset(offset, c)?;
    let mask = bank.pair_mask(offset);
    let mut total = T::zero();
    for k in (0..c).filter(|&k| mask[k]) {
        let t = (k + offset) % c;
        total += bank
            .source
            .row(k)
            .iter()
            .zip(bank.target.row(t))
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>();
    }
    Ok(-total)
}

/// Tape version of [`loss_centroid_separation`] over the centroids produced by
/// [`CentroidBank::update_tracked`]; `bank` supplies the seen masks.
pub fn loss_centroid_separation_tracked<T: Scalar>(
    tape: &mut Tape<T>,
    bank: &CentroidBank<T>,
    centroids: TrackedCentroids,
    offset: usize,
) -> Result<Var> {
    let c = bank.classes();
    check_offset(offset, c)?;
    let mask = bank.pair_mask(offset);
    let shift = Matrix::from_fn(c, c, |k, j| if j == (k + offset) % c { T::one() } else { T::zero() });
    let shift = tape.constant(shift);
    let mask = tape.constant(Matrix::diag(
        &mask.iter().map(|&b| if b { T::one() } else { T::zero() }).collect::<Vec<_>>(),
    ));
    let shifted = tape.matmul(shift, centroids.target)?;
    let diff = tape.sub(centroids.source, shifted)?;
    let diff = tape.matmul(mask, diff)?;
    let sq = tape.hadamard(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, -T::one()))
}

/// The four objective terms and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown<T> {
    pub source: T,
    pub target: T,
    pub domain: T,
    pub centroid: T,
    pub total: T,
    pub lambda1: T,
    pub lambda2: T,
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn new(source: T, target: T, domain: T, centroid: T, lambda1: T, lambda2: T) -> Self {
        LossBreakdown {
            source,
            target,
            domain,
            centroid,
            total: total_loss(source, target, domain, centroid, lambda1, lambda2),
            lambda1,
            lambda2,
        }
    }
}

/// `L_S + L_T + λ₁·L_D + λ₂·L_CS`.
pub fn total_loss<T: Scalar>(source: T, target: T, domain: T, centroid: T, lambda1: T, lambda2: T) -> T {
    source + target + lambda1 * domain + lambda2 * centroid
}

/// Tape version of [`total_loss`]; absent terms are skipped.
pub fn total_loss_tracked<T: Scalar>(
    tape: &mut Tape<T>,
    source: Var,
    target: Option<Var>,
    domain: Option<Var>,
    centroid: Option<Var>,
    lambda1: T,
    lambda2: T,
) -> Result<Var> {
    let mut acc = source;
    if let Some(t) = target {
        acc = tape.add(acc, t)?;
    }
    if let Some(d) = domain {
        let d = tape.scale(d, lambda1);
        acc = tape.add(acc, d)?;
    }
    if let Some(c) = centroid {
        let c = tape.scale(c, lambda2);
        acc = tape.add(acc, c)?;
    }
    Ok(acc)
}
