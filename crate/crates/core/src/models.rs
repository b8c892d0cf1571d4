//! Parametric components: feature extractor, GCN head, the two label
//! classifiers and the domain classifier.
//!
//! Parameters are stored as plain matrices. For each training step a model is
//! *bound* to a fresh [`Tape`], which copies its parameters in as trainable
//! leaves; the bound handle drives the forward pass and later yields the
//! parameter gradients in the same order as [`Parameters::params_mut`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Anything owning trainable matrices in a fixed order.
pub trait Parameters<T: Scalar> {
    fn params(&self) -> Vec<&Matrix<T>>;
    fn params_mut(&mut self) -> Vec<&mut Matrix<T>>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
}

fn activate<T: Scalar>(tape: &mut Tape<T>, x: Var, act: Activation) -> Var {
    match act {
        Activation::Identity => x,
        Activation::Relu => tape.relu(x),
    }
}

/// Glorot-uniform weights: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<T: Scalar>(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Matrix<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_fn(fan_in, fan_out, |_, _| T::lit(rng.random_range(-a..a)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `in × out`
    pub weight: Matrix<T>,
    /// `1 × out`
    pub bias: Matrix<T>,
}

/// Fully connected stack with rectified hidden layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    layers: Vec<Linear<T>>,
    output_activation: Activation,
}

impl<T: Scalar> Mlp<T> {
    pub fn new(sizes: &[usize], output_activation: Activation, rng: &mut impl Rng) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::contract(format!("an MLP needs at least two sizes, got {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|w| Linear {
                weight: glorot_uniform(w[0], w[1], rng),
                bias: Matrix::zeros(1, w[1]),
            })
            .collect();
        Ok(Mlp {
            layers,
            output_activation,
        })
    }

    pub fn from_layers(layers: Vec<Linear<T>>, output_activation: Activation) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].weight.cols() != pair[1].weight.rows() {
                return Err(Error::Shape {
                    op: "Mlp::from_layers",
                    left: pair[0].weight.shape(),
                    right: pair[1].weight.shape(),
                });
            }
        }
        for l in &layers {
            if l.bias.shape() != (1, l.weight.cols()) {
                return Err(Error::Shape {
                    op: "Mlp::from_layers bias",
                    left: l.weight.shape(),
                    right: l.bias.shape(),
                });
            }
        }
        Ok(Mlp {
            layers,
            output_activation,
        })
    }

    pub fn layers(&self) -> &[Linear<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear<T>] {
        &mut self.layers
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].weight.rows()];
        s.extend(self.layers.iter().map(|l| l.weight.cols()));
        s
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.cols()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundMlp {
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
                .collect(),
            output_activation: self.output_activation,
        }
    }

    /// Forward pass on plain matrices, without recording gradients.
    pub fn predict(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let input = tape.constant(x.clone());
        let out = bound.forward(&mut tape, input)?;
        Ok(tape.value(out).clone())
    }

    fn bind_frozen(&self, tape: &mut Tape<T>) -> BoundMlp {
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.constant(l.weight.clone()), tape.constant(l.bias.clone())))
                .collect(),
            output_activation: self.output_activation,
        }
    }
}

impl<T: Scalar> Parameters<T> for Mlp<T> {
    fn params(&self) -> Vec<&Matrix<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }
}

/// An [`Mlp`] whose parameters live on a tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<(Var, Var)>,
    output_activation: Activation,
}

impl BoundMlp {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let (_, in_width) = tape.shape(x);
        let first = tape.shape(self.layers[0].0);
        if in_width != first.0 {
            return Err(Error::Shape {
                op: "mlp forward",
                left: tape.shape(x),
                right: first,
            });
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            let z = tape.add_row(z, b)?;
            h = if i == last {
                activate(tape, z, self.output_activation)
            } else {
                tape.relu(z)
            };
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Stacked graph convolutions `Z = rect(P · X · Θ)`, no rectifier after the
/// last filter.
#[derive(Clone, Debug, PartialEq)]
pub struct GcnHead<T> {
    filters: Vec<Matrix<T>>,
}

impl<T: Scalar> GcnHead<T> {
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::contract(format!("a GCN head needs at least two sizes, got {sizes:?}")));
        }
        Ok(GcnHead {
            filters: sizes.windows(2).map(|w| glorot_uniform(w[0], w[1], rng)).collect(),
        })
    }

    pub fn from_filters(filters: Vec<Matrix<T>>) -> Result<Self> {
        if filters.is_empty() {
            return Err(Error::contract("a GCN head needs at least one filter"));
        }
        for pair in filters.windows(2) {
            if pair[0].cols() != pair[1].rows() {
                return Err(Error::Shape {
                    op: "GcnHead::from_filters",
                    left: pair[0].shape(),
                    right: pair[1].shape(),
                });
            }
        }
        Ok(GcnHead { filters })
    }

    pub fn filters(&self) -> &[Matrix<T>] {
        &self.filters
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.filters[0].rows()];
        s.extend(self.filters.iter().map(|f| f.cols()));
        s
    }

    pub fn output_width(&self) -> usize {
        self.filters[self.filters.len() - 1].cols()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundGcn {
        BoundGcn {
            filters: self.filters.iter().map(|f| tape.leaf(f.clone())).collect(),
        }
    }
}

impl<T: Scalar> Parameters<T> for GcnHead<T> {
    fn params(&self) -> Vec<&Matrix<T>> {
        self.filters.iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix<T>> {
        self.filters.iter_mut().collect()
    }
}

#[derive(Clone, Debug)]
pub struct BoundGcn {
    filters: Vec<Var>,
}

impl BoundGcn {
    /// `propagation` is the `n × n` normalized adjacency, usually a constant.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, propagation: Var) -> Result<Var> {
        let (n, width) = tape.shape(x);
        let ps = tape.shape(propagation);
        if ps != (n, n) {
            return Err(Error::Shape {
                op: "gcn forward",
                left: ps,
                right: (n, width),
            });
        }
        let mut h = x;
        let last = self.filters.len() - 1;
        for (i, &theta) in self.filters.iter().enumerate() {
            let mixed = tape.matmul(propagation, h)?;
            let z = tape.matmul(mixed, theta)?;
            h = if i == last { z } else { tape.relu(z) };
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<Var> {
        self.filters.clone()
    }
}

/// Layer widths of the whole network set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub classes: usize,
    /// Extractor widths after the input, the last one being the feature width.
    pub extractor: Vec<usize>,
    /// GCN filter widths after the feature width.
    pub gcn: Vec<usize>,
    /// Hidden widths of the domain classifier (its output is always 1).
    pub discriminator_hidden: Vec<usize>,
}

impl Architecture {
    /// Desk-scale defaults: extractor `d → 128 → 64`, GCN `64 → 64 → 64`,
    /// classifiers `64 → C`, domain classifier `64 → 32 → 1`.
    pub fn desk(input_dim: usize, classes: usize) -> Self {
        Architecture {
            input_dim,
            classes,
            extractor: vec![128, 64],
            gcn: vec![64, 64],
            discriminator_hidden: vec![32],
        }
    }

    pub fn feature_width(&self) -> usize {
        *self.extractor.last().unwrap_or(&self.input_dim)
    }

    pub fn extractor_sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim).chain(self.extractor.iter().copied()).collect()
    }

    pub fn gcn_sizes(&self) -> Vec<usize> {
        std::iter::once(self.feature_width()).chain(self.gcn.iter().copied()).collect()
    }

    pub fn graph_width(&self) -> usize {
        *self.gcn.last().unwrap_or(&self.feature_width())
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.classes < 2 || self.extractor.is_empty() || self.gcn.is_empty() {
            return Err(Error::contract(format!("degenerate architecture {self:?}")));
        }
        if self.graph_width() != self.feature_width() {
            // The domain classifier reads either E or G features depending on
            // the ablation, so both must have the same width.
            return Err(Error::contract(format!(
                "GCN output width {} must equal feature width {}",
                self.graph_width(),
                self.feature_width()
            )));
        }
        Ok(())
    }
}

/// The five networks trained jointly.
#[derive(Clone, Debug, PartialEq)]
pub struct GpdaNets<T> {
    pub architecture: Architecture,
    pub seed: u64,
    pub extractor: Mlp<T>,
    pub gcn: GcnHead<T>,
    pub source_classifier: Mlp<T>,
    pub target_classifier: Mlp<T>,
    pub discriminator: Mlp<T>,
}

impl<T: Scalar> GpdaNets<T> {
    /// Glorot-uniform weights and zero biases, deterministic per seed.
    pub fn init(architecture: Architecture, seed: u64) -> Result<Self> {
        architecture.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feat = architecture.feature_width();
        let extractor = Mlp::new(&architecture.extractor_sizes(), Activation::Relu, &mut rng)?;
        let gcn = GcnHead::new(&architecture.gcn_sizes(), &mut rng)?;
        let source_classifier = Mlp::new(&[feat, architecture.classes], Activation::Identity, &mut rng)?;
        let target_classifier = Mlp::new(&[feat, architecture.classes], Activation::Identity, &mut rng)?;
        let mut disc_sizes = vec![architecture.graph_width()];
        disc_sizes.extend(&architecture.discriminator_hidden);
        disc_sizes.push(1);
        let discriminator = Mlp::new(&disc_sizes, Activation::Identity, &mut rng)?;
        Ok(GpdaNets {
            architecture,
            seed,
            extractor,
            gcn,
            source_classifier,
            target_classifier,
            discriminator,
        })
    }

    /// Parameters with stable dotted names, in [`Parameters`] order.
    pub fn named_params(&self) -> Vec<(String, &Matrix<T>)> {
        fn push_mlp<'a, T: Scalar>(prefix: &str, m: &'a Mlp<T>, out: &mut Vec<(String, &'a Matrix<T>)>) {
            for (i, l) in m.layers().iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), &l.weight));
                out.push((format!("{prefix}.{i}.bias"), &l.bias));
            }
        }
        let mut out = Vec::new();
        push_mlp("extractor", &self.extractor, &mut out);
        for (i, f) in self.gcn.filters().iter().enumerate() {
            out.push((format!("gcn.{i}.filter"), f));
        }
        push_mlp("source_classifier", &self.source_classifier, &mut out);
        push_mlp("target_classifier", &self.target_classifier, &mut out);
        push_mlp("discriminator", &self.discriminator, &mut out);
        out
    }

    /// Target-classifier logits `F_t(E(x))`.
    pub fn predict_logits(&self, inputs: &Matrix<T>) -> Result<Matrix<T>> {
        let feats = self.extractor.predict(inputs)?;
        self.target_classifier.predict(&feats)
    }

    /// Source-classifier softmax `softmax(F_s(E(x)))`.
    pub fn source_probabilities(&self, inputs: &Matrix<T>) -> Result<Matrix<T>> {
        let feats = self.extractor.predict(inputs)?;
        Ok(self.source_classifier.predict(&feats)?.softmax_rows())
    }

    pub fn predict_classes(&self, inputs: &Matrix<T>) -> Result<Vec<usize>> {
        Ok(self.predict_logits(inputs)?.argmax_rows())
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }
}

impl<T: Scalar> Parameters<T> for GpdaNets<T> {
    fn params(&self) -> Vec<&Matrix<T>> {
        let mut v = self.extractor.params();
        v.extend(self.gcn.params());
        v.extend(self.source_classifier.params());
        v.extend(self.target_classifier.params());
        v.extend(self.discriminator.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut v = self.extractor.params_mut();
        v.extend(self.gcn.params_mut());
        v.extend(self.source_classifier.params_mut());
        v.extend(self.target_classifier.params_mut());
        v.extend(self.discriminator.params_mut());
        v
    }
}

/// Rows of `E(x)`.
pub fn feature_extract<T: Scalar>(tape: &mut Tape<T>, extractor: &BoundMlp, inputs: Var) -> Result<Var> {
    extractor.forward(tape, inputs)
}

/// Graph features `G(X, A)`.
pub fn gcn_forward<T: Scalar>(tape: &mut Tape<T>, gcn: &BoundGcn, features: Var, propagation: Var) -> Result<Var> {
    gcn.forward(tape, features, propagation)
}

/// Raw logits of a label classifier.
pub fn classify<T: Scalar>(tape: &mut Tape<T>, classifier: &BoundMlp, features: Var) -> Result<Var> {
    classifier.forward(tape, features)
}

/// Domain probabilities: reversal, then the domain classifier, then the
/// logistic function. Output is an `n × 1` column.
pub fn discriminate<T: Scalar>(
    tape: &mut Tape<T>,
    discriminator: &BoundMlp,
    graph_features: Var,
    grl_coeff: T,
) -> Result<Var> {
    let logits = discriminate_logits(tape, discriminator, graph_features, grl_coeff)?;
    Ok(tape.sigmoid(logits))
}

/// [`discriminate`] before the final sigmoid.
pub fn discriminate_logits<T: Scalar>(
    tape: &mut Tape<T>,
    discriminator: &BoundMlp,
    graph_features: Var,
    grl_coeff: T,
) -> Result<Var> {
    let reversed = tape.gradient_reversal(graph_features, grl_coeff);
    discriminator.forward(tape, reversed)
}
