//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation in execution order. Values live on the
//! tape and are addressed through lightweight [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar node replays the record in reverse and
//! accumulates gradients into every node that depends on a trainable leaf.
//!
//! The tape is meant to be rebuilt for each training step: parameters are
//! copied in as leaves, the forward pass is recorded, gradients are read out
//! and the tape is dropped.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Lower clamp for probabilities inside binary cross entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// Adds a `1 × n` row to every row of the first input.
    AddRow(Var, Var),
    Scale(Var, T),
    Hadamard(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    /// Each row divided by `sqrt(‖row‖² + eps)`.
    NormalizeRows(Var, T),
    /// Rows `start..start + len` of the input.
    SliceRows(Var, usize),
    GradReverse(Var, T),
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Matrix<T>,
        labels: Matrix<T>,
        coeffs: Vec<T>,
    },
    BinaryCrossEntropy {
        probs: Var,
        targets: Vec<T>,
        coeffs: Vec<T>,
    },
    LogitBinaryCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        coeffs: Vec<T>,
        targets: Vec<T>,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    value: Matrix<T>,
    grad: Matrix<T>,
    requires_grad: bool,
}

/// The computation record.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Matrix<T>, requires_grad: bool) -> Var {
        let (r, c) = value.shape();
        self.nodes.push(Node {
            op,
            value,
            grad: Matrix::zeros(r, c),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf: gradients are accumulated into it.
    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Copies the value of `v` into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v).as_slice()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.fill(T::zero());
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape { op, left: sa, right: sb });
        }
        Ok(())
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Sub(a, b), value, rg))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Hadamard(a, b), value, rg))
    }

    /// Broadcast-adds a `1 × n` row vector to each row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xs, rs) = (self.shape(x), self.shape(row));
        if rs.0 != 1 || rs.1 != xs.1 {
            return Err(Error::Shape {
                op: "add_row",
                left: xs,
                right: rs,
            });
        }
        let mut value = self.value(x).clone();
        let bias = self.value(row).as_slice().to_vec();
        for i in 0..xs.0 {
            for (v, &b) in value.row_mut(i).iter_mut().zip(&bias) {
                *v += b;
            }
        }
        let rg = self.any_grad(&[x, row]);
        Ok(self.push(Op::AddRow(x, row), value, rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).scale(s);
        let rg = self.requires_grad(x);
        self.push(Op::Scale(x, s), value, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.requires_grad(x);
        self.push(Op::Relu(x), value, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(logistic);
        let rg = self.requires_grad(x);
        self.push(Op::Sigmoid(x), value, rg)
    }

    /// Sum of all entries, as a `1 × 1` node.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Matrix::scalar(self.value(x).sum());
        let rg = self.requires_grad(x);
        self.push(Op::Sum(x), value, rg)
    }

    /// Scales each row to unit length, `xᵢ / sqrt(‖xᵢ‖² + eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: T) -> Var {
        let mut value = self.value(x).clone();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let norm = (row.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let rg = self.requires_grad(x);
        self.push(Op::NormalizeRows(x, eps), value, rg)
    }

    /// Contiguous block of rows `range` of `x`.
    pub fn slice_rows(&mut self, x: Var, range: std::ops::Range<usize>) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if range.start > range.end || range.end > rows {
            return Err(Error::Shape {
                op: "slice_rows",
                left: (rows, cols),
                right: (range.start, range.end),
            });
        }
        let idx: Vec<usize> = range.clone().collect();
        let value = self.value(x).select_rows(&idx);
        let rg = self.requires_grad(x);
        Ok(self.push(Op::SliceRows(x, range.start), value, rg))
    }

    /// Identity on the forward pass; multiplies the incoming gradient by
    /// `-coeff` on the backward pass.
    pub fn gradient_reversal(&mut self, x: Var, coeff: T) -> Var {
        let value = self.value(x).clone();
        let rg = self.requires_grad(x);
        self.push(Op::GradReverse(x, coeff), value, rg)
    }

    /// `(1/n) Σᵢ wᵢ · CE(softmax(logitsᵢ), labelsᵢ)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &Matrix<T>, weights: &[T]) -> Result<Var> {
        let n = self.shape(logits).0;
        let coeffs = if n == 0 {
            Vec::new()
        } else {
            let inv_n = T::one() / T::from_count(n);
            weights.iter().map(|&w| w * inv_n).collect()
        };
        self.weighted_cross_entropy(logits, labels, coeffs)
    }

    /// `Σᵢ cᵢ · CE(softmax(logitsᵢ), labelsᵢ)` with caller-supplied per-row
    /// coefficients.
    pub fn weighted_cross_entropy(&mut self, logits: Var, labels: &Matrix<T>, coeffs: Vec<T>) -> Result<Var> {
        let ls = self.shape(logits);
        if labels.shape() != ls {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                left: ls,
                right: labels.shape(),
            });
        }
        if coeffs.len() != ls.0 {
            return Err(Error::Shape {
                op: "softmax_cross_entropy weights",
                left: ls,
                right: (coeffs.len(), 1),
            });
        }
        let z = self.value(logits);
        if !z.is_finite() {
            return Err(Error::Numeric {
                op: "softmax_cross_entropy",
                detail: "non-finite logits".into(),
            });
        }
        let mut total = T::zero();
        for (i, (row, &c)) in z.iter_rows().zip(&coeffs).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            let ce: T = row
                .iter()
                .zip(labels.row(i))
                .map(|(&v, &y)| if y == T::zero() { T::zero() } else { y * (lse - v) })
                .sum();
            total += c * ce;
        }
        let probs = z.softmax_rows();
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.clone(),
                coeffs,
            },
            Matrix::scalar(total),
            rg,
        ))
    }

    /// `Σᵢ cᵢ · BCE(pᵢ, yᵢ)` over an `n × 1` column of probabilities, with the
    /// probabilities clamped to `[BCE_EPS, 1 − BCE_EPS]`.
    pub fn binary_cross_entropy(&mut self, probs: Var, targets: &[T], coeffs: &[T]) -> Result<Var> {
        let ps = self.shape(probs);
        if ps.1 != 1 || targets.len() != ps.0 || coeffs.len() != ps.0 {
            return Err(Error::Shape {
                op: "binary_cross_entropy",
                left: ps,
                right: (targets.len(), coeffs.len()),
            });
        }
        let p = self.value(probs);
        if !p.is_finite() {
            return Err(Error::Numeric {
                op: "binary_cross_entropy",
                detail: "non-finite probabilities".into(),
            });
        }
        let (lo, hi) = (T::lit(BCE_EPS), T::one() - T::lit(BCE_EPS));
        let mut total = T::zero();
        for ((&pi, &y), &c) in p.as_slice().iter().zip(targets).zip(coeffs) {
            let q = pi.max(lo).min(hi);
            total += c * -(y * q.ln() + (T::one() - y) * (T::one() - q).ln());
        }
        let rg = self.requires_grad(probs);
        Ok(self.push(
            Op::BinaryCrossEntropy {
                probs,
                targets: targets.to_vec(),
                coeffs: coeffs.to_vec(),
            },
            Matrix::scalar(total),
            rg,
        ))
    }

    /// [`Tape::binary_cross_entropy`] of `sigmoid(logits)`, fused. The value
    /// uses the same clamp; the gradient `cᵢ·(pᵢ − yᵢ)` is that of the
    /// unclamped loss, so a saturated classifier still gets a signal.
    pub fn logit_binary_cross_entropy(&mut self, logits: Var, targets: &[T], coeffs: &[T]) -> Result<Var> {
        let ls = self.shape(logits);
        if ls.1 != 1 || targets.len() != ls.0 || coeffs.len() != ls.0 {
            return Err(Error::Shape {
                op: "logit_binary_cross_entropy",
                left: ls,
                right: (targets.len(), coeffs.len()),
            });
        }
        let z = self.value(logits);
        if !z.is_finite() {
            return Err(Error::Numeric {
                op: "logit_binary_cross_entropy",
                detail: "non-finite logits".into(),
            });
        }
        let probs: Vec<T> = z.as_slice().iter().map(|&v| logistic(v)).collect();
        let (lo, hi) = (T::lit(BCE_EPS), T::one() - T::lit(BCE_EPS));
        let mut total = T::zero();
        for ((&pi, &y), &c) in probs.iter().zip(targets).zip(coeffs) {
            let q = pi.max(lo).min(hi);
            total += c * -(y * q.ln() + (T::one() - y) * (T::one() - q).ln());
        }
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Op::LogitBinaryCrossEntropy {
                logits,
                probs,
                coeffs: coeffs.to_vec(),
                targets: targets.to_vec(),
            },
            Matrix::scalar(total),
            rg,
        ))
    }

    /// Accumulates `∂root/∂v` into every node that requires gradient.
    /// Repeated calls add up.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.shape(root) != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut pending: Vec<Option<Matrix<T>>> = vec![None; root.0 + 1];
        pending[root.0] = Some(Matrix::scalar(T::one()));

        for id in (0..=root.0).rev() {
            let Some(g) = pending[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            for (input, contribution) in self.local_gradients(id, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut pending[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot => *slot = Some(contribution),
                }
            }
            self.nodes[id].grad.add_assign(&g);
        }
        Ok(())
    }

    fn local_gradients(&self, id: usize, g: &Matrix<T>) -> Result<Vec<(Var, Matrix<T>)>> {
        let node = &self.nodes[id];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    out.push((*a, g.matmul_transpose(self.value(*b))?));
                }
                if wants(*b) {
                    out.push((*b, self.value(*a).transpose_matmul(g)?));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.scale(-T::one())));
            }
            Op::AddRow(x, row) => {
                out.push((*x, g.clone()));
                if wants(*row) {
                    let mut acc = Matrix::zeros(1, g.cols());
                    for r in g.iter_rows() {
                        for (a, &v) in acc.as_mut_slice().iter_mut().zip(r) {
                            *a += v;
                        }
                    }
                    out.push((*row, acc));
                }
            }
            Op::Scale(x, s) => out.push((*x, g.scale(*s))),
            Op::Hadamard(a, b) => {
                if wants(*a) {
                    out.push((*a, g.zip_map(self.value(*b), |gv, bv| gv * bv)));
                }
                if wants(*b) {
                    out.push((*b, g.zip_map(self.value(*a), |gv, av| gv * av)));
                }
            }
            Op::Relu(x) => {
                let gx = g.zip_map(&node.value, |gv, y| if y > T::zero() { gv } else { T::zero() });
                out.push((*x, gx));
            }
            Op::Sigmoid(x) => {
                let gx = g.zip_map(&node.value, |gv, s| gv * s * (T::one() - s));
                out.push((*x, gx));
            }
            Op::Sum(x) => {
                let (r, c) = self.shape(*x);
                out.push((*x, Matrix::filled(r, c, g.as_slice()[0])));
            }
            Op::NormalizeRows(x, eps) => {
                let input = self.value(*x);
                let mut gx = Matrix::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let norm = (input.row(i).iter().map(|&v| v * v).sum::<T>() + *eps).sqrt();
                    let y = node.value.row(i);
                    let dot: T = y.iter().zip(g.row(i)).map(|(&a, &b)| a * b).sum();
                    for ((o, &gv), &yv) in gx.row_mut(i).iter_mut().zip(g.row(i)).zip(y) {
                        *o = (gv - yv * dot) / norm;
                    }
                }
                out.push((*x, gx));
            }
            Op::SliceRows(x, start) => {
                let (r, c) = self.shape(*x);
                let mut gx = Matrix::zeros(r, c);
                for i in 0..g.rows() {
                    gx.row_mut(start + i).copy_from_slice(g.row(i));
                }
                out.push((*x, gx));
            }
            Op::GradReverse(x, coeff) => out.push((*x, g.scale(-*coeff))),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
                coeffs,
            } => {
                let upstream = g.as_slice()[0];
                let mut gx = Matrix::zeros(probs.rows(), probs.cols());
                for i in 0..probs.rows() {
                    let mass: T = labels.row(i).iter().copied().sum();
                    let c = coeffs[i] * upstream;
                    for ((o, &p), &y) in gx.row_mut(i).iter_mut().zip(probs.row(i)).zip(labels.row(i)) {
                        *o = c * (p * mass - y);
                    }
                }
                out.push((*logits, gx));
            }
            Op::BinaryCrossEntropy { probs, targets, coeffs } => {
                let upstream = g.as_slice()[0];
                let (lo, hi) = (T::lit(BCE_EPS), T::one() - T::lit(BCE_EPS));
                let p = self.value(*probs);
                let grads = p
                    .as_slice()
                    .iter()
                    .zip(targets)
                    .zip(coeffs)
                    .map(|((&pi, &y), &c)| {
                        if pi < lo || pi > hi {
                            T::zero()
                        } else {
                            upstream * c * (-y / pi + (T::one() - y) / (T::one() - pi))
                        }
                    })
                    .collect();
                out.push((*probs, Matrix::from_vec(p.rows(), 1, grads)?));
            }
            Op::LogitBinaryCrossEntropy {
                logits,
                probs,
                coeffs,
                targets,
            } => {
                let upstream = g.as_slice()[0];
                let grads = probs
                    .iter()
                    .zip(targets)
                    .zip(coeffs)
                    .map(|((&p, &y), &c)| upstream * c * (p - y))
                    .collect();
                out.push((*logits, Matrix::from_vec(probs.len(), 1, grads)?));
            }
        }
        Ok(out)
    }
}

pub fn logistic<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
