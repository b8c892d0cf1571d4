//! Label relational graph over a joint source/target batch.
//!
//! Edge weights are inner products of label vectors, so two nodes are
//! connected exactly when they share a (pseudo-)class. Propagation uses the
//! self-looped, symmetrically normalized adjacency
//! `P = D̃^(-1/2) (A + I) D̃^(-1/2)`.

use crate::error::{Error, Result};
use crate::matrix::{argmax, Matrix};
use crate::scalar::Scalar;

/// Tolerance for the simplex check on classifier probabilities. Widened to a
/// few ulps for `f32`.
pub const SIMPLEX_TOL: f64 = 1e-9;

fn simplex_tol<T: Scalar>() -> f64 {
    SIMPLEX_TOL.max(16.0 * T::epsilon().as_f64())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelKind {
    GroundTruth,
    Pseudo,
    Unlabeled,
}

/// One label vector per node over the full source label space.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeLabels<T> {
    rows: Matrix<T>,
    kinds: Vec<LabelKind>,
}

impl<T: Scalar> NodeLabels<T> {
    /// One-hot ground-truth rows for class ids in `[0, classes)`.
    pub fn ground_truth(class_ids: &[usize], classes: usize) -> Result<Self> {
        if let Some(&bad) = class_ids.iter().find(|&&c| c >= classes) {
            return Err(Error::contract(format!("class id {bad} outside [0, {classes})")));
        }
        Ok(NodeLabels {
            rows: one_hot(class_ids, classes),
            kinds: vec![LabelKind::GroundTruth; class_ids.len()],
        })
    }

    /// Arbitrary label rows, each tagged with its kind. Entries must be
    /// non-negative.
    pub fn new(rows: Matrix<T>, kinds: Vec<LabelKind>) -> Result<Self> {
        if kinds.len() != rows.rows() {
            return Err(Error::Shape {
                op: "NodeLabels::new",
                left: rows.shape(),
                right: (kinds.len(), 1),
            });
        }
        if let Some(v) = rows.as_slice().iter().find(|v| !(**v >= T::zero())) {
            return Err(Error::contract(format!("label entry {v} is negative or NaN")));
        }
        Ok(NodeLabels { rows, kinds })
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        self.rows.cols()
    }

    pub fn rows(&self) -> &Matrix<T> {
        &self.rows
    }

    pub fn kinds(&self) -> &[LabelKind] {
        &self.kinds
    }

    /// Hard class of row `i`, or `None` for unlabeled rows.
    pub fn class_of(&self, i: usize) -> Option<usize> {
        match self.kinds[i] {
            LabelKind::Unlabeled => None,
            _ => Some(argmax(self.rows.row(i))),
        }
    }

    /// Concatenates node sets; `other` follows `self`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        let rows = self.rows.vstack(&other.rows)?;
        let mut kinds = self.kinds.clone();
        kinds.extend_from_slice(&other.kinds);
        Ok(NodeLabels { rows, kinds })
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        NodeLabels {
            rows: self.rows.select_rows(order),
            kinds: order.iter().map(|&i| self.kinds[i]).collect(),
        }
    }
}

pub fn one_hot<T: Scalar>(class_ids: &[usize], classes: usize) -> Matrix<T> {
    let mut m = Matrix::zeros(class_ids.len(), classes);
    for (i, &c) in class_ids.iter().enumerate() {
        m[(i, c)] = T::one();
    }
    m
}

fn check_simplex<T: Scalar>(probs: &Matrix<T>) -> Result<()> {
    for (i, row) in probs.iter_rows().enumerate() {
        let total: T = row.iter().copied().sum();
        let negative = row.iter().any(|v| !(*v >= T::zero()));
        if negative || (total - T::one()).abs().as_f64() > simplex_tol::<T>() {
            return Err(Error::contract(format!(
                "probability row {i} is not on the simplex (sum {total})"
            )));
        }
    }
    Ok(())
}

/// Hard pseudo-labels: rows whose top probability reaches `threshold` become
/// one-hot at the argmax (ties go to the lowest class); the rest are left
/// unlabeled.
pub fn assign_pseudo_labels<T: Scalar>(probs: &Matrix<T>, threshold: T) -> Result<NodeLabels<T>> {
    if !(threshold > T::zero() && threshold <= T::one()) {
        return Err(Error::contract(format!("pseudo-label threshold {threshold} outside (0, 1]")));
    }
    check_simplex(probs)?;
    let mut rows = Matrix::zeros(probs.rows(), probs.cols());
    let mut kinds = Vec::with_capacity(probs.rows());
    for (i, row) in probs.iter_rows().enumerate() {
        let k = argmax(row);
        if row[k] >= threshold {
            rows[(i, k)] = T::one();
            kinds.push(LabelKind::Pseudo);
        } else {
            kinds.push(LabelKind::Unlabeled);
        }
    }
    Ok(NodeLabels { rows, kinds })
}

/// Soft pseudo-labels: every row keeps its full probability vector.
pub fn assign_soft_labels<T: Scalar>(probs: &Matrix<T>) -> Result<NodeLabels<T>> {
    check_simplex(probs)?;
    Ok(NodeLabels {
        rows: probs.clone(),
        kinds: vec![LabelKind::Pseudo; probs.rows()],
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelGraph<T> {
    adjacency: Matrix<T>,
    adjacency_tilde: Matrix<T>,
    degree: Vec<T>,
    propagation: Matrix<T>,
}

impl<T: Scalar> LabelGraph<T> {
    /// `A = Y·Yᵀ`, then self-loops, degrees and the normalized propagation
    /// matrix.
    pub fn build(labels: &NodeLabels<T>) -> Result<Self> {
        let y = labels.rows();
        if let Some(v) = y.as_slice().iter().find(|v| !(**v >= T::zero())) {
            return Err(Error::contract(format!("label entry {v} is negative or NaN")));
        }
        let n = y.rows();
        // Filled from the upper triangle so A = Aᵀ holds bit-for-bit.
        let mut adjacency = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let dot: T = y.row(i).iter().zip(y.row(j)).map(|(&a, &b)| a * b).sum();
                adjacency[(i, j)] = dot;
                adjacency[(j, i)] = dot;
            }
        }
        Ok(Self::from_adjacency(adjacency))
    }

    /// Normalizes an explicit symmetric adjacency.
    pub fn from_adjacency(adjacency: Matrix<T>) -> Self {
        let n = adjacency.rows();
        let mut adjacency_tilde = adjacency.clone();
        for i in 0..n {
            adjacency_tilde[(i, i)] += T::one();
        }
        let degree: Vec<T> = adjacency_tilde.iter_rows().map(|r| r.iter().copied().sum()).collect();
        let inv_sqrt: Vec<T> = degree.iter().map(|d| d.sqrt().recip()).collect();
        let propagation = Matrix::from_fn(n, n, |i, j| inv_sqrt[i] * adjacency_tilde[(i, j)] * inv_sqrt[j]);
        LabelGraph {
            adjacency,
            adjacency_tilde,
            degree,
            propagation,
        }
    }

    /// Graph with no edges: `P = I`.
    pub fn empty(n: usize) -> Self {
        Self::from_adjacency(Matrix::zeros(n, n))
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.rows()
    }

    pub fn adjacency(&self) -> &Matrix<T> {
        &self.adjacency
    }

    pub fn adjacency_tilde(&self) -> &Matrix<T> {
        &self.adjacency_tilde
    }

    /// Diagonal of D̃.
    pub fn degree(&self) -> &[T] {
        &self.degree
    }

    pub fn propagation(&self) -> &Matrix<T> {
        &self.propagation
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(ids: &[usize], c: usize) -> NodeLabels<f64> {
        NodeLabels::ground_truth(ids, c).unwrap()
    }

    #[test]
    fn one_hot_inner_products() {
        let g = LabelGraph::build(&gt(&[0, 0, 1], 2)).unwrap();
        let expected = Matrix::from_rows(&[[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(g.adjacency(), &expected);
    }

    #[test]
    fn distinct_classes_give_identity() {
        let g = LabelGraph::build(&gt(&[0, 1, 2, 3], 4)).unwrap();
        assert_eq!(g.adjacency(), &Matrix::identity(4));
    }

    #[test]
    fn two_same_class_nodes() {
        let g = LabelGraph::build(&gt(&[1, 1], 3)).unwrap();
        assert_eq!(g.adjacency_tilde(), &Matrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]]).unwrap());
        assert_eq!(g.degree(), &[3.0, 3.0]);
        let p = Matrix::from_rows(&[[2.0 / 3.0, 1.0 / 3.0], [1.0 / 3.0, 2.0 / 3.0]]).unwrap();
        assert!(g.propagation().max_abs_diff(&p) < 1e-15);
    }

    #[test]
    fn unlabeled_rows_only_self_loop() {
        let probs = Matrix::from_rows(&[[0.9, 0.1], [0.6, 0.4], [0.95, 0.05]]).unwrap();
        let labels = assign_pseudo_labels(&probs, 0.8).unwrap();
        let g = LabelGraph::build(&labels).unwrap();
        assert!(g.adjacency().row(1).iter().all(|&v| v == 0.0));
        assert_eq!(g.propagation()[(1, 1)], 1.0);
        assert_eq!(g.adjacency()[(0, 2)], 1.0);
    }

    #[test]
    fn negative_label_rejected() {
        let rows = Matrix::from_rows(&[[1.0, -0.5]]).unwrap();
        assert!(NodeLabels::new(rows, vec![LabelKind::Pseudo]).is_err());
    }

    #[test]
    fn pseudo_label_threshold() {
        let l = assign_pseudo_labels(&Matrix::from_rows(&[[0.9, 0.1]]).unwrap(), 0.8).unwrap();
        assert_eq!(l.rows().row(0), &[1.0, 0.0]);
        assert_eq!(l.kinds(), &[LabelKind::Pseudo]);
        assert_eq!(l.class_of(0), Some(0));

        let l = assign_pseudo_labels(&Matrix::from_rows(&[[0.6, 0.4]]).unwrap(), 0.8).unwrap();
        assert_eq!(l.rows().row(0), &[0.0, 0.0]);
        assert_eq!(l.class_of(0), None);
    }

    #[test]
    fn pseudo_label_tie_goes_low() {
        let l = assign_pseudo_labels(&Matrix::from_rows(&[[0.0, 0.5, 0.5]]).unwrap(), 0.5).unwrap();
        assert_eq!(l.class_of(0), Some(1));
    }

    #[test]
    fn off_simplex_rows_rejected() {
        let probs = Matrix::from_rows(&[[0.7, 0.4]]).unwrap();
        assert!(matches!(assign_pseudo_labels(&probs, 0.8), Err(Error::Contract(_))));
        assert!(assign_soft_labels(&probs).is_err());
    }

    #[test]
    fn soft_labels_keep_probabilities() {
        let probs: Matrix<f64> = Matrix::from_rows(&[[0.7, 0.3], [0.5, 0.5]]).unwrap();
        let g = LabelGraph::build(&assign_soft_labels(&probs).unwrap()).unwrap();
        assert!((g.adjacency()[(0, 1)] - 0.5).abs() < 1e-15);
        assert!((g.adjacency()[(0, 0)] - 0.58).abs() < 1e-15);
    }
}
