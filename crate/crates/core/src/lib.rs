//! Graph partial domain adaptation.
//!
//! Trains a feature extractor, two label classifiers, a GCN head over a label
//! relational graph and an adversarial domain classifier, so that a model
//! trained on a labeled source domain transfers to an unlabeled target domain
//! whose classes are an unknown subset of the source classes.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to one precision.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod losses;
pub mod matrix;
pub mod models;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = matrix::Matrix<f64>;
pub type Matrix32 = matrix::Matrix<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Nets64 = models::GpdaNets<f64>;
pub type Nets32 = models::GpdaNets<f32>;
pub type LabelGraph64 = graph::LabelGraph<f64>;
pub type CentroidBank64 = losses::CentroidBank<f64>;
