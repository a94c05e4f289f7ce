//! Dimensionality-reduction toolkit for hyperspectral data cubes.
//!
//! The crate fits four feature-extraction methods behind one fitted-
//! projection abstraction -- plain PCA, class-wise PCA, Fisher LDA and
//! symmetric FastICA -- and carries the surrounding machinery to compare
//! them on a classification task: cube/label ingestion, stratified splits,
//! a reference MLP classifier with training curves, class-wise accuracy
//! metrics, a seeded synthetic scene generator and a batch pipeline.
//!
//! All numerical routines are generic over the scalar type (`f32`/`f64`,
//! see [`Scalar`]); the aliases below fix the `f64` default used by the CLI
//! and the documented tolerances.

pub mod classifier;
pub mod error;
pub mod hsio;
pub mod linalg;
pub mod mat;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod transforms;

pub use error::{HsdrError, Result};
pub use scalar::Scalar;

/// Default-precision matrix.
pub type Mat64 = mat::Mat<f64>;
/// Default-precision covariance summary.
pub type CovarianceStats64 = linalg::CovarianceStats<f64>;
/// Default-precision eigendecomposition.
pub type EigenDecomposition64 = linalg::EigenDecomposition<f64>;
/// Default-precision fitted transform.
pub type LinearTransform64 = transforms::LinearTransform<f64>;
/// Default-precision classifier config.
pub type MlpConfig64 = classifier::MlpConfig<f64>;
/// Default-precision trained classifier.
pub type TrainedModel64 = classifier::TrainedModel<f64>;
