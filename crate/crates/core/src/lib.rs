//! Explanation-faithfulness audit engine for small wafer-map classifiers.
//!
//! The crate bundles a reverse-mode autodiff kernel, two reference models, a
//! synthetic wafer-map generator, post-hoc explainers, perturbation-based
//! faithfulness metrics, summary statistics and a black-box model client.

pub mod autodiff;
pub mod blackbox;
pub mod checkpoint;
pub mod error;
pub mod explainers;
pub mod faithfulness;
pub mod models;
pub mod optim;
pub mod par;
pub mod predictor;
pub mod stats;
pub mod synthwafer;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use models::{Arch, Family, Model};
pub use par::Exec;
pub use predictor::Predictor;
pub use tensor::Tensor;
