//! Max-margin nonparametric latent feature relational models (MedLFRM) and
//! their fully-Bayesian variant for link prediction: truncated mean-field
//! variational inference over an Indian-buffet-process feature matrix
//! alternating with an internal linear SVM solver, plus Normal-Gamma
//! hyperparameter inference.

pub mod bayes;
pub mod data;
pub mod error;
pub mod experiment;
pub mod math;
pub mod model;
pub mod stick;
pub mod svm;

pub use error::{Error, Result};
