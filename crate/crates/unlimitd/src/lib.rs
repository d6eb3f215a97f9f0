//! Meta-learning a parametric distribution over tasks by Bayesian inference on a
//! linearized neural network.
//!
//! The pieces fit together as follows: [`diffnet`] provides a small fully-connected
//! regressor together with exact batch Jacobians and second-order differentiation
//! through those Jacobians. [`gp`] turns a Jacobian feature map plus a Gaussian
//! weight-space prior into a functional distribution with tractable likelihoods and
//! posteriors, and [`mixture`] extends that to an equal-weighted mixture of such
//! distributions for multimodal task families. [`fimsketch`] estimates the top
//! eigenspace of the dataset Fisher information matrix with streaming sketches, which
//! yields the Fisher-projected covariance parameterization. [`taskgen`] supplies the
//! synthetic sine / line / quadratic task clusters, [`trainer`] runs the meta-training
//! loops (identity, random-projection and Fisher-projection variants, single-cluster
//! and mixture), [`maml`] is a first-order MAML baseline on the same networks, and
//! [`eval`] implements the evaluation protocol (MSE-vs-K curves, NLL-based OoD
//! detection with AUC-ROC, uncertainty curves, report files).

pub use nalgebra;

pub mod checkpoint;
pub mod diffnet;
pub mod error;
pub mod eval;
pub mod fimsketch;
pub mod gp;
pub mod maml;
pub mod mixture;
pub mod opt;
pub mod taskgen;
pub mod trainer;

pub use error::{Error, Result};
