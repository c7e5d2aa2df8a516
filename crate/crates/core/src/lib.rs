//! Trimmed constrained marginal-likelihood estimation for mixed-effects
//! models whose fixed-effect part may be nonlinear.
//!
//! The fit alternates an interior-point solve for the parameters at fixed
//! observation weights with a projected gradient step on the weights over the
//! capped simplex `{w : sum(w) = h, 0 <= w <= 1}`. Observations whose weight
//! ends at zero are the detected outliers.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bootstrap;
pub mod capped_simplex;
pub mod data_model;
pub mod error;
pub mod inner_solver;
pub mod likelihood;
pub mod obs_models;
pub mod par;
pub mod rng;
pub mod simharness;
pub mod splines;
pub mod trimming;

pub use data_model::{
    load_dataset, validate_spec, ErrorSpec, GaussianPrior, Group, LinearConstraintSet, MEDataset, ModelSpec,
    NonlinearConstraint, Schema, Theta, TrimBudget, TrimWeights,
};
pub use error::{Error, Result};
pub use inner_solver::{SolveReport, SolveStatus, SolverOptions};
pub use obs_models::ObservationModel;
pub use par::Execution;
pub use trimming::{fit_trimmed, FitResult, TrimOptions};
