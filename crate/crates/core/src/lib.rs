//! Generalized pseudo-maximum-likelihood estimation for non-negative outcomes.
//!
//! The estimator family solves
//! `(1/n) sum_i (y_i - exp(theta' x_i)) (c + exp(theta' x_i))^kappa x_i = 0`;
//! `kappa = 1, 0, -1` (with `c = 0`) are nonlinear least squares, Poisson and
//! gamma pseudo-maximum-likelihood.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asymptotics;
pub mod dgp;
pub mod error;
pub mod experiments;
pub mod model;
pub mod moments;
pub mod random;
pub mod selection;
pub mod solver;

pub use asymptotics::{PopulationContext, NamedEstimator};
pub use dgp::{CensorFamily, CensorSpec, DgpConfig, SimulatedSample};
pub use error::{Error, Result};
pub use experiments::{run_phase_grid, run_sweep, PhaseCell, PhasePlan, ReplicationPlan, SweepAxis, SweepResult, SweepRow};
pub use model::{conditional_mean, linear_predictor, Dataset, EstimatorSpec, FitResult, MeanEval};
pub use selection::{cross_validate, holdout_rmse, CvResult, HoldoutResult};
pub use solver::{bootstrap_se, fit, fit_poisson, sandwich_covariance, BootstrapSe, SolverTrace, Termination};
