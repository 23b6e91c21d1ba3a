//! Off-policy evaluation for finite-horizon tabular MDPs.
//!
//! The crate provides:
//!
//! * a tabular MDP model with simulation, importance ratios, and exact
//!   dynamic-programming oracles ([`mdp`]);
//! * the ModelWin / ModelFail / GridWorld benchmark environments ([`envs`]);
//! * empirical-model initial estimators with controllable misspecification
//!   ([`model`]);
//! * the classical estimator suite: IS family, direct method, weighted
//!   doubly-robust, partial returns, MAGIC ([`baselines`]);
//! * longitudinal targeted maximum-likelihood estimation with softening,
//!   partial-horizon, and penalty regularization, plus a cross-validated
//!   variant ([`ltmle`]);
//! * MSE-minimizing convex ensembles of regularized base estimators
//!   ([`ensemble`]);
//! * a reproducible experiment harness with CSV/JSON reporting
//!   ([`harness`]).

pub mod baselines;
pub mod ensemble;
pub mod envs;
pub mod error;
pub mod harness;
pub mod ltmle;
pub mod mdp;
pub mod model;
pub mod seeding;

pub use error::{OpeError, Result};
