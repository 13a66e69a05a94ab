//! Adaptive targeted maximum likelihood estimation for trials augmented
//! with external data.
//!
//! The pipeline: [`data`] loads observations `(S, W, A, Y[, Δ])`,
//! [`nuisance`] cross-fits the outcome, treatment and enrollment
//! regressions, [`working_model`] learns low-dimensional models for the
//! conditional treatment effect and the enrollment effect on [`basis`]
//! indicator bases, and [`estimators`] combines them into the estimate of
//! the trial-population average treatment effect. [`oracle`] computes every
//! quantity exactly on finite distributions; [`simulation`] runs Monte
//! Carlo studies.

pub mod basis;
pub mod data;
pub mod eif;
pub mod error;
pub mod estimators;
pub mod nuisance;
pub mod oracle;
pub mod simulation;
pub mod solvers;
pub mod working_model;

pub use error::{Error, Result};
