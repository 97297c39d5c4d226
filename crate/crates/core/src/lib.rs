//! Provider profiling with robust, size-adaptive empirical null
//! distributions.
//!
//! The pipeline turns patient-level outcomes into per-provider fixed-effects
//! Z-scores ([`linear`] for continuous outcomes, [`survival`] for
//! standardized mortality ratios), fits empirical nulls to those scores
//! ([`null_mle`], [`smoothed`]), optionally relaxes them by an
//! accountability fraction ([`lambda`]) and flags providers whose outcomes
//! are worse or better than expected. [`simulation`] reproduces the
//! operating-characteristic studies.

// `!(x > 0.0)` is used on purpose so NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod io;
pub mod lambda;
pub mod linear;
pub mod null_mle;
pub mod optim;
pub mod simulation;
pub mod smoothed;
pub mod spline;
pub mod stats;
pub mod survival;
pub mod types;

pub use error::{ProfilingError, Result};
pub use types::{
    Decision, FlagReport, LinearDataset, LinearVarianceComponents, NullParams, PatientRecord,
    ProviderScore, Status, SurvivalDataset, SurvivalRecord,
};
