//! Sample reweighting for group sufficiency.
//!
//! A bilevel search for a training subset whose trained model has a small
//! invariance-regularized risk across groups, plus the data handling,
//! baselines and metrics needed to evaluate it.

pub mod data;
pub mod error;
pub mod harness;
pub mod inner_trainer;
pub mod irm_risk;
pub mod mask_opt;
pub mod metrics;
pub mod model;
pub mod seed;

pub use error::{Error, Result};
