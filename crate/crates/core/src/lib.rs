//! Sequence-to-sequence peephole LSTM modeling of longitudinal biomarker
//! cohorts with built-in handling of missing values.
//!
//! The crate covers the full desk-scale pipeline: cohort CSV ingestion and
//! preprocessing ([`data`]), the LSTM cell and feedforward ([`lstm`]),
//! availability-normalized training with imputation baselines and a gradient
//! checker ([`train`]), evaluation metrics and statistical tests ([`eval`]),
//! and a deterministic synthetic cohort generator ([`synth`]).

pub mod data;
mod error;
pub mod eval;
pub mod lstm;
pub mod math;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
