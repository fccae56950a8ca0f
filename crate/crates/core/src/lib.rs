//! Server Quality Scores for tennis serving.
//!
//! The pipeline cleans Grand Slam point-by-point data ([`ingest`]),
//! summarizes each server's serves ([`features`]), fits a logistic model with
//! crossed server/returner random intercepts per serve type ([`glmm`]), turns
//! the fit into per-server scores ([`sqs`]), and benchmarks those scores out
//! of sample against a weighted Elo rating ([`welo`], [`eval`]).
//! [`pipeline`] wires the stages together with on-disk artifacts, and
//! [`simulate`] produces seeded synthetic data for testing all of it.

pub mod error;
pub mod eval;
pub mod features;
pub mod glmm;
pub mod ingest;
pub mod pipeline;
pub mod simulate;
pub mod sqs;
pub mod welo;

mod math;

pub use error::{Error, Result};
