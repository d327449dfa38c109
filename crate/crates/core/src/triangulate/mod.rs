//! Regime detectors: a Gaussian hidden Markov model and k-means over
//! (risk level, local trend) features.

mod hmm;
mod kmeans;

pub use hmm::*;
pub use kmeans::*;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TriangulateError {
    #[error("{states} states need more than {} observations, got {n}", 2 * .states)]
    TooManyStates { states: usize, n: usize },
    #[error("k = {k} exceeds the {n} available points")]
    KExceedsPoints { k: usize, n: usize },
    #[error("number of states or clusters must be at least 1")]
    ZeroStates,
    #[error("signal contains a non-finite value")]
    NonFinite,
    #[error("candidate range is empty")]
    EmptyRange,
    #[error("trend weight must be non-negative and finite, got {0}")]
    InvalidWeight(f64),
    #[error("band cuts must satisfy low < high, got {low} and {high}")]
    InvalidCuts { low: f64, high: f64 },
}
