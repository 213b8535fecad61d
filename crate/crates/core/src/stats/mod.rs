//! Metric accumulation and sequential hypothesis evaluation.

mod accumulator;
mod hypothesis;
mod monitor;
pub mod special;

use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use accumulator::MetricAccumulator;
pub use hypothesis::{two_proportion_test, welch_t_test, TestOutcome};
pub use monitor::{evaluate_hypothesis, sequential_monitor, Checkpoint, SequentialMonitor, DEFAULT_BATCH_SIZE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("non-finite sample {0}")]
    NonFiniteSample(f64),
    #[error("insufficient samples (n_a = {n_a}, n_b = {n_b})")]
    InsufficientSamples { n_a: u64, n_b: u64 },
    #[error("two-proportion test needs 0/1 samples")]
    NonBinarySamples,
    #[error("pooled proportion {0} leaves no variance")]
    DegeneratePooledProportion(f64),
    #[error("batch size must be at least 1")]
    InvalidBatchSize,
}

/// Variant of an A/B test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    A,
    B,
}

/// One evaluation of a test's hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatResult {
    pub test_name: String,
    pub p_value: f64,
    pub mean_a: f64,
    pub mean_b: f64,
    pub n_a: u64,
    pub n_b: u64,
    pub significant: bool,
    /// Requests routed to the test so far.
    pub requests_consumed: u64,
}

impl StatResult {
    pub fn effect(&self) -> f64 {
        self.mean_b - self.mean_a
    }
}

pub const PVALUE_CSV_HEADER: [&str; 7] = ["requests", "p_value", "mean_a", "mean_b", "n_a", "n_b", "significant"];

/// Writes a p-value trace, one row per batch.
pub fn write_pvalue_csv<W: io::Write>(w: W, results: &[StatResult]) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(PVALUE_CSV_HEADER)?;
    for r in results {
        out.write_record([
            r.requests_consumed.to_string(),
            r.p_value.to_string(),
            r.mean_a.to_string(),
            r.mean_b.to_string(),
            r.n_a.to_string(),
            r.n_b.to_string(),
            r.significant.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
