use crate::pipeline::{AbTestSpec, Direction, StatTestKind};

use super::{two_proportion_test, welch_t_test, Arm, MetricAccumulator, StatResult, StatsError};

pub const DEFAULT_BATCH_SIZE: u64 = 1000;

/// Evaluates the hypothesis on the current accumulators. Too few samples and
/// an all-zero or all-one pooled proportion count as no evidence (p = 1).
pub fn evaluate_hypothesis(
    spec: &AbTestSpec,
    a: &MetricAccumulator,
    b: &MetricAccumulator,
    requests_consumed: u64,
) -> Result<StatResult, StatsError> {
    let outcome = match spec.stat_test {
        StatTestKind::WelchT => welch_t_test(a, b, spec.hypothesis.direction),
        StatTestKind::TwoProportion => two_proportion_test(a, b, spec.hypothesis.direction),
    };
    let p_value = match outcome {
        Ok(o) => o.p_value,
        Err(StatsError::InsufficientSamples { .. } | StatsError::DegeneratePooledProportion(_)) => 1.0,
        Err(e) => return Err(e),
    };
    Ok(StatResult {
        test_name: spec.name.clone(),
        p_value,
        mean_a: a.mean(),
        mean_b: b.mean(),
        n_a: a.n(),
        n_b: b.n(),
        significant: p_value <= spec.hypothesis.alpha,
        requests_consumed,
    })
}

/// Batch-boundary checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub result: StatResult,
    /// Significant, or the experiment length has been used up.
    pub done: bool,
}

/// Stop-at-significance-or-cap monitor for one A/B test.
#[derive(Debug, Clone)]
pub struct SequentialMonitor {
    spec: AbTestSpec,
    batch_size: u64,
    history: Vec<StatResult>,
    finished: bool,
}

impl SequentialMonitor {
    pub fn new(spec: &AbTestSpec, batch_size: u64) -> Result<Self, StatsError> {
        if batch_size == 0 {
            return Err(StatsError::InvalidBatchSize);
        }
        Ok(SequentialMonitor { spec: spec.clone(), batch_size, history: Vec::new(), finished: false })
    }

    pub fn batch_size(&self) -> u64 {
        self.batch_size
    }

    pub fn direction(&self) -> Direction {
        self.spec.hypothesis.direction
    }

    pub fn is_boundary(&self, requests: u64) -> bool {
        requests > 0 && requests.is_multiple_of(self.batch_size)
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Evaluates at a batch boundary. Panics if `requests` is not one, or if
    /// the monitor has already stopped.
    pub fn checkpoint(
        &mut self,
        requests: u64,
        a: &MetricAccumulator,
        b: &MetricAccumulator,
    ) -> Result<Checkpoint, StatsError> {
        assert!(self.is_boundary(requests), "{requests} is not a multiple of {}", self.batch_size);
        assert!(!self.finished, "monitor for `{}` already stopped", self.spec.name);
        let result = evaluate_hypothesis(&self.spec, a, b, requests)?;
        let done = result.significant || requests >= self.spec.exp_length;
        self.finished = done;
        self.history.push(result.clone());
        Ok(Checkpoint { result, done })
    }

    pub fn history(&self) -> &[StatResult] {
        &self.history
    }

    pub fn final_result(&self) -> Option<&StatResult> {
        if self.finished {
            self.history.last()
        } else {
            None
        }
    }
}

/// Runs the monitor over a stream of routed requests, one hypothesis-metric
/// sample each. Returns every batch result; the last one is final unless the
/// stream ran out first.
pub fn sequential_monitor<I>(spec: &AbTestSpec, samples: I, batch_size: u64) -> Result<Vec<StatResult>, StatsError>
where
    I: IntoIterator<Item = (Arm, f64)>,
{
    let mut monitor = SequentialMonitor::new(spec, batch_size)?;
    let (mut a, mut b) = (MetricAccumulator::new(), MetricAccumulator::new());
    let mut requests = 0u64;
    for (arm, x) in samples {
        match arm {
            Arm::A => a.push(x)?,
            Arm::B => b.push(x)?,
        }
        requests += 1;
        if monitor.is_boundary(requests) && monitor.checkpoint(requests, &a, &b)?.done {
            break;
        }
    }
    Ok(monitor.history)
}
