use serde::{Deserialize, Serialize};

use super::StatsError;

/// Single-pass count, mean and sum of squared deviations (Welford).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricAccumulator {
    n: u64,
    mean: f64,
    m2: f64,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds an accumulator from its moments. `m2` is clamped at zero.
    pub fn from_moments(n: u64, mean: f64, m2: f64) -> Self {
        if n == 0 {
            return Self::default();
        }
        MetricAccumulator { n, mean, m2: m2.max(0.0) }
    }

    pub fn from_samples<I: IntoIterator<Item = f64>>(samples: I) -> Result<Self, StatsError> {
        let mut acc = Self::default();
        for x in samples {
            acc.push(x)?;
        }
        Ok(acc)
    }

    pub fn push(&mut self, x: f64) -> Result<(), StatsError> {
        if !x.is_finite() {
            return Err(StatsError::NonFiniteSample(x));
        }
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
        Ok(())
    }

    /// Combination of two disjoint sample streams (Chan et al.).
    pub fn merge(&self, other: &Self) -> Self {
        if other.n == 0 {
            return *self;
        }
        if self.n == 0 {
            return *other;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        let (na, nb, nt) = (self.n as f64, other.n as f64, n as f64);
        MetricAccumulator {
            n,
            mean: self.mean + delta * nb / nt,
            m2: self.m2 + other.m2 + delta * delta * na * nb / nt,
        }
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn m2(&self) -> f64 {
        self.m2
    }

    /// Sample variance, `None` below two samples.
    pub fn variance(&self) -> Option<f64> {
        (self.n >= 2).then(|| self.m2 / (self.n - 1) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_sample() {
        let mut acc = MetricAccumulator::new();
        acc.push(5.0).unwrap();
        assert_eq!((acc.n(), acc.mean(), acc.m2()), (1, 5.0, 0.0));
        assert_eq!(acc.variance(), None);
    }

    #[test]
    fn two_pass_agreement() {
        let acc = MetricAccumulator::from_samples([0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(acc.n(), 4);
        assert_eq!(acc.mean(), 0.5);
        assert!((acc.variance().unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn merge_small_case() {
        let a = MetricAccumulator::from_samples([0.0, 1.0]).unwrap();
        let b = MetricAccumulator::from_samples([1.0, 0.0]).unwrap();
        let all = MetricAccumulator::from_samples([0.0, 1.0, 1.0, 0.0]).unwrap();
        let m = a.merge(&b);
        assert_eq!(m.n(), all.n());
        assert!((m.mean() - all.mean()).abs() < 1e-15);
        assert!((m.m2() - all.m2()).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_finite() {
        let mut acc = MetricAccumulator::new();
        assert!(acc.push(f64::NAN).is_err());
        assert!(acc.push(f64::INFINITY).is_err());
        assert_eq!(acc.n(), 0);
    }

    fn rel_close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
    }

    proptest! {
        #[test]
        fn merge_equals_concatenation(
            xs in prop::collection::vec(-1e3f64..1e3, 0..60),
            ys in prop::collection::vec(-1e3f64..1e3, 0..60),
        ) {
            let a = MetricAccumulator::from_samples(xs.iter().copied()).unwrap();
            let b = MetricAccumulator::from_samples(ys.iter().copied()).unwrap();
            let all = MetricAccumulator::from_samples(xs.iter().chain(&ys).copied()).unwrap();
            let m = a.merge(&b);
            prop_assert_eq!(m.n(), all.n());
            prop_assert!(rel_close(m.mean(), all.mean()));
            prop_assert!(rel_close(m.m2(), all.m2()));
        }

        #[test]
        fn moments_stay_sane(xs in prop::collection::vec(-1e6f64..1e6, 0..100)) {
            let acc = MetricAccumulator::from_samples(xs.iter().copied()).unwrap();
            prop_assert!(acc.m2() >= 0.0);
            if acc.n() == 0 {
                prop_assert_eq!((acc.mean(), acc.m2()), (0.0, 0.0));
            }
        }
    }
}
