use crate::pipeline::Direction;

use super::special::{normal_sf, student_t_sf};
use super::{MetricAccumulator, StatsError};

/// Test statistic, its degrees of freedom (infinite for z) and the p-value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestOutcome {
    pub statistic: f64,
    pub df: f64,
    pub p_value: f64,
}

/// p-value for a statistic whose upper tail is `sf`.
fn tail_p(stat: f64, direction: Direction, sf: impl Fn(f64) -> f64) -> f64 {
    let p = match direction {
        Direction::BGreater => sf(stat),
        Direction::BLess => sf(-stat),
        Direction::BNotEqual => 2.0 * sf(stat.abs()),
    };
    p.clamp(0.0, 1.0)
}

/// p-value when the statistic is infinite or undefined because both samples
/// are constant.
fn degenerate_p(mean_a: f64, mean_b: f64, direction: Direction) -> f64 {
    let favoured = match direction {
        Direction::BGreater => mean_b > mean_a,
        Direction::BLess => mean_b < mean_a,
        Direction::BNotEqual => mean_b != mean_a,
    };
    if favoured {
        0.0
    } else {
        1.0
    }
}

/// Welch's unequal-variance t-test of B against A.
pub fn welch_t_test(
    a: &MetricAccumulator,
    b: &MetricAccumulator,
    direction: Direction,
) -> Result<TestOutcome, StatsError> {
    let (Some(va), Some(vb)) = (a.variance(), b.variance()) else {
        return Err(StatsError::InsufficientSamples { n_a: a.n(), n_b: b.n() });
    };
    let (na, nb) = (a.n() as f64, b.n() as f64);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if se2 == 0.0 {
        let p_value = degenerate_p(a.mean(), b.mean(), direction);
        let statistic = if a.mean() == b.mean() { 0.0 } else { (b.mean() - a.mean()).signum() * f64::INFINITY };
        return Ok(TestOutcome { statistic, df: na + nb - 2.0, p_value });
    }
    let t = (b.mean() - a.mean()) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    Ok(TestOutcome { statistic: t, df, p_value: tail_p(t, direction, |x| student_t_sf(x, df)) })
}

/// Whether the accumulator could have been fed only zeros and ones.
fn looks_binary(acc: &MetricAccumulator) -> bool {
    let n = acc.n() as f64;
    let ones = acc.mean() * n;
    let tol = 1e-6 * n.max(1.0);
    (ones - ones.round()).abs() <= tol
        && (0.0..=n).contains(&ones.round())
        && (acc.m2() - ones * (1.0 - acc.mean())).abs() <= tol
}

/// Pooled two-proportion z-test of B against A on 0/1 samples.
pub fn two_proportion_test(
    a: &MetricAccumulator,
    b: &MetricAccumulator,
    direction: Direction,
) -> Result<TestOutcome, StatsError> {
    if a.n() == 0 || b.n() == 0 {
        return Err(StatsError::InsufficientSamples { n_a: a.n(), n_b: b.n() });
    }
    if !looks_binary(a) || !looks_binary(b) {
        return Err(StatsError::NonBinarySamples);
    }
    let (na, nb) = (a.n() as f64, b.n() as f64);
    let pooled = (a.mean() * na + b.mean() * nb) / (na + nb);
    if pooled <= 0.0 || pooled >= 1.0 {
        return Err(StatsError::DegeneratePooledProportion(pooled));
    }
    let se = (pooled * (1.0 - pooled) * (1.0 / na + 1.0 / nb)).sqrt();
    let z = (b.mean() - a.mean()) / se;
    Ok(TestOutcome { statistic: z, df: f64::INFINITY, p_value: tail_p(z, direction, normal_sf) })
}
