//! Metric series and nearest-rank percentiles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// What a series measures. Units are part of the kind so reports cannot
/// mix seconds with milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    TtftSeconds,
    TpotMillis,
    E2eSeconds,
    TokenCount,
}

/// Ordered non-negative samples of one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct MetricSeries<T = f64> {
    kind: MetricKind,
    samples: Vec<T>,
}

impl<T: Scalar> MetricSeries<T> {
    pub fn new(kind: MetricKind) -> Self {
        Self { kind, samples: Vec::new() }
    }

    pub fn kind(&self) -> MetricKind {
        self.kind
    }

    pub fn push(&mut self, sample: T) -> Result<()> {
        if !sample.is_finite() || sample < T::zero() {
            return Err(Error::invalid(format!(
                "metric sample {sample} must be finite and >= 0"
            )));
        }
        self.samples.push(sample);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn mean(&self) -> Result<T> {
        if self.samples.is_empty() {
            return Err(Error::EmptyInput("mean of empty metric series".into()));
        }
        let sum = self.samples.iter().fold(T::zero(), |acc, &v| acc + v);
        Ok(sum / T::from_usize_lossy(self.samples.len()))
    }

    pub fn sum(&self) -> T {
        self.samples.iter().fold(T::zero(), |acc, &v| acc + v)
    }
}

/// Nearest-rank percentile: the value at index `ceil(q*n) - 1` of the
/// ascending-sorted samples. `q = 0` gives the minimum and `q = 1` the
/// maximum. No interpolation, so reported tail latencies are always
/// actual samples.
pub fn percentile<T: Scalar>(series: &MetricSeries<T>, q: f64) -> Result<T> {
    if series.samples.is_empty() {
        return Err(Error::EmptyInput("percentile of empty metric series".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid(format!("percentile fraction {q} outside [0, 1]")));
    }
    let mut sorted = series.samples.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("samples are finite"));
    let n = sorted.len();
    let rank = (q * n as f64).ceil() as isize - 1;
    let idx = rank.clamp(0, n as isize - 1) as usize;
    Ok(sorted[idx])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(samples: &[f64]) -> MetricSeries {
        let mut s = MetricSeries::new(MetricKind::TokenCount);
        for &v in samples {
            s.push(v).unwrap();
        }
        s
    }

    #[test]
    fn p99_of_one_to_hundred() {
        let s = series(&(1..=100).map(f64::from).collect::<Vec<_>>());
        assert_eq!(percentile(&s, 0.99).unwrap(), 99.0);
        assert_eq!(percentile(&s, 1.0).unwrap(), 100.0);
        assert_eq!(percentile(&s, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn singleton_is_every_percentile() {
        let s = series(&[7.0]);
        for q in [0.0, 0.25, 0.5, 0.99, 1.0] {
            assert_eq!(percentile(&s, q).unwrap(), 7.0);
        }
    }

    #[test]
    fn median_of_three_matches_exhaustive_rank_check() {
        let s = series(&[5.0, 1.0, 3.0]);
        assert_eq!(percentile(&s, 0.5).unwrap(), 3.0);

        // Exhaustive oracle: for every q on a fine grid, the nearest-rank
        // definition applied to the hand-sorted list must agree.
        let sorted = [1.0, 3.0, 5.0];
        for step in 0..=1000 {
            let q = step as f64 / 1000.0;
            let rank = ((q * 3.0).ceil() as isize - 1).clamp(0, 2) as usize;
            assert_eq!(percentile(&s, q).unwrap(), sorted[rank], "q={q}");
        }
    }

    #[test]
    fn percentile_is_monotone_in_q() {
        let s = series(&[9.0, 2.0, 4.0, 4.0, 11.0, 0.5, 3.0]);
        let mut prev = percentile(&s, 0.0).unwrap();
        for step in 1..=100 {
            let q = step as f64 / 100.0;
            let v = percentile(&s, q).unwrap();
            assert!(v >= prev, "percentile decreased at q={q}");
            prev = v;
        }
    }

    #[test]
    fn empty_series_is_an_error() {
        let s = MetricSeries::<f64>::new(MetricKind::TtftSeconds);
        assert!(matches!(percentile(&s, 0.5), Err(Error::EmptyInput(_))));
        assert!(s.mean().is_err());
    }

    #[test]
    fn rejects_negative_and_non_finite_samples() {
        let mut s = MetricSeries::new(MetricKind::TpotMillis);
        assert!(s.push(-1.0).is_err());
        assert!(s.push(f64::NAN).is_err());
        assert!(s.push(0.0).is_ok());
    }
}
