//! Statistical helpers: means, Student-t confidence intervals, nearest-rank
//! percentiles, and latency summaries.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::model::Ms;

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    var.sqrt()
}

/// Two-sided Student-t quantile, e.g. `t_quantile(0.975, 1.0) = 12.706...`.
pub fn t_quantile(p: f64, degrees_of_freedom: f64) -> f64 {
    StudentsT::new(0.0, 1.0, degrees_of_freedom)
        .expect("valid t distribution")
        .inverse_cdf(p)
}

/// A mean with an optional 95% confidence half-width (absent for n = 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CiEstimate {
    pub n: usize,
    pub mean: f64,
    pub ci95_half_width: Option<f64>,
}

/// Mean and two-sided 95% CI of repeated measurements, using the
/// t-distribution with n - 1 degrees of freedom.
pub fn aggregate_mean_ci(values: &[f64]) -> CiEstimate {
    let n = values.len();
    let m = mean(values);
    let half = if n >= 2 {
        let t = t_quantile(0.975, (n - 1) as f64);
        Some(t * sample_std(values) / (n as f64).sqrt())
    } else {
        None
    };
    CiEstimate {
        n,
        mean: m,
        ci95_half_width: half,
    }
}

/// Nearest-rank percentile over a sorted sample: the value at rank
/// `ceil(p/100 * n)` (1-based).
pub fn percentile_nearest_rank(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Distribution summary of confirmed-transaction latencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: u64,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub histogram_bin_ms: u64,
    /// Fixed-width bins from zero; bin i counts latencies in
    /// `[i*bin, (i+1)*bin)`.
    pub histogram: Vec<u64>,
}

impl LatencyStats {
    pub fn empty(bin_ms: u64) -> Self {
        LatencyStats {
            count: 0,
            mean_ms: 0.0,
            median_ms: 0.0,
            p95_ms: 0.0,
            p99_ms: 0.0,
            min_ms: 0.0,
            max_ms: 0.0,
            histogram_bin_ms: bin_ms,
            histogram: Vec::new(),
        }
    }

    pub fn from_latencies(latencies_ms: &[Ms], bin_ms: u64) -> Self {
        if latencies_ms.is_empty() {
            return Self::empty(bin_ms);
        }
        let mut sorted: Vec<f64> = latencies_ms.iter().map(|&v| v as f64).collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("latencies are finite"));
        let bin = bin_ms.max(1);
        let max = *sorted.last().expect("non-empty");
        let n_bins = (max as u64 / bin + 1) as usize;
        let mut histogram = vec![0u64; n_bins];
        for v in &sorted {
            histogram[(*v as u64 / bin) as usize] += 1;
        }
        LatencyStats {
            count: sorted.len() as u64,
            mean_ms: mean(&sorted),
            median_ms: percentile_nearest_rank(&sorted, 50.0),
            p95_ms: percentile_nearest_rank(&sorted, 95.0),
            p99_ms: percentile_nearest_rank(&sorted, 99.0),
            min_ms: sorted[0],
            max_ms: max,
            histogram_bin_ms: bin,
            histogram,
        }
    }

    /// The ordering invariant min <= median <= p95 <= p99 <= max.
    pub fn is_ordered(&self) -> bool {
        self.min_ms <= self.median_ms
            && self.median_ms <= self.p95_ms
            && self.p95_ms <= self.p99_ms
            && self.p99_ms <= self.max_ms
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fixture_10_12_reproduces_textbook_interval() {
        // Hand computation: mean 11, s = sqrt(2), half-width
        // t(0.975, df=1) * s / sqrt(2) = 12.7062.
        let est = aggregate_mean_ci(&[10.0, 12.0]);
        assert_eq!(est.mean, 11.0);
        let half = est.ci95_half_width.unwrap();
        assert!((half - 12.7062).abs() < 5e-4, "half = {half}");
    }

    #[test]
    fn identical_values_have_zero_width() {
        let est = aggregate_mean_ci(&[7.0, 7.0, 7.0, 7.0, 7.0]);
        assert_eq!(est.mean, 7.0);
        assert_eq!(est.ci95_half_width, Some(0.0));
    }

    #[test]
    fn single_run_has_no_interval() {
        let est = aggregate_mean_ci(&[42.0]);
        assert_eq!(est.mean, 42.0);
        assert_eq!(est.ci95_half_width, None);
    }

    #[test]
    fn t_quantiles_match_tables() {
        assert!((t_quantile(0.975, 1.0) - 12.7062).abs() < 5e-4);
        assert!((t_quantile(0.975, 4.0) - 2.7764).abs() < 5e-4);
        assert!((t_quantile(0.975, 30.0) - 2.0423).abs() < 5e-4);
    }

    #[test]
    fn nearest_rank_percentiles_match_brute_force() {
        // Brute-force oracle: smallest value with rank >= ceil(p*n/100).
        let sorted: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        for p in [1.0, 25.0, 50.0, 95.0, 99.0, 100.0] {
            let want = sorted[((p / 100.0 * 100.0_f64).ceil() as usize).max(1) - 1];
            assert_eq!(percentile_nearest_rank(&sorted, p), want);
        }
        assert_eq!(percentile_nearest_rank(&[5.0], 99.0), 5.0);
    }

    #[test]
    fn latency_stats_summarize_and_bin() {
        let stats = LatencyStats::from_latencies(&[100, 200, 300, 400, 450], 100);
        assert_eq!(stats.count, 5);
        assert_eq!(stats.median_ms, 300.0);
        assert_eq!(stats.min_ms, 100.0);
        assert_eq!(stats.max_ms, 450.0);
        // Bins: [100..200)=1, [200..300)=1, [300..400)=1, [400..500)=2.
        assert_eq!(stats.histogram, vec![0, 1, 1, 1, 2]);
        assert!(stats.is_ordered());
        assert_eq!(stats.histogram.iter().sum::<u64>(), stats.count);
    }

    proptest! {
        #[test]
        fn percentile_ordering_invariant(latencies in proptest::collection::vec(0i64..100_000, 1..300)) {
            let stats = LatencyStats::from_latencies(&latencies, 100);
            prop_assert!(stats.is_ordered());
            prop_assert_eq!(stats.histogram.iter().sum::<u64>(), stats.count);
            prop_assert!(stats.min_ms <= stats.mean_ms && stats.mean_ms <= stats.max_ms);
        }
    }
}
