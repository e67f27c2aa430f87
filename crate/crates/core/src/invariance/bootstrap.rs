use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::stats::{percentile_sorted, sort_floats};

pub const DEFAULT_RESAMPLES: usize = 2000;

/// Point estimate with a percentile interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CiRecord {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    /// Resample count.
    pub b: usize,
    pub seed: u64,
    /// Cases entering the estimate.
    pub n: usize,
    /// Cases with a defined cosine, when the record belongs to a cosine column.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_cos: Option<usize>,
}

impl CiRecord {
    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }

    pub fn excludes_zero(&self) -> bool {
        !self.contains(0.0)
    }

    pub fn with_n_cos(mut self, n_cos: usize) -> Self {
        self.n_cos = Some(n_cos);
        self
    }
}

fn check(values: &[f64], what: &'static str) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Empty(what));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what));
    }
    Ok(())
}

/// Runs `b` resamples of `n` clusters, drawing indices from the stream
/// `(seed, tag, i)` for resample `i`, and returns the sorted statistics.
fn resample_stats<F>(n: usize, b: usize, seed: u64, tag: &str, stat: F) -> Vec<f64>
where
    F: Fn(&[usize]) -> f64 + Sync,
{
    let mut out: Vec<f64> = (0..b)
        .into_par_iter()
        .map_init(
            || vec![0usize; n],
            |idx, i| {
                let mut r = rng::stream(seed, tag, i as u64);
                for slot in idx.iter_mut() {
                    *slot = r.random_range(0..n);
                }
                stat(idx)
            },
        )
        .collect();
    sort_floats(&mut out);
    out
}

/// Mean as an offset from the first value, exact for constant input.
fn shifted_mean(values: impl Iterator<Item = f64> + Clone, n: usize) -> f64 {
    let Some(first) = values.clone().next() else {
        return f64::NAN;
    };
    first + values.map(|v| v - first).sum::<f64>() / n as f64
}

fn interval(point: f64, sorted: &[f64], lo_q: f64, hi_q: f64) -> (f64, f64) {
    let lo = percentile_sorted(sorted, lo_q).unwrap_or(point);
    let hi = percentile_sorted(sorted, hi_q).unwrap_or(point);
    // rounding in the resample means can leave the point a hair outside
    (lo.min(point), hi.max(point))
}

/// Case-resampling percentile bootstrap of the mean, 95% interval.
pub fn bootstrap_ci(values: &[f64], b: usize, seed: u64) -> Result<CiRecord> {
    bootstrap_ci_with(values, b, seed, 2.5, 97.5)
}

/// Percentile bootstrap of the mean with interval percentiles `lo_q`/`hi_q`.
pub fn bootstrap_ci_with(
    values: &[f64],
    b: usize,
    seed: u64,
    lo_q: f64,
    hi_q: f64,
) -> Result<CiRecord> {
    check(values, "bootstrap values")?;
    if b == 0 {
        return Err(Error::invariant("bootstrap needs at least one resample"));
    }
    let n = values.len();
    let point = shifted_mean(values.iter().copied(), n);
    let sorted = resample_stats(n, b, seed, "bootstrap", |idx| {
        shifted_mean(idx.iter().map(|&i| values[i]), n)
    });
    let (lower, upper) = interval(point, &sorted, lo_q, hi_q);
    Ok(CiRecord {
        point,
        lower,
        upper,
        b,
        seed,
        n,
        n_cos: None,
    })
}

/// Cluster bootstrap of a pooled ratio `sum(hits) / sum(totals)`, resampling
/// clusters (cases) with replacement.
pub fn cluster_bootstrap_ratio(
    hits: &[f64],
    totals: &[f64],
    b: usize,
    seed: u64,
) -> Result<CiRecord> {
    check(hits, "cluster hits")?;
    check(totals, "cluster totals")?;
    if hits.len() != totals.len() {
        return Err(Error::shape("cluster hits and totals differ in length"));
    }
    if totals.iter().any(|&t| t <= 0.0) {
        return Err(Error::invariant("cluster totals must be positive"));
    }
    if b == 0 {
        return Err(Error::invariant("bootstrap needs at least one resample"));
    }
    let n = hits.len();
    let point = hits.iter().sum::<f64>() / totals.iter().sum::<f64>();
    let sorted = resample_stats(n, b, seed, "cluster_bootstrap", |idx| {
        let h: f64 = idx.iter().map(|&i| hits[i]).sum();
        let t: f64 = idx.iter().map(|&i| totals[i]).sum();
        h / t
    });
    let (lower, upper) = interval(point, &sorted, 2.5, 97.5);
    Ok(CiRecord {
        point,
        lower,
        upper,
        b,
        seed,
        n,
        n_cos: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_values_zero_width() {
        for seed in [0, 1, 99] {
            let ci = bootstrap_ci(&[0.7; 12], 500, seed).unwrap();
            assert_eq!((ci.lower, ci.point, ci.upper), (0.7, 0.7, 0.7));
        }
    }

    #[test]
    fn single_case_collapses() {
        let ci = bootstrap_ci(&[-1.25], 100, 3).unwrap();
        assert_eq!((ci.lower, ci.upper), (-1.25, -1.25));
    }

    #[test]
    fn deterministic_and_ordered() {
        let v: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = bootstrap_ci(&v, 400, 11).unwrap();
        let b = bootstrap_ci(&v, 400, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.lower <= a.point && a.point <= a.upper);
        assert!(a.lower < a.upper);
    }

    #[test]
    fn rejects_empty_and_nan() {
        assert!(matches!(bootstrap_ci(&[], 10, 0), Err(Error::Empty(_))));
        assert!(matches!(bootstrap_ci(&[f64::NAN], 10, 0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn cluster_ratio_point() {
        let ci = cluster_bootstrap_ratio(&[1.0, 3.0], &[4.0, 4.0], 200, 5).unwrap();
        assert_eq!(ci.point, 0.5);
        assert!(ci.lower >= 0.25 && ci.upper <= 0.75);
    }
}
