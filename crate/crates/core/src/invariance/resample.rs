use rand::seq::index;
use rayon::prelude::*;
use serde::Serialize;

use super::{check_pair, smape_term, PooledVector};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::stats::{percentile_sorted, sort_floats};

/// Corpus-mean sMAPE term of every feature in the pooled vectors' subset.
///
/// Because sMAPE is a mean of per-feature terms, the corpus-mean sMAPE of
/// any sub-subset is the mean of these terms over it.
pub fn feature_smape_terms<T: Scalar>(
    nl: &[PooledVector<T>],
    nf: &[PooledVector<T>],
) -> Result<Vec<f64>> {
    if nl.is_empty() {
        return Err(Error::Empty("pooled cases"));
    }
    if nl.len() != nf.len() {
        return Err(Error::shape("NL and NF case counts differ"));
    }
    let width = nl[0].ids.len();
    let mut acc = vec![0.0f64; width];
    for (a, b) in nl.iter().zip(nf) {
        check_pair(a, b)?;
        if a.ids != nl[0].ids {
            return Err(Error::invariant("cases pooled over different subsets"));
        }
        for (slot, (&x, &y)) in acc.iter_mut().zip(a.values.iter().zip(&b.values)) {
            *slot += smape_term(x, y).to_f64_lossy();
        }
    }
    let n = nl.len() as f64;
    Ok(acc.into_iter().map(|s| s / n).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PermutationResult {
    /// Fraction of draws with mean sMAPE at or below the medical mean.
    pub p: f64,
    pub qualifying: usize,
    /// Draws evaluated (all subsets when `exhaustive`).
    pub draws: usize,
    pub exhaustive: bool,
    pub seed: u64,
    /// 5th and 95th percentile of the draw means.
    pub band: (f64, f64),
    pub medical_mean: f64,
}

impl PermutationResult {
    /// True when no draw qualified, so `p` is only bounded by `1/draws`.
    pub fn below_resolution(&self) -> bool {
        self.qualifying == 0
    }

    /// `p` as reported, `<1/draws` when below resolution.
    pub fn display(&self) -> String {
        if self.below_resolution() {
            format!("<{}", 1.0 / self.draws as f64)
        } else {
            format!("{:.3}", self.p)
        }
    }
}

fn binomial_capped(n: usize, k: usize, cap: usize) -> Option<usize> {
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * (n - i) as u128 / (i + 1) as u128;
        if c > cap as u128 {
            return None;
        }
    }
    Some(c as usize)
}

fn all_subset_means(terms: &[f64], k: usize) -> Vec<f64> {
    let n = terms.len();
    let mut idx: Vec<usize> = (0..k).collect();
    let mut out = Vec::new();
    loop {
        out.push(idx.iter().map(|&i| terms[i]).sum::<f64>() / k as f64);
        let Some(pos) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            return out;
        };
        idx[pos] += 1;
        for j in pos + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// One-sided resampling test of the medical subset against random subsets
/// of `draw_size` features drawn without replacement from the pool.
///
/// When the pool admits no more distinct subsets than `draws`, every subset
/// is enumerated instead and `p` is exact.
pub fn resample_permutation_p(
    medical_mean: f64,
    pool_terms: &[f64],
    draw_size: usize,
    draws: usize,
    seed: u64,
) -> Result<PermutationResult> {
    if draw_size == 0 || draws == 0 {
        return Err(Error::invariant("draw size and draw count must be positive"));
    }
    if pool_terms.len() < draw_size {
        return Err(Error::Insufficient(format!(
            "pool of {} features is smaller than the draw size {draw_size}",
            pool_terms.len()
        )));
    }
    if !medical_mean.is_finite() || pool_terms.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("resample inputs"));
    }
    let exhaustive = binomial_capped(pool_terms.len(), draw_size, draws);
    let mut means = match exhaustive {
        Some(_) => all_subset_means(pool_terms, draw_size),
        None => (0..draws)
            .into_par_iter()
            .map(|i| {
                let mut r = rng::stream(seed, "resample", i as u64);
                index::sample(&mut r, pool_terms.len(), draw_size)
                    .iter()
                    .map(|j| pool_terms[j])
                    .sum::<f64>()
                    / draw_size as f64
            })
            .collect(),
    };
    let qualifying = means.iter().filter(|&&m| m <= medical_mean).count();
    let total = means.len();
    sort_floats(&mut means);
    let band = (
        percentile_sorted(&means, 5.0).expect("non-empty"),
        percentile_sorted(&means, 95.0).expect("non-empty"),
    );
    Ok(PermutationResult {
        p: qualifying as f64 / total as f64,
        qualifying,
        draws: total,
        exhaustive: exhaustive.is_some(),
        seed,
        band,
        medical_mean,
    })
}
