use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};

/// Exact McNemar test outcome on discordant pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McnemarResult {
    /// Pairs where only the first condition is correct.
    pub b: usize,
    /// Pairs where only the second condition is correct.
    pub c: usize,
    pub p: f64,
}

/// Two-sided exact binomial test on discordant counts `(b, c)`.
///
/// `p = min(1, 2 * sum_{i <= min(b,c)} C(n,i) / 2^n)` with `n = b + c`;
/// `n = 0` gives `p = 1`.
pub fn mcnemar_exact(b: usize, c: usize) -> f64 {
    let n = b + c;
    if n == 0 {
        return 1.0;
    }
    let k = b.min(c);
    // log-space so large n neither overflows C(n,i) nor underflows 2^-n
    let ln2n = n as f64 * std::f64::consts::LN_2;
    let mut ln_c = 0.0f64;
    let mut tail = 0.0f64;
    for i in 0..=k {
        if i > 0 {
            ln_c += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        tail += (ln_c - ln2n).exp();
    }
    (2.0 * tail).min(1.0)
}

/// McNemar test on paired per-case correctness.
pub fn paired_mcnemar(first: &[bool], second: &[bool]) -> Result<McnemarResult> {
    if first.len() != second.len() {
        return Err(Error::shape(format!(
            "paired correctness lengths differ: {} vs {}",
            first.len(),
            second.len()
        )));
    }
    let b = first.iter().zip(second).filter(|(&x, &y)| x && !y).count();
    let c = first.iter().zip(second).filter(|(&x, &y)| !x && y).count();
    Ok(McnemarResult {
        b,
        c,
        p: mcnemar_exact(b, c),
    })
}

/// Cohen's kappa with empirical marginals over `space`.
///
/// Returns `Ok(None)` when chance agreement is 1 (a single label used by
/// both raters), where kappa is undefined.
pub fn cohen_kappa<L: Ord + Clone + std::fmt::Debug>(
    a: &[L],
    b: &[L],
    space: &[L],
) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "label lists differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Empty("label lists"));
    }
    let mut index = BTreeMap::new();
    for (i, l) in space.iter().enumerate() {
        index.insert(l.clone(), i);
    }
    let lookup = |l: &L| {
        index
            .get(l)
            .copied()
            .ok_or_else(|| Error::invariant(format!("label {l:?} outside the label space")))
    };
    let k = index.len();
    let mut ma = vec![0usize; k];
    let mut mb = vec![0usize; k];
    let mut agree = 0usize;
    for (x, y) in a.iter().zip(b) {
        let (i, j) = (lookup(x)?, lookup(y)?);
        ma[i] += 1;
        mb[j] += 1;
        agree += usize::from(i == j);
    }
    let n = a.len() as f64;
    let p_o = agree as f64 / n;
    let p_e: f64 = ma
        .iter()
        .zip(&mb)
        .map(|(&x, &y)| (x as f64 / n) * (y as f64 / n))
        .sum();
    if (1.0 - p_e).abs() < 1e-12 {
        return Ok(None);
    }
    Ok(Some((p_o - p_e) / (1.0 - p_e)))
}
