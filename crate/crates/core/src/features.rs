//! Contrastive medical-feature identification and random control pools.
//!
//! Features are scored on per-prompt peak activation (max over the prompt's
//! content range): the mean peak over medical prompts minus the mean peak over
//! non-medical prompts. A feature "fires" on a prompt when its peak exceeds the
//! firing threshold (1.0 raw activation by default).

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actstore::ActivationDump;
use crate::error::{Error, Result};
use crate::rng;
use crate::sae::{encode_dump, SaeParams};
use crate::scalar::Scalar;

pub const DEFAULT_FIRING_THRESHOLD: f64 = 1.0;
pub const DEFAULT_K: usize = 3;
pub const DEFAULT_MED_RATE_MIN: f64 = 0.70;
pub const DEFAULT_NON_RATE_MAX: f64 = 0.10;
pub const DEFAULT_RESTRICTED_FRACTION: f64 = 0.25;
pub const DEFAULT_RANDOM_FEATURES: usize = 30;
pub const K_SWEEP: [usize; 4] = [3, 5, 10, 20];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastScore {
    pub feature: u32,
    pub score: f64,
    pub med_fire_rate: f64,
    pub non_fire_rate: f64,
}

/// Dense per-feature peak activation of each prompt, over its content range.
pub fn prompt_peaks<T: Scalar>(dumps: &[ActivationDump], sae: &SaeParams<T>) -> Result<Vec<Vec<T>>> {
    check_homogeneous(dumps)?;
    dumps
        .par_iter()
        .map(|d| Ok(encode_dump(d, sae)?.peaks(&d.content_range)))
        .collect()
}

fn check_homogeneous<'a>(dumps: impl IntoIterator<Item = &'a ActivationDump>) -> Result<()> {
    let mut iter = dumps.into_iter();
    let Some(first) = iter.next() else {
        return Ok(());
    };
    for d in iter {
        if d.layer != first.layer || d.model_id != first.model_id {
            return Err(Error::invariant(format!(
                "prompt {} is ({}, L{}), expected ({}, L{})",
                d.case_id, d.model_id, d.layer, first.model_id, first.layer
            )));
        }
        if d.content_convention != first.content_convention {
            return Err(Error::invariant(format!(
                "prompt {} uses content convention {:?}, expected {:?}",
                d.case_id, d.content_convention, first.content_convention
            )));
        }
    }
    Ok(())
}

/// Encodes both prompt sets and scores every feature.
pub fn contrast_scores<T: Scalar>(
    med_dumps: &[ActivationDump],
    non_dumps: &[ActivationDump],
    sae: &SaeParams<T>,
    threshold: f64,
) -> Result<Vec<ContrastScore>> {
    if med_dumps.is_empty() || non_dumps.is_empty() {
        return Err(Error::Empty("contrastive prompt set"));
    }
    check_homogeneous(med_dumps.iter().chain(non_dumps))?;
    let med = prompt_peaks(med_dumps, sae)?;
    let non = prompt_peaks(non_dumps, sae)?;
    contrast_scores_from_peaks(&med, &non, threshold)
}

/// Scores from precomputed per-prompt peaks (`prompts x d_sae`).
pub fn contrast_scores_from_peaks<T: Scalar>(
    med: &[Vec<T>],
    non: &[Vec<T>],
    threshold: f64,
) -> Result<Vec<ContrastScore>> {
    if med.is_empty() || non.is_empty() {
        return Err(Error::Empty("contrastive prompt set"));
    }
    let f = med[0].len();
    if med.iter().chain(non).any(|p| p.len() != f) {
        return Err(Error::shape("prompt peak vectors differ in length"));
    }
    let stats = |set: &[Vec<T>], feat: usize| -> (f64, f64) {
        let mut sum = 0.0;
        let mut fired = 0usize;
        for p in set {
            let v = p[feat].to_f64_lossy();
            sum += v;
            if v > threshold {
                fired += 1;
            }
        }
        let n = set.len() as f64;
        (sum / n, fired as f64 / n)
    };
    Ok((0..f)
        .map(|feat| {
            let (m_med, r_med) = stats(med, feat);
            let (m_non, r_non) = stats(non, feat);
            ContrastScore {
                feature: feat as u32,
                score: m_med - m_non,
                med_fire_rate: r_med,
                non_fire_rate: r_non,
            }
        })
        .collect())
}

/// Result of the selectivity filter plus top-K cut.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedicalSelection {
    pub k_requested: usize,
    /// Ordered by descending score, ties toward lower id.
    pub ids: Vec<u32>,
    pub scores: Vec<ContrastScore>,
    pub truncated: bool,
}

pub fn select_medical(
    scores: &[ContrastScore],
    k: usize,
    med_rate_min: f64,
    non_rate_max: f64,
) -> MedicalSelection {
    let mut passing: Vec<&ContrastScore> = scores
        .iter()
        .filter(|s| s.med_fire_rate >= med_rate_min && s.non_fire_rate <= non_rate_max)
        .collect();
    passing.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.feature.cmp(&b.feature)));
    let truncated = passing.len() < k;
    passing.truncate(k);
    MedicalSelection {
        k_requested: k,
        ids: passing.iter().map(|s| s.feature).collect(),
        scores: passing.into_iter().cloned().collect(),
        truncated,
    }
}

/// Selections at each K of the sensitivity sweep.
pub fn k_sweep(
    scores: &[ContrastScore],
    ks: &[usize],
    med_rate_min: f64,
    non_rate_max: f64,
) -> Vec<MedicalSelection> {
    ks.iter()
        .map(|&k| select_medical(scores, k, med_rate_min, non_rate_max))
        .collect()
}

/// Per-feature corpus mean of per-prompt peaks.
pub fn mean_peaks<T: Scalar>(peaks: &[Vec<T>]) -> Result<Vec<f64>> {
    let first = peaks.first().ok_or(Error::Empty("prompt peaks"))?;
    let n = peaks.len() as f64;
    let mut out = vec![0.0; first.len()];
    for p in peaks {
        if p.len() != out.len() {
            return Err(Error::shape("prompt peak vectors differ in length"));
        }
        for (o, v) in out.iter_mut().zip(p) {
            *o += v.to_f64_lossy();
        }
    }
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// Inclusive magnitude band `[0.5 * min, 2.0 * max]` of the medical means.
pub fn magnitude_band(medical: &[u32], means: &[f64]) -> Result<(f64, f64)> {
    if medical.is_empty() {
        return Err(Error::Empty("medical selection"));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &f in medical {
        let m = *means
            .get(f as usize)
            .ok_or_else(|| Error::shape(format!("feature {f} outside mean table")))?;
        lo = lo.min(m);
        hi = hi.max(m);
    }
    Ok((0.5 * lo, 2.0 * hi))
}

/// Non-medical features whose corpus-mean activation lies in the band.
pub fn magnitude_matched_pool(medical: &[u32], means: &[f64]) -> Result<Vec<u32>> {
    let (lo, hi) = magnitude_band(medical, means)?;
    let pool: Vec<u32> = (0..means.len() as u32)
        .filter(|f| !medical.contains(f))
        .filter(|&f| {
            let m = means[f as usize];
            lo <= m && m <= hi
        })
        .collect();
    if pool.is_empty() {
        return Err(Error::Empty("magnitude-matched pool"));
    }
    Ok(pool)
}

/// Pool members whose peak exceeds `threshold` on at least `fraction` of the
/// prompts in `peaks`.
pub fn restricted_pool<T: Scalar>(
    pool: &[u32],
    peaks: &[Vec<T>],
    fraction: f64,
    threshold: f64,
) -> Result<Vec<u32>> {
    if pool.is_empty() {
        return Err(Error::Empty("feature pool"));
    }
    if peaks.is_empty() {
        return Err(Error::Empty("prompt peaks"));
    }
    let need = fraction * peaks.len() as f64;
    Ok(pool
        .iter()
        .copied()
        .filter(|&f| {
            let fired = peaks
                .iter()
                .filter(|p| p[f as usize].to_f64_lossy() > threshold)
                .count();
            // 1e-9 absorbs representation error in `fraction * n`
            fired as f64 >= need - 1e-9
        })
        .collect())
}

/// Uniform sample of `n` ids without replacement, sorted, reproducible by seed.
pub fn sample_random_features(pool: &[u32], n: usize, seed: u64) -> Result<Vec<u32>> {
    if pool.len() < n {
        return Err(Error::Insufficient(format!(
            "pool of {} features cannot supply {n}",
            pool.len()
        )));
    }
    let mut rng = rng::stream(seed, "random-features", 0);
    let mut out: Vec<u32> = index::sample(&mut rng, pool.len(), n)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    out.sort_unstable();
    Ok(out)
}

/// Audit record of a full feature selection for one (model, layer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSelection {
    pub model_id: String,
    pub layer: u32,
    pub k: usize,
    pub medical: Vec<u32>,
    pub medical_scores: Vec<ContrastScore>,
    pub band: (f64, f64),
    pub random_pool: Vec<u32>,
    pub restricted_pool: Vec<u32>,
    /// The fixed-seed random control drawn from `random_pool`.
    pub random_sample: Vec<u32>,
    pub seed: u64,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl FeatureSelection {
    pub fn validate(&self) -> Result<()> {
        for pool in [&self.random_pool, &self.restricted_pool, &self.random_sample] {
            if let Some(f) = pool.iter().find(|f| self.medical.contains(f)) {
                return Err(Error::invariant(format!(
                    "medical feature {f} appears in a random pool"
                )));
            }
        }
        Ok(())
    }
}

/// Knobs of [`identify_features`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionParams {
    pub k: usize,
    pub threshold: f64,
    pub med_rate_min: f64,
    pub non_rate_max: f64,
    /// Firing fraction for the restricted pool.
    pub restricted_fraction: f64,
    pub n_random: usize,
    pub seed: u64,
}

impl Default for SelectionParams {
    fn default() -> Self {
        SelectionParams {
            k: DEFAULT_K,
            threshold: DEFAULT_FIRING_THRESHOLD,
            med_rate_min: DEFAULT_MED_RATE_MIN,
            non_rate_max: DEFAULT_NON_RATE_MAX,
            restricted_fraction: DEFAULT_RESTRICTED_FRACTION,
            n_random: DEFAULT_RANDOM_FEATURES,
            seed: 0,
        }
    }
}

/// Full selection: contrastive medical features, the magnitude-matched pool
/// over the peaks of `corpus` (the NL and NF prompts), its restricted subset
/// and the fixed-seed random control.
///
/// A short medical selection or a pool smaller than `n_random` is kept and
/// noted in `warnings`; an empty medical selection or empty band is an error.
pub fn identify_features<T: Scalar>(
    med_dumps: &[ActivationDump],
    non_dumps: &[ActivationDump],
    corpus: &[ActivationDump],
    sae: &SaeParams<T>,
    params: &SelectionParams,
) -> Result<FeatureSelection> {
    let first = corpus.first().ok_or(Error::Empty("analysis corpus"))?;
    check_homogeneous(med_dumps.iter().chain(non_dumps).chain(corpus))?;
    let scores = contrast_scores(med_dumps, non_dumps, sae, params.threshold)?;
    let picked = select_medical(&scores, params.k, params.med_rate_min, params.non_rate_max);
    if picked.ids.is_empty() {
        return Err(Error::Insufficient("no feature passes the selectivity filter".into()));
    }
    let mut warnings = Vec::new();
    if picked.truncated {
        warnings.push(format!(
            "only {} of {} requested medical features pass the selectivity filter",
            picked.ids.len(),
            params.k
        ));
    }
    let peaks = prompt_peaks(corpus, sae)?;
    let means = mean_peaks(&peaks)?;
    let band = magnitude_band(&picked.ids, &means)?;
    let random_pool = magnitude_matched_pool(&picked.ids, &means)?;
    let restricted = restricted_pool(&random_pool, &peaks, params.restricted_fraction, params.threshold)?;
    if restricted.is_empty() {
        warnings.push("restricted pool is empty".into());
    }
    let n = params.n_random.min(random_pool.len());
    if n < params.n_random {
        warnings.push(format!(
            "random pool has {} features, fewer than the {} requested",
            random_pool.len(),
            params.n_random
        ));
    }
    let random_sample = sample_random_features(&random_pool, n, params.seed)?;
    let sel = FeatureSelection {
        model_id: first.model_id.clone(),
        layer: first.layer,
        k: params.k,
        medical: picked.ids,
        medical_scores: picked.scores,
        band,
        random_pool,
        restricted_pool: restricted,
        random_sample,
        seed: params.seed,
        warnings,
    };
    sel.validate()?;
    Ok(sel)
}
