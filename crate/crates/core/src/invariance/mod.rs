//! Format-invariance statistics over SAE feature subsets.
//!
//! A case contributes one pooled activation vector per condition; sMAPE and
//! cosine compare the NL and NF vectors, and medical-minus-random differences
//! are aggregated per stratum with case-resampling bootstrap intervals.

mod bootstrap;
mod resample;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use bootstrap::{bootstrap_ci, bootstrap_ci_with, cluster_bootstrap_ratio, CiRecord, DEFAULT_RESAMPLES};
pub use resample::{feature_smape_terms, resample_permutation_p, PermutationResult};

pub use crate::behavior::{stratify, StratumLabel};

use crate::actstore::{ActivationDump, TokenSpan};
use crate::error::{Error, Result};
use crate::sae::{encode_dump, EncodedDump, SaeParams};
use crate::scalar::{dot, l2_norm, lift, Scalar};

/// Denominator floor of the per-feature sMAPE term.
pub const SMAPE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Mean,
}

/// Per-feature pooled activation of one dump over a token mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledVector<T> {
    pub ids: Vec<u32>,
    pub values: Vec<T>,
    pub mode: PoolMode,
    pub mask: TokenSpan,
}

fn check_mask(mask: &TokenSpan, token_count: usize, what: &str) -> Result<()> {
    if mask.is_empty() {
        return Err(Error::invariant(format!("empty {what} mask")));
    }
    if mask.end > token_count {
        return Err(Error::shape(format!(
            "{what} mask {}..{} exceeds {token_count} tokens",
            mask.start, mask.end
        )));
    }
    Ok(())
}

fn check_subset(subset: &[u32], d_sae: usize) -> Result<()> {
    match subset.iter().find(|&&f| f as usize >= d_sae) {
        Some(f) => Err(Error::shape(format!("feature {f} outside SAE width {d_sae}"))),
        None => Ok(()),
    }
}

/// Pools already-encoded activations over `mask`.
pub fn pool_encoded<T: Scalar>(
    enc: &EncodedDump<T>,
    subset: &[u32],
    mode: PoolMode,
    mask: TokenSpan,
) -> Result<PooledVector<T>> {
    check_mask(&mask, enc.tokens.len(), "pooling")?;
    check_subset(subset, enc.d_sae)?;
    let values = subset
        .iter()
        .map(|&f| {
            let acts = mask.iter().map(|t| enc.activation(t, f));
            match mode {
                PoolMode::Max => acts.fold(T::zero(), T::max),
                PoolMode::Mean => acts.sum::<T>() / T::from_count(mask.len()),
            }
        })
        .collect();
    Ok(PooledVector {
        ids: subset.to_vec(),
        values,
        mode,
        mask,
    })
}

/// Encodes only the tokens in `mask` and pools them.
pub fn pool<T: Scalar>(
    dump: &ActivationDump,
    sae: &SaeParams<T>,
    subset: &[u32],
    mode: PoolMode,
    mask: TokenSpan,
) -> Result<PooledVector<T>> {
    check_mask(&mask, dump.token_count, "pooling")?;
    check_subset(subset, sae.d_sae())?;
    if dump.dim != sae.d_model() {
        return Err(Error::shape(format!(
            "dump {} has dim {}, SAE expects {}",
            dump.case_id,
            dump.dim,
            sae.d_model()
        )));
    }
    let mut tokens = Vec::with_capacity(dump.token_count);
    for t in 0..dump.token_count {
        tokens.push(if mask.contains(t) {
            sae.encode(&lift::<T>(dump.row(t)))?
        } else {
            Default::default()
        });
    }
    let enc = EncodedDump {
        tokens,
        d_sae: sae.d_sae(),
    };
    pool_encoded(&enc, subset, mode, mask)
}

fn check_pair<T>(a: &PooledVector<T>, b: &PooledVector<T>) -> Result<()> {
    if a.ids != b.ids {
        return Err(Error::invariant("pooled vectors cover different feature subsets"));
    }
    if a.values.len() != a.ids.len() || b.values.len() != b.ids.len() {
        return Err(Error::shape("pooled values and ids differ in length"));
    }
    Ok(())
}

/// Per-feature sMAPE term `|a-b| / max((|a|+|b|)/2, eps)`.
pub fn smape_term<T: Scalar>(a: T, b: T) -> T {
    let eps = T::from_f64_lossy(SMAPE_EPS);
    let two = T::one() + T::one();
    (a - b).abs() / ((a.abs() + b.abs()) / two).max(eps)
}

/// Mean sMAPE term over paired slices; `None` for empty input.
pub fn smape_values<T: Scalar>(a: &[T], b: &[T]) -> Option<T> {
    if a.is_empty() || a.len() != b.len() {
        return None;
    }
    Some(a.iter().zip(b).map(|(&x, &y)| smape_term(x, y)).sum::<T>() / T::from_count(a.len()))
}

/// Cosine of two slices; `None` when either is all zeros.
pub fn cosine_values<T: Scalar>(a: &[T], b: &[T]) -> Option<T> {
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == T::zero() || nb == T::zero() {
        return None;
    }
    Some(dot(a, b) / (na * nb))
}

pub fn smape<T: Scalar>(a: &PooledVector<T>, b: &PooledVector<T>) -> Result<T> {
    check_pair(a, b)?;
    smape_values(&a.values, &b.values).ok_or(Error::Empty("feature subset"))
}

/// Cosine similarity; `Ok(None)` is the undefined (excluded) case.
pub fn cosine<T: Scalar>(a: &PooledVector<T>, b: &PooledVector<T>) -> Result<Option<T>> {
    check_pair(a, b)?;
    Ok(cosine_values(&a.values, &b.values))
}

/// Medical and random statistics of one case and their differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseDelta {
    pub smape_medical: f64,
    pub smape_random: f64,
    pub d_smape: f64,
    pub cos_medical: Option<f64>,
    pub cos_random: Option<f64>,
    /// Undefined when either cosine is undefined.
    pub d_cos: Option<f64>,
}

/// Medical minus random for one case (each pair is NL vs NF).
pub fn delta_medical_random<T: Scalar>(
    medical: (&PooledVector<T>, &PooledVector<T>),
    random: (&PooledVector<T>, &PooledVector<T>),
) -> Result<CaseDelta> {
    let modes = [medical.0.mode, medical.1.mode, random.0.mode, random.1.mode];
    if modes.iter().any(|&m| m != modes[0])
        || medical.0.mask != random.0.mask
        || medical.1.mask != random.1.mask
    {
        return Err(Error::invariant("medical and random pairs pooled differently"));
    }
    let sm = smape(medical.0, medical.1)?.to_f64_lossy();
    let sr = smape(random.0, random.1)?.to_f64_lossy();
    let cm = cosine(medical.0, medical.1)?.map(Scalar::to_f64_lossy);
    let cr = cosine(random.0, random.1)?.map(Scalar::to_f64_lossy);
    Ok(CaseDelta {
        smape_medical: sm,
        smape_random: sr,
        d_smape: sm - sr,
        cos_medical: cm,
        cos_random: cr,
        d_cos: cm.zip(cr).map(|(m, r)| m - r),
    })
}

/// One row of the per-stratum medical-minus-random table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StratumRow {
    /// Stratum name, or `all` for the pooled row.
    pub stratum: String,
    pub n: usize,
    pub d_smape: CiRecord,
    /// `None` when no case in the stratum has a defined cosine pair.
    pub d_cos: Option<CiRecord>,
    pub n_cos: usize,
}

/// One bootstrapped row over `deltas` under the label `name`.
pub fn stratum_row(name: &str, deltas: &[&CaseDelta], b: usize, seed: u64) -> Result<StratumRow> {
    let ds: Vec<f64> = deltas.iter().map(|d| d.d_smape).collect();
    let dc: Vec<f64> = deltas.iter().filter_map(|d| d.d_cos).collect();
    let d_cos = if dc.is_empty() {
        None
    } else {
        Some(bootstrap_ci(&dc, b, seed)?.with_n_cos(dc.len()))
    };
    Ok(StratumRow {
        stratum: name.to_owned(),
        n: ds.len(),
        d_smape: bootstrap_ci(&ds, b, seed)?,
        d_cos,
        n_cos: dc.len(),
    })
}

/// Pooled row followed by one row per non-empty stratum, in stratum order.
/// Cases without a stratum label are an error.
pub fn stratum_table(
    deltas: &BTreeMap<String, CaseDelta>,
    strata: &BTreeMap<String, StratumLabel>,
    b: usize,
    seed: u64,
) -> Result<Vec<StratumRow>> {
    if deltas.is_empty() {
        return Err(Error::Empty("case deltas"));
    }
    let mut groups: BTreeMap<StratumLabel, Vec<&CaseDelta>> = BTreeMap::new();
    for (case, d) in deltas {
        let label = strata
            .get(case)
            .ok_or_else(|| Error::missing(case, "no stratum label"))?;
        groups.entry(*label).or_default().push(d);
    }
    let all: Vec<&CaseDelta> = deltas.values().collect();
    let mut rows = vec![stratum_row("all", &all, b, seed)?];
    for (label, ds) in &groups {
        rows.push(stratum_row(label.as_str(), ds, b, seed)?);
    }
    Ok(rows)
}

/// Token region a statistic is restricted to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Vignette,
    Scaffold,
    FullContent,
}

impl MaskKind {
    pub const ALL: [MaskKind; 3] = [MaskKind::Vignette, MaskKind::Scaffold, MaskKind::FullContent];

    /// The dump's span for this region; `None` when the dump has none.
    pub fn span(self, dump: &ActivationDump) -> Option<TokenSpan> {
        let span = match self {
            MaskKind::Vignette => Some(dump.vignette_mask),
            MaskKind::Scaffold => dump.scaffold_mask,
            MaskKind::FullContent => Some(dump.content_range),
        };
        span.filter(|s| !s.is_empty())
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MaskKind::Vignette => "vignette",
            MaskKind::Scaffold => "scaffold",
            MaskKind::FullContent => "full_content",
        }
    }
}

/// A case's NL and NF dumps, already encoded.
#[derive(Debug, Clone)]
pub struct EncodedPair<'a, T> {
    pub nl: &'a ActivationDump,
    pub nf: &'a ActivationDump,
    pub nl_enc: EncodedDump<T>,
    pub nf_enc: EncodedDump<T>,
}

impl<'a, T: Scalar> EncodedPair<'a, T> {
    pub fn new(nl: &'a ActivationDump, nf: &'a ActivationDump, sae: &SaeParams<T>) -> Result<Self> {
        if nl.case_id != nf.case_id {
            return Err(Error::invariant(format!(
                "unpaired dumps {} and {}",
                nl.case_id, nf.case_id
            )));
        }
        Ok(EncodedPair {
            nl,
            nf,
            nl_enc: encode_dump(nl, sae)?,
            nf_enc: encode_dump(nf, sae)?,
        })
    }

    /// NL-vs-NF sMAPE over `mask` on both sides.
    pub fn mask_smape(&self, subset: &[u32], mode: PoolMode, mask: MaskKind) -> Result<f64> {
        let span = |d: &ActivationDump| {
            mask.span(d)
                .ok_or_else(|| Error::missing(&d.case_id, format!("{} mask on {}", mask.as_str(), d.condition)))
        };
        let a = pool_encoded(&self.nl_enc, subset, mode, span(self.nl)?)?;
        let b = pool_encoded(&self.nf_enc, subset, mode, span(self.nf)?)?;
        Ok(smape(&a, &b)?.to_f64_lossy())
    }
}

/// Mean per-mask sMAPE of the medical and random subsets.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskRow {
    pub mask: MaskKind,
    /// `None` marks a mask the free-text side does not have.
    pub medical: Option<f64>,
    pub random: Option<f64>,
    pub n: usize,
}

/// Vignette and full-content sMAPE per subset; the scaffold row is always
/// not-applicable because free-text prompts carry no scaffold.
pub fn mask_decomposition<T: Scalar>(
    pairs: &[EncodedPair<'_, T>],
    medical: &[u32],
    random: &[u32],
    mode: PoolMode,
) -> Result<Vec<MaskRow>> {
    if pairs.is_empty() {
        return Err(Error::Empty("case pairs"));
    }
    let mut rows = Vec::new();
    for mask in [MaskKind::Vignette, MaskKind::FullContent] {
        let mut med = Vec::with_capacity(pairs.len());
        let mut rnd = Vec::with_capacity(pairs.len());
        for p in pairs {
            med.push(p.mask_smape(medical, mode, mask)?);
            rnd.push(p.mask_smape(random, mode, mask)?);
        }
        let n = pairs.len() as f64;
        rows.push(MaskRow {
            mask,
            medical: Some(med.iter().sum::<f64>() / n),
            random: Some(rnd.iter().sum::<f64>() / n),
            n: pairs.len(),
        });
    }
    rows.push(MaskRow {
        mask: MaskKind::Scaffold,
        medical: None,
        random: None,
        n: 0,
    });
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PeakLocation {
    pub inside: usize,
    /// (case, feature) pairs with a nonzero content-range peak.
    pub total: usize,
    pub fraction: Option<f64>,
}

/// Fraction of content-range peaks (earliest argmax) that fall in `mask`.
/// Features that never fire are excluded; a dump lacking the mask counts
/// its peaks as outside.
pub fn peak_location_fraction<T: Scalar>(
    dumps: &[(&ActivationDump, &EncodedDump<T>)],
    subset: &[u32],
    mask: MaskKind,
) -> Result<PeakLocation> {
    if subset.is_empty() {
        return Err(Error::Empty("feature subset"));
    }
    let mut inside = 0;
    let mut total = 0;
    for (dump, enc) in dumps {
        check_subset(subset, enc.d_sae)?;
        let region = mask.span(dump);
        for &f in subset {
            if let (_, Some(t)) = enc.peak(f, &dump.content_range) {
                total += 1;
                inside += usize::from(region.is_some_and(|r| r.contains(t)));
            }
        }
    }
    Ok(PeakLocation {
        inside,
        total,
        fraction: (total > 0).then(|| inside as f64 / total as f64),
    })
}

#[cfg(test)]
mod tests;
