//! Residual-space format directions and intervention magnitudes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actstore::{read_tensor, sha256_hex, shared_prefix_length, write_tensor, ActivationDump, TokenSpan};
use crate::error::{Error, Result};
use crate::sae::{encode_dump, SaeParams};
use crate::scalar::{l2_norm, lift, Scalar};
use crate::stats::average_ranks;

pub const STEERING_ALPHAS: [f64; 5] = [0.0, 0.5, 1.0, 2.0, 4.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean residual over each condition's content range.
    FullMean,
    /// Mean residual over vignette tokens inside the shared byte-identical prefix.
    LengthControlledMean,
    /// Per-feature peak differences re-embedded through decoder rows.
    MaxPool,
}

impl Aggregation {
    pub const ALL: [Aggregation; 3] = [
        Aggregation::FullMean,
        Aggregation::LengthControlledMean,
        Aggregation::MaxPool,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::FullMean => "full_mean",
            Aggregation::LengthControlledMean => "length_controlled_mean",
            Aggregation::MaxPool => "max_pool",
        }
    }
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Aggregation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::invariant(format!("unknown aggregation {s:?}")))
    }
}

/// Case-averaged NL-minus-NF residual difference.
#[derive(Debug, Clone, PartialEq)]
pub struct FormatDirection<T> {
    pub delta: Vec<T>,
    pub aggregation: Aggregation,
    pub n_cases: usize,
    pub layer: u32,
}

impl<T: Scalar> FormatDirection<T> {
    pub fn norm(&self) -> T {
        l2_norm(&self.delta)
    }
}

fn mean_rows<T: Scalar>(dump: &ActivationDump, span: TokenSpan) -> Vec<T> {
    let mut acc = vec![T::zero(); dump.dim];
    for t in span.iter() {
        for (a, &v) in acc.iter_mut().zip(dump.row(t)) {
            *a = *a + T::from_stored(v);
        }
    }
    let n = T::from_count(span.len());
    acc.into_iter().map(|a| a / n).collect()
}

/// Pairs dumps by case id; both sides must cover the same cases.
pub fn pair_by_case<'a>(
    nl: &'a [ActivationDump],
    nf: &'a [ActivationDump],
) -> Result<Vec<(&'a ActivationDump, &'a ActivationDump)>> {
    let index = |ds: &'a [ActivationDump]| -> Result<BTreeMap<&'a str, &'a ActivationDump>> {
        let mut m = BTreeMap::new();
        for d in ds {
            if m.insert(d.case_id.as_str(), d).is_some() {
                return Err(Error::invariant(format!("duplicate dump for case {}", d.case_id)));
            }
        }
        Ok(m)
    };
    let a = index(nl)?;
    let mut b = index(nf)?;
    let mut pairs = Vec::with_capacity(a.len());
    for (case, x) in a {
        let y = b
            .remove(case)
            .ok_or_else(|| Error::missing(case, "unpaired NL dump"))?;
        if x.dim != y.dim || x.layer != y.layer || x.model_id != y.model_id {
            return Err(Error::invariant(format!(
                "case {case}: NL and NF dumps differ in model, layer or width"
            )));
        }
        pairs.push((x, y));
    }
    if let Some(case) = b.keys().next() {
        return Err(Error::missing(case, "unpaired NF dump"));
    }
    if pairs.is_empty() {
        return Err(Error::Empty("case pairs"));
    }
    Ok(pairs)
}

fn length_controlled_span(nl: &ActivationDump, nf: &ActivationDump) -> Result<TokenSpan> {
    let shared = shared_prefix_length(nl, nf)?.length;
    let start = nl.vignette_mask.start.max(nf.vignette_mask.start);
    let end = nl.vignette_mask.end.min(nf.vignette_mask.end).min(shared);
    if end <= start {
        return Err(Error::Insufficient(format!(
            "case {}: no vignette tokens inside the shared prefix",
            nl.case_id
        )));
    }
    Ok(TokenSpan::new(start, end))
}

/// Case-averaged NL-minus-NF direction under `aggregation`.
pub fn format_direction<T: Scalar>(
    nl: &[ActivationDump],
    nf: &[ActivationDump],
    aggregation: Aggregation,
    sae: &SaeParams<T>,
) -> Result<FormatDirection<T>> {
    let pairs = pair_by_case(nl, nf)?;
    let dim = pairs[0].0.dim;
    let layer = pairs[0].0.layer;
    let per_case: Vec<Vec<T>> = pairs
        .par_iter()
        .map(|&(a, b)| -> Result<Vec<T>> {
            if a.dim != dim {
                return Err(Error::shape("dumps differ in width across cases"));
            }
            match aggregation {
                Aggregation::FullMean => {
                    let (x, y) = (mean_rows::<T>(a, a.content_range), mean_rows::<T>(b, b.content_range));
                    Ok(x.iter().zip(&y).map(|(&p, &q)| p - q).collect())
                }
                Aggregation::LengthControlledMean => {
                    let span = length_controlled_span(a, b)?;
                    let (x, y) = (mean_rows::<T>(a, span), mean_rows::<T>(b, span));
                    Ok(x.iter().zip(&y).map(|(&p, &q)| p - q).collect())
                }
                Aggregation::MaxPool => {
                    let pa = encode_dump(a, sae)?.peaks(&a.content_range);
                    let pb = encode_dump(b, sae)?.peaks(&b.content_range);
                    let mut out = vec![T::zero(); dim];
                    for (f, (&x, &y)) in pa.iter().zip(&pb).enumerate() {
                        let d = x - y;
                        if d == T::zero() {
                            continue;
                        }
                        for (o, &w) in out.iter_mut().zip(sae.decoder_row(f)) {
                            *o = *o + d * w;
                        }
                    }
                    Ok(out)
                }
            }
        })
        .collect::<Result<_>>()?;
    let n = T::from_count(per_case.len());
    let mut delta = vec![T::zero(); dim];
    for c in &per_case {
        for (d, &v) in delta.iter_mut().zip(c) {
            *d = *d + v;
        }
    }
    for d in &mut delta {
        *d = *d / n;
    }
    if delta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("format direction"));
    }
    Ok(FormatDirection {
        delta,
        aggregation,
        n_cases: per_case.len(),
        layer,
    })
}

/// Alignment of one feature's encoder column with a direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRank {
    pub feature: u32,
    pub abs_cos: f64,
    /// 1-based rank by descending `abs_cos`, ties averaged.
    pub rank: f64,
    /// `(rank - 1) / F`; 0 is the most aligned feature.
    pub percentile: f64,
}

/// `|cos(delta, W_enc[:, f])|` for every feature (0 for zero columns).
pub fn encoder_alignment<T: Scalar>(delta: &[T], sae: &SaeParams<T>) -> Result<Vec<f64>> {
    if delta.len() != sae.d_model() {
        return Err(Error::shape(format!(
            "direction has {} entries, SAE expects {}",
            delta.len(),
            sae.d_model()
        )));
    }
    let dn = l2_norm(delta);
    if dn == T::zero() {
        return Err(Error::invariant("zero format direction has no alignment"));
    }
    let proj = sae.project_encoder(delta);
    let norms = sae.encoder_column_norms();
    Ok(proj
        .iter()
        .zip(&norms)
        .map(|(&p, &n)| {
            if n == T::zero() {
                0.0
            } else {
                (p / (n * dn)).abs().to_f64_lossy()
            }
        })
        .collect())
}

/// Ranks all features by encoder alignment and reports the subset's ranks.
pub fn encoder_alignment_ranks<T: Scalar>(
    delta: &[T],
    sae: &SaeParams<T>,
    subset: &[u32],
) -> Result<Vec<AlignmentRank>> {
    let cos = encoder_alignment(delta, sae)?;
    let f = cos.len();
    let neg: Vec<f64> = cos.iter().map(|c| -c).collect();
    let ranks = average_ranks(&neg);
    subset
        .iter()
        .map(|&id| {
            let i = id as usize;
            if i >= f {
                return Err(Error::shape(format!("feature {id} outside SAE width {f}")));
            }
            Ok(AlignmentRank {
                feature: id,
                abs_cos: cos[i],
                rank: ranks[i],
                percentile: (ranks[i] - 1.0) / f as f64,
            })
        })
        .collect()
}

/// Feature ids ordered by descending encoder alignment (ties to lower id).
pub fn top_aligned<T: Scalar>(delta: &[T], sae: &SaeParams<T>, n: usize) -> Result<Vec<u32>> {
    let cos = encoder_alignment(delta, sae)?;
    let mut ids: Vec<u32> = (0..cos.len() as u32).collect();
    ids.sort_by(|&a, &b| cos[b as usize].total_cmp(&cos[a as usize]).then(a.cmp(&b)));
    ids.truncate(n);
    Ok(ids)
}

/// Per-token magnitude of removing the decoded contribution of `features`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub case_id: String,
    pub features: Vec<u32>,
    /// `||sum_f a_f(t) W_dec[f]||` per token.
    pub delta_norms: Vec<f64>,
    pub residual_norms: Vec<f64>,
    pub mean_delta: f64,
    pub peak_delta: f64,
    pub peak_token: usize,
    pub mean_residual: f64,
    /// `mean_delta / mean_residual`.
    pub mean_fraction: f64,
    /// `peak_delta / mean_residual`.
    pub peak_fraction: f64,
    /// Mean over tokens of `||delta_t|| / ||r_t||`.
    pub mean_token_fraction: f64,
    /// Largest per-token `||delta_t|| / ||r_t||`.
    pub peak_token_fraction: f64,
}

/// Ablation delta norms over every token of `dump`.
pub fn ablation_deltas<T: Scalar>(
    dump: &ActivationDump,
    sae: &SaeParams<T>,
    features: &[u32],
) -> Result<AblationReport> {
    if let Some(f) = features.iter().find(|&&f| f as usize >= sae.d_sae()) {
        return Err(Error::shape(format!("feature {f} outside SAE width {}", sae.d_sae())));
    }
    if dump.token_count == 0 {
        return Err(Error::Empty("dump tokens"));
    }
    let per: Vec<(f64, f64)> = (0..dump.token_count)
        .into_par_iter()
        .map(|t| -> Result<(f64, f64)> {
            let x = lift::<T>(dump.row(t));
            let acts = sae.encode(&x)?;
            let mut delta = vec![T::zero(); sae.d_model()];
            for &f in features {
                let a = acts.get(f);
                if a == T::zero() {
                    continue;
                }
                for (d, &w) in delta.iter_mut().zip(sae.decoder_row(f as usize)) {
                    *d = *d + a * w;
                }
            }
            Ok((l2_norm(&delta).to_f64_lossy(), l2_norm(&x).to_f64_lossy()))
        })
        .collect::<Result<_>>()?;
    let (delta_norms, residual_norms): (Vec<f64>, Vec<f64>) = per.into_iter().unzip();
    let n = delta_norms.len() as f64;
    let mean_delta = delta_norms.iter().sum::<f64>() / n;
    let mean_residual = residual_norms.iter().sum::<f64>() / n;
    let (peak_token, peak_delta) = delta_norms
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (t, v)| if v > best.1 { (t, v) } else { best });
    let ratios: Vec<f64> = delta_norms
        .iter()
        .zip(&residual_norms)
        .map(|(&d, &r)| if r > 0.0 { d / r } else { 0.0 })
        .collect();
    let frac = |v: f64| if mean_residual > 0.0 { v / mean_residual } else { 0.0 };
    Ok(AblationReport {
        case_id: dump.case_id.clone(),
        features: features.to_vec(),
        mean_fraction: frac(mean_delta),
        peak_fraction: frac(peak_delta),
        mean_token_fraction: ratios.iter().sum::<f64>() / n,
        peak_token_fraction: ratios.iter().copied().fold(0.0, f64::max),
        delta_norms,
        residual_norms,
        mean_delta,
        peak_delta,
        peak_token,
        mean_residual,
    })
}

/// Additive steering vector `v = <r_NL> - <r_NF>`.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringVector<T> {
    pub v: Vec<T>,
    pub norm: T,
    pub layer: u32,
}

impl<T: Scalar> SteeringVector<T> {
    pub fn new(v: Vec<T>, layer: u32) -> Self {
        let norm = l2_norm(&v);
        SteeringVector { v, norm, layer }
    }

    /// Steering vector from the full-content mean direction.
    pub fn from_direction(dir: &FormatDirection<T>) -> Self {
        Self::new(dir.delta.clone(), dir.layer)
    }
}

/// `norm / residual_norm`: an intervention's size relative to the residual.
pub fn residual_fraction(norm: f64, residual_norm: f64) -> Result<f64> {
    if !(residual_norm > 0.0) || !residual_norm.is_finite() {
        return Err(Error::invariant("residual norm must be positive"));
    }
    if !norm.is_finite() || norm < 0.0 {
        return Err(Error::invariant("intervention norm must be finite and non-negative"));
    }
    Ok(norm / residual_norm)
}

/// `alpha * ||v|| / residual_norm`.
pub fn steering_perturbation(v_norm: f64, alpha: f64, residual_norm: f64) -> Result<f64> {
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::invariant("alpha must be finite and non-negative"));
    }
    residual_fraction(alpha * v_norm, residual_norm)
}

/// Sidecar descriptor of a saved direction or steering vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorDescriptor {
    pub kind: String,
    pub layer: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregation: Option<Aggregation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_cases: Option<usize>,
    pub norm: f64,
    pub dim: usize,
    /// Tensor file name, relative to the descriptor.
    pub tensor: String,
    pub sha256: String,
}

/// Writes `{stem}.fprb` (tensor) and `{stem}.json` (descriptor) under `dir`.
pub fn save_vector<T: Scalar>(
    dir: &Path,
    stem: &str,
    v: &[T],
    mut desc: VectorDescriptor,
) -> Result<PathBuf> {
    let data: Vec<f32> = v.iter().map(|x| x.to_f64_lossy() as f32).collect();
    let tensor = dir.join(format!("{stem}.fprb"));
    write_tensor(&tensor, &desc.kind, &[data.len()], &data)?;
    let bytes = std::fs::read(&tensor).map_err(|e| Error::io(&tensor, e))?;
    desc.tensor = format!("{stem}.fprb");
    desc.dim = data.len();
    desc.sha256 = sha256_hex(&bytes);
    let json = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&desc)
        .map_err(|e| Error::Internal(format!("descriptor encode: {e}")))?;
    std::fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
    Ok(json)
}

pub fn save_direction<T: Scalar>(dir: &Path, stem: &str, d: &FormatDirection<T>) -> Result<PathBuf> {
    let desc = VectorDescriptor {
        kind: "format_direction".into(),
        layer: d.layer,
        aggregation: Some(d.aggregation),
        n_cases: Some(d.n_cases),
        norm: d.norm().to_f64_lossy(),
        dim: 0,
        tensor: String::new(),
        sha256: String::new(),
    };
    save_vector(dir, stem, &d.delta, desc)
}

pub fn save_steering<T: Scalar>(dir: &Path, stem: &str, s: &SteeringVector<T>) -> Result<PathBuf> {
    let desc = VectorDescriptor {
        kind: "steering_vector".into(),
        layer: s.layer,
        aggregation: None,
        n_cases: None,
        norm: s.norm.to_f64_lossy(),
        dim: 0,
        tensor: String::new(),
        sha256: String::new(),
    };
    save_vector(dir, stem, &s.v, desc)
}

/// Loads a descriptor and its tensor, verifying the checksum.
pub fn load_vector(descriptor: &Path) -> Result<(VectorDescriptor, Vec<f32>)> {
    let text = std::fs::read_to_string(descriptor).map_err(|e| Error::io(descriptor, e))?;
    let desc: VectorDescriptor =
        serde_json::from_str(&text).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let base = descriptor.parent().unwrap_or(Path::new("."));
    let tensor = base.join(&desc.tensor);
    let bytes = std::fs::read(&tensor).map_err(|e| Error::io(&tensor, e))?;
    if sha256_hex(&bytes) != desc.sha256 {
        return Err(Error::invariant(format!("{} checksum differs from descriptor", desc.tensor)));
    }
    let (header, data) = read_tensor(&tensor)?;
    if header.shape != [desc.dim] {
        return Err(Error::shape(format!("tensor shape {:?}, descriptor dim {}", header.shape, desc.dim)));
    }
    Ok((desc, data))
}

#[cfg(test)]
mod tests;
