//! Decision-token analyses: linear letter-logit attribution and top-K
//! active-feature characterization.
//!
//! Attribution is the direct linear path `a_f * W_dec[f] . W_U[:, t_letter]`;
//! it ignores the final norm and every later layer, so it is a readout of
//! the decoded feature directions, not of the model's actual logits.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::actstore::ActivationDump;
use crate::behavior::Letter;
use crate::error::{Error, Result};
use crate::sae::{encode_dump, SaeParams, SparseActivations};
use crate::scalar::{dot, lift, Scalar};

pub const DEFAULT_TOP_K: usize = 20;
pub const DEFAULT_SCAFFOLD_FEATURES: usize = 30;

/// Unembedding columns of the four answer-letter tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Unembedding<T> {
    d_model: usize,
    vocab_size: usize,
    letter_token_ids: [u32; 4],
    /// `columns[l]` is `W_U[:, t_l]`.
    columns: [Vec<T>; 4],
}

impl<T: Scalar> Unembedding<T> {
    /// From the four letter columns directly.
    pub fn from_letter_columns(
        columns: [Vec<T>; 4],
        letter_token_ids: [u32; 4],
        vocab_size: usize,
    ) -> Result<Self> {
        let d_model = columns[0].len();
        if d_model == 0 || columns.iter().any(|c| c.len() != d_model) {
            return Err(Error::shape("letter columns must share a positive width"));
        }
        if columns.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("unembedding"));
        }
        let distinct: BTreeSet<u32> = letter_token_ids.iter().copied().collect();
        if distinct.len() != 4 {
            return Err(Error::invariant("letter token ids must be distinct"));
        }
        if let Some(id) = letter_token_ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::invariant(format!(
                "letter token id {id} outside vocabulary of {vocab_size}"
            )));
        }
        Ok(Unembedding {
            d_model,
            vocab_size,
            letter_token_ids,
            columns,
        })
    }

    /// Extracts the letter columns from a full row-major `D x V` matrix.
    pub fn from_full(w_u: &[T], d_model: usize, vocab_size: usize, letter_token_ids: [u32; 4]) -> Result<Self> {
        if w_u.len() != d_model * vocab_size {
            return Err(Error::shape(format!(
                "W_U has {} entries, expected {d_model}x{vocab_size}",
                w_u.len()
            )));
        }
        if let Some(id) = letter_token_ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::invariant(format!(
                "letter token id {id} outside vocabulary of {vocab_size}"
            )));
        }
        let columns = letter_token_ids.map(|t| {
            (0..d_model)
                .map(|d| w_u[d * vocab_size + t as usize])
                .collect::<Vec<T>>()
        });
        Self::from_letter_columns(columns, letter_token_ids, vocab_size)
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn letter_token_ids(&self) -> [u32; 4] {
        self.letter_token_ids
    }

    pub fn column(&self, letter: Letter) -> &[T] {
        &self.columns[letter.index()]
    }
}

/// On-disk form: a JSON descriptor holding ids, vocabulary size and the
/// four columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnembeddingFile {
    pub vocab_size: usize,
    pub letter_token_ids: BTreeMap<Letter, u32>,
    pub columns: BTreeMap<Letter, Vec<f32>>,
}

impl UnembeddingFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::MalformedHeader(format!("{}: {e}", path.display())))
    }

    pub fn to_unembedding<T: Scalar>(&self) -> Result<Unembedding<T>> {
        let get = |l: Letter| -> Result<(u32, Vec<T>)> {
            let id = *self
                .letter_token_ids
                .get(&l)
                .ok_or_else(|| Error::invariant(format!("no token id for letter {l}")))?;
            let col = self
                .columns
                .get(&l)
                .ok_or_else(|| Error::invariant(format!("no unembedding column for letter {l}")))?;
            Ok((id, lift(col)))
        };
        let [a, b, c, d] = Letter::ALL.map(get);
        let (a, b, c, d) = (a?, b?, c?, d?);
        Unembedding::from_letter_columns([a.1, b.1, c.1, d.1], [a.0, b.0, c.0, d.0], self.vocab_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureCategory {
    Medical,
    Scaffold,
    Other,
}

impl FeatureCategory {
    pub const ALL: [FeatureCategory; 3] = [
        FeatureCategory::Medical,
        FeatureCategory::Scaffold,
        FeatureCategory::Other,
    ];
}

/// Feature id to category; absent ids are `Other`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryMap(pub BTreeMap<u32, FeatureCategory>);

impl CategoryMap {
    /// Selected medical features, then the top direction-aligned features
    /// as scaffold; a feature in both stays medical.
    pub fn build(medical: &[u32], scaffold: &[u32]) -> Self {
        let mut m = BTreeMap::new();
        for &f in scaffold {
            m.insert(f, FeatureCategory::Scaffold);
        }
        for &f in medical {
            m.insert(f, FeatureCategory::Medical);
        }
        CategoryMap(m)
    }

    pub fn get(&self, f: u32) -> FeatureCategory {
        self.0.get(&f).copied().unwrap_or(FeatureCategory::Other)
    }

    pub fn ids(&self, cat: FeatureCategory) -> Vec<u32> {
        self.0.iter().filter(|(_, &c)| c == cat).map(|(&f, _)| f).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::MalformedHeader(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Internal(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn check_unembed<T: Scalar>(sae: &SaeParams<T>, unembed: &Unembedding<T>) -> Result<()> {
    if sae.d_model() != unembed.d_model() {
        return Err(Error::shape(format!(
            "SAE width {} differs from unembedding width {}",
            sae.d_model(),
            unembed.d_model()
        )));
    }
    Ok(())
}

/// SAE activations at the dump's decision token.
pub fn decision_activations<T: Scalar>(dump: &ActivationDump, sae: &SaeParams<T>) -> Result<SparseActivations<T>> {
    if dump.decision_index >= dump.token_count {
        return Err(Error::invariant(format!(
            "case {}: decision index {} outside {} tokens",
            dump.case_id, dump.decision_index, dump.token_count
        )));
    }
    if dump.dim != sae.d_model() {
        return Err(Error::shape(format!("dump {} width differs from SAE", dump.case_id)));
    }
    sae.encode(&lift::<T>(dump.decision_row()))
}

/// `W_dec[f] . W_U[:, t_letter]`.
pub fn decoder_logit_weight<T: Scalar>(sae: &SaeParams<T>, unembed: &Unembedding<T>, f: u32, letter: Letter) -> T {
    dot(sae.decoder_row(f as usize), unembed.column(letter))
}

/// Direct linear contribution of feature `f` to the letter's logit.
pub fn logit_contrib<T: Scalar>(
    dump: &ActivationDump,
    sae: &SaeParams<T>,
    unembed: &Unembedding<T>,
    feature: u32,
    letter: Letter,
) -> Result<T> {
    check_unembed(sae, unembed)?;
    if feature as usize >= sae.d_sae() {
        return Err(Error::shape(format!("feature {feature} outside SAE width {}", sae.d_sae())));
    }
    let a = decision_activations(dump, sae)?.get(feature);
    Ok(a * decoder_logit_weight(sae, unembed, feature, letter))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryShare {
    pub category: FeatureCategory,
    pub n_active: usize,
    /// Share of total absolute contribution to the predicted letter.
    pub abs_fraction: Option<f64>,
    /// Share of the predicted-minus-runner-up margin.
    pub margin_share: Option<f64>,
    /// Signed summed contribution per letter A..D.
    pub per_letter: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryAttribution {
    pub case_id: String,
    pub predicted: Letter,
    pub runner_up: Letter,
    pub n_active: usize,
    /// Summed linear contribution per letter over all active features.
    pub letter_totals: [f64; 4],
    pub categories: Vec<CategoryShare>,
}

/// Splits the decision-token linear logit readout by feature category.
///
/// `predicted` is the letter the model actually generated. The runner-up is
/// the other letter with the largest summed linear contribution (ties to
/// the earlier letter).
pub fn category_attribution<T: Scalar>(
    dump: &ActivationDump,
    sae: &SaeParams<T>,
    unembed: &Unembedding<T>,
    categories: &CategoryMap,
    predicted: Letter,
) -> Result<CategoryAttribution> {
    check_unembed(sae, unembed)?;
    let acts = decision_activations(dump, sae)?;
    if acts.is_empty() {
        return Err(Error::Empty("active features at the decision token"));
    }
    let contribs: Vec<(FeatureCategory, [f64; 4])> = acts
        .entries()
        .iter()
        .map(|&(f, a)| {
            let c = Letter::ALL.map(|l| (a * decoder_logit_weight(sae, unembed, f, l)).to_f64_lossy());
            (categories.get(f), c)
        })
        .collect();
    let mut totals = [0.0f64; 4];
    for (_, c) in &contribs {
        for (t, v) in totals.iter_mut().zip(c) {
            *t += v;
        }
    }
    let runner_up = Letter::ALL
        .into_iter()
        .filter(|&l| l != predicted)
        .fold(None, |best: Option<Letter>, l| match best {
            Some(b) if totals[b.index()] >= totals[l.index()] => Some(b),
            _ => Some(l),
        })
        .expect("three candidates");
    let p = predicted.index();
    let r = runner_up.index();
    let abs_total: f64 = contribs.iter().map(|(_, c)| c[p].abs()).sum();
    let margin_total: f64 = contribs.iter().map(|(_, c)| c[p] - c[r]).sum();
    let shares = FeatureCategory::ALL
        .into_iter()
        .map(|cat| {
            let mine: Vec<&[f64; 4]> = contribs.iter().filter(|(c, _)| *c == cat).map(|(_, v)| v).collect();
            let mut per_letter = [0.0f64; 4];
            for v in &mine {
                for (s, x) in per_letter.iter_mut().zip(v.iter()) {
                    *s += x;
                }
            }
            let abs: f64 = mine.iter().map(|v| v[p].abs()).sum();
            let margin: f64 = mine.iter().map(|v| v[p] - v[r]).sum();
            CategoryShare {
                category: cat,
                n_active: mine.len(),
                abs_fraction: (abs_total > 0.0).then(|| abs / abs_total),
                margin_share: (margin_total != 0.0).then(|| margin / margin_total),
                per_letter,
            }
        })
        .collect();
    Ok(CategoryAttribution {
        case_id: dump.case_id.clone(),
        predicted,
        runner_up,
        n_active: acts.len(),
        letter_totals: totals,
        categories: shares,
    })
}

/// Up to `k` feature ids by descending decision-token activation, ties to
/// the lower id.
pub fn top_k_from_activations<T: Scalar>(acts: &SparseActivations<T>, k: usize) -> Vec<u32> {
    let mut v: Vec<(u32, T)> = acts.entries().to_vec();
    v.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite").then(a.0.cmp(&b.0)));
    v.into_iter().take(k).map(|(f, _)| f).collect()
}

pub fn top_k_decision_features<T: Scalar>(dump: &ActivationDump, sae: &SaeParams<T>, k: usize) -> Result<Vec<u32>> {
    Ok(top_k_from_activations(&decision_activations(dump, sae)?, k))
}

/// `|A n B| / |A u B|`, defined as 1 when both sets are empty.
pub fn jaccard(a: &[u32], b: &[u32]) -> f64 {
    let a: BTreeSet<u32> = a.iter().copied().collect();
    let b: BTreeSet<u32> = b.iter().copied().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeakClass {
    Scaffold,
    Vignette,
    OtherContent,
}

/// Location class of each feature's content-range peak (earliest argmax);
/// `None` for features that never fire in the content range.
pub fn peak_classification<T: Scalar>(
    dump: &ActivationDump,
    sae: &SaeParams<T>,
    features: &[u32],
) -> Result<Vec<(u32, Option<PeakClass>)>> {
    if dump.condition.is_multiple_choice() && dump.scaffold_mask.is_none() {
        return Err(Error::missing(&dump.case_id, format!("scaffold mask on {}", dump.condition)));
    }
    if let Some(f) = features.iter().find(|&&f| f as usize >= sae.d_sae()) {
        return Err(Error::shape(format!("feature {f} outside SAE width {}", sae.d_sae())));
    }
    let enc = encode_dump(dump, sae)?;
    Ok(features
        .iter()
        .map(|&f| {
            let class = enc.peak(f, &dump.content_range).1.map(|t| {
                if dump.vignette_mask.contains(t) {
                    PeakClass::Vignette
                } else if dump.scaffold_mask.is_some_and(|s| s.contains(t)) {
                    PeakClass::Scaffold
                } else {
                    PeakClass::OtherContent
                }
            });
            (f, class)
        })
        .collect())
}

/// Top-K decision features of one case under NL and NF.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecisionComparison {
    pub case_id: String,
    pub nl_top: Vec<u32>,
    pub nf_top: Vec<u32>,
    pub jaccard: f64,
    /// NL-only top features by peak location in the NL prompt.
    pub nl_only_classes: BTreeMap<PeakClass, usize>,
    pub medical_in_nl_top: usize,
    pub medical_in_nf_top: usize,
}

pub fn decision_comparison<T: Scalar>(
    nl: &ActivationDump,
    nf: &ActivationDump,
    sae: &SaeParams<T>,
    k: usize,
    medical: &[u32],
) -> Result<DecisionComparison> {
    if nl.case_id != nf.case_id {
        return Err(Error::invariant(format!("unpaired dumps {} and {}", nl.case_id, nf.case_id)));
    }
    let nl_top = top_k_decision_features(nl, sae, k)?;
    let nf_top = top_k_decision_features(nf, sae, k)?;
    let nf_set: BTreeSet<u32> = nf_top.iter().copied().collect();
    let nl_only: Vec<u32> = nl_top.iter().copied().filter(|f| !nf_set.contains(f)).collect();
    let mut classes = BTreeMap::new();
    for (_, c) in peak_classification(nl, sae, &nl_only)? {
        if let Some(c) = c {
            *classes.entry(c).or_default() += 1;
        }
    }
    let med: BTreeSet<u32> = medical.iter().copied().collect();
    Ok(DecisionComparison {
        case_id: nl.case_id.clone(),
        jaccard: jaccard(&nl_top, &nf_top),
        medical_in_nl_top: nl_top.iter().filter(|f| med.contains(f)).count(),
        medical_in_nf_top: nf_top.iter().filter(|f| med.contains(f)).count(),
        nl_top,
        nf_top,
        nl_only_classes: classes,
    })
}
