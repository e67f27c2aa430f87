use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{CaseOutcome, Letter};
use crate::actstore::Condition;
use crate::error::{Error, Result};
use crate::invariance::{cluster_bootstrap_ratio, CiRecord};

pub const PERMUTATION_COUNT: usize = 23;

/// Canonical option index of the emergency ("ER now") disposition.
pub const ER_NOW_CONTENT: u8 = 3;

/// A relabeling of the four options: `shown[p]` is the canonical option
/// whose text sits under letter `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Permutation {
    pub id: u8,
    pub shown: [Letter; 4],
}

impl Permutation {
    /// Canonical option index displayed under `letter`.
    pub fn content_at(&self, letter: Letter) -> u8 {
        self.shown[letter.index()].index() as u8
    }

    /// Letter under which canonical option `content` is displayed.
    pub fn letter_of(&self, content: u8) -> Letter {
        let pos = self
            .shown
            .iter()
            .position(|l| l.index() == content as usize)
            .expect("bijection");
        Letter::ALL[pos]
    }

    pub fn fixes(&self, content: u8) -> bool {
        self.shown[content as usize].index() == content as usize
    }
}

/// The 23 non-identity permutations of (A,B,C,D) in lexicographic order,
/// numbered 1..=23.
pub fn enumerate_permutations() -> Vec<Permutation> {
    let mut out = Vec::with_capacity(PERMUTATION_COUNT);
    let mut id = 0u8;
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                for d in 0..4 {
                    let t = [a, b, c, d];
                    let distinct: BTreeSet<_> = t.iter().collect();
                    if distinct.len() != 4 || t == [0, 1, 2, 3] {
                        continue;
                    }
                    id += 1;
                    out.push(Permutation {
                        id,
                        shown: t.map(|i| Letter::ALL[i]),
                    });
                }
            }
        }
    }
    out
}

/// One forced-letter generation under a relabeled option list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShuffleRecord {
    pub case_id: String,
    pub permutation: u8,
    /// `null` when no letter could be extracted.
    pub picked_letter: Option<Letter>,
    /// Canonical option index (0..=3) behind the picked letter.
    pub picked_content: Option<u8>,
}

impl ShuffleRecord {
    fn validate(&self, perms: &[Permutation]) -> Result<()> {
        let p = perms
            .get((self.permutation as usize).wrapping_sub(1))
            .ok_or_else(|| {
                Error::invariant(format!(
                    "case {}: permutation id {} outside 1..=23",
                    self.case_id, self.permutation
                ))
            })?;
        match (self.picked_letter, self.picked_content) {
            (Some(l), Some(c)) if p.content_at(l) != c => Err(Error::invariant(format!(
                "case {} permutation {}: letter {l} shows option {}, record says {c}",
                self.case_id,
                self.permutation,
                p.content_at(l)
            ))),
            (None, Some(_)) | (Some(_), None) => Err(Error::invariant(format!(
                "case {} permutation {}: letter and content must both be present or absent",
                self.case_id, self.permutation
            ))),
            (_, Some(c)) if c > 3 => Err(Error::invariant(format!(
                "case {}: content index {c} outside 0..=3",
                self.case_id
            ))),
            _ => Ok(()),
        }
    }
}

/// Pooled rate over all records with a case-clustered interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateEstimate {
    pub hits: usize,
    pub total: usize,
    pub ci: CiRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShuffleReport {
    pub n_cases: usize,
    pub n_records: usize,
    pub same_letter: RateEstimate,
    pub same_content: RateEstimate,
    pub shuffled_accuracy: RateEstimate,
    pub er_now_content: RateEstimate,
    /// Canonical forced-letter accuracy on the same cases.
    pub canonical_accuracy: f64,
}

/// Compares relabeled forced-letter picks with the canonical NL pick.
///
/// Every case in `outcomes` needs exactly one record for each of the 23
/// permutations; incomplete coverage is reported per case as an error.
pub fn shuffle_analysis(
    records: &[ShuffleRecord],
    outcomes: &[CaseOutcome],
    b: usize,
    seed: u64,
) -> Result<ShuffleReport> {
    if outcomes.is_empty() {
        return Err(Error::Empty("outcomes"));
    }
    let perms = enumerate_permutations();
    let by_id: BTreeMap<&str, &CaseOutcome> =
        outcomes.iter().map(|o| (o.case_id.as_str(), o)).collect();
    let mut per_case: BTreeMap<&str, BTreeMap<u8, &ShuffleRecord>> =
        by_id.keys().map(|&k| (k, BTreeMap::new())).collect();
    for r in records {
        r.validate(&perms)?;
        let slot = per_case
            .get_mut(r.case_id.as_str())
            .ok_or_else(|| Error::missing(&r.case_id, "no outcome for shuffle record"))?;
        if slot.insert(r.permutation, r).is_some() {
            return Err(Error::invariant(format!(
                "case {}: duplicate record for permutation {}",
                r.case_id, r.permutation
            )));
        }
    }
    let incomplete: Vec<String> = per_case
        .iter()
        .filter(|(_, m)| m.len() != PERMUTATION_COUNT)
        .map(|(c, m)| {
            let missing: Vec<String> = (1..=PERMUTATION_COUNT as u8)
                .filter(|p| !m.contains_key(p))
                .map(|p| p.to_string())
                .collect();
            format!("{c} missing [{}]", missing.join(","))
        })
        .collect();
    if !incomplete.is_empty() {
        return Err(Error::Insufficient(format!(
            "incomplete permutation coverage: {}",
            incomplete.join("; ")
        )));
    }

    let n_cases = per_case.len();
    let mut cols = [(); 4].map(|_| Vec::with_capacity(n_cases));
    let mut canonical_correct = 0usize;
    for (case, recs) in &per_case {
        let o = by_id[case];
        let canonical = o.letter(Condition::NL)?;
        canonical_correct += usize::from(canonical.is_some_and(|l| o.gold.accepts(l)));
        let mut hits = [0usize; 4];
        for r in recs.values() {
            let content = r.picked_content;
            hits[0] += usize::from(r.picked_letter.is_some() && r.picked_letter == canonical);
            hits[1] += usize::from(
                content.is_some() && content == canonical.map(|l| l.index() as u8),
            );
            hits[2] += usize::from(
                content.is_some_and(|c| o.gold.accepts(Letter::ALL[c as usize])),
            );
            hits[3] += usize::from(content == Some(ER_NOW_CONTENT));
        }
        for (col, h) in cols.iter_mut().zip(hits) {
            col.push(h as f64);
        }
    }
    let totals = vec![PERMUTATION_COUNT as f64; n_cases];
    let estimate = |hits: &[f64]| -> Result<RateEstimate> {
        Ok(RateEstimate {
            hits: hits.iter().sum::<f64>() as usize,
            total: n_cases * PERMUTATION_COUNT,
            ci: cluster_bootstrap_ratio(hits, &totals, b, seed)?,
        })
    };
    Ok(ShuffleReport {
        n_cases,
        n_records: n_cases * PERMUTATION_COUNT,
        same_letter: estimate(&cols[0])?,
        same_content: estimate(&cols[1])?,
        shuffled_accuracy: estimate(&cols[2])?,
        er_now_content: estimate(&cols[3])?,
        canonical_accuracy: canonical_correct as f64 / n_cases as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::letter_case;
    use super::*;
    use Letter::*;

    #[test]
    fn permutation_list() {
        let perms = enumerate_permutations();
        assert_eq!(perms.len(), 23);
        assert_eq!(perms[0].shown, [A, B, D, C]);
        assert_eq!(perms[0].id, 1);
        assert_eq!(perms[22].id, 23);
        assert_eq!(perms[22].shown, [D, C, B, A]);
        for p in &perms {
            let set: BTreeSet<_> = p.shown.iter().collect();
            assert_eq!(set.len(), 4);
            for c in 0..4u8 {
                assert_eq!(p.content_at(p.letter_of(c)), c);
            }
        }
    }

    fn records_for(case: &str, pick: impl Fn(&Permutation) -> Letter) -> Vec<ShuffleRecord> {
        enumerate_permutations()
            .iter()
            .map(|p| {
                let l = pick(p);
                ShuffleRecord {
                    case_id: case.into(),
                    permutation: p.id,
                    picked_letter: Some(l),
                    picked_content: Some(p.content_at(l)),
                }
            })
            .collect()
    }

    #[test]
    fn pure_content_picker() {
        let outcomes = vec![letter_case("x", "C", Some(B), ["C", "C"])];
        let recs = records_for("x", |p| p.letter_of(1));
        let r = shuffle_analysis(&recs, &outcomes, 200, 1).unwrap();
        assert_eq!(r.same_content.hits, 23);
        // the canonical letter recurs only where the content keeps its slot
        assert_eq!(r.same_letter.hits, 5);
        assert_eq!(r.shuffled_accuracy.hits, 0);
    }

    #[test]
    fn pure_letter_picker() {
        let outcomes = vec![letter_case("x", "C", Some(B), ["C", "C"])];
        let recs = records_for("x", |_| B);
        let r = shuffle_analysis(&recs, &outcomes, 200, 1).unwrap();
        assert_eq!(r.same_letter.hits, 23);
        assert_eq!(r.same_content.hits, 5);
        assert_eq!(r.er_now_content.hits, 6);
    }

    #[test]
    fn coverage_and_consistency_errors() {
        let outcomes = vec![letter_case("x", "C", Some(B), ["C", "C"])];
        let mut recs = records_for("x", |_| B);
        recs.pop();
        let err = shuffle_analysis(&recs, &outcomes, 10, 1).unwrap_err();
        assert!(err.to_string().contains("x missing [23]"));
        let mut bad = records_for("x", |_| B);
        bad[0].picked_content = Some(0);
        assert!(shuffle_analysis(&bad, &outcomes, 10, 1).is_err());
    }
}
