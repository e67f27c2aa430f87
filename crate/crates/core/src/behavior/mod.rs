//! Behavioral scoring and decomposition.
//!
//! Outcomes arrive as one JSON record per case holding the gold label and,
//! per condition, either the extracted forced-choice letter or the per-judge
//! adjudications of a free-text response (4-way and optionally 5-way).

mod agreement;
mod gap;
mod shuffle;

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use agreement::{cohen_kappa, mcnemar_exact, paired_mcnemar, McnemarResult};
pub use gap::{
    adjacency, gap_decompose, rescore_five_way, stratify, stratum_of, triage_error_direction,
    AdjacencyCount, FiveWayRescore, GapCase, GapDecomposition, JudgeRescore, StratumLabel,
    TriageDirection,
};
pub use shuffle::{
    enumerate_permutations, shuffle_analysis, Permutation, RateEstimate, ShuffleRecord,
    ShuffleReport, ER_NOW_CONTENT, PERMUTATION_COUNT,
};

use crate::actstore::Condition;
use crate::error::{Error, Result};

/// Triage tier on the ordered scale A < B < C < D.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Letter {
    A,
    B,
    C,
    D,
}

impl Letter {
    pub const ALL: [Letter; 4] = [Letter::A, Letter::B, Letter::C, Letter::D];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Letter> {
        Letter::ALL.get(i).copied()
    }

    pub fn as_char(self) -> char {
        (b'A' + self as u8) as char
    }
}

impl fmt::Display for Letter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl FromStr for Letter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" => Ok(Letter::A),
            "B" => Ok(Letter::B),
            "C" => Ok(Letter::C),
            "D" => Ok(Letter::D),
            other => Err(Error::invariant(format!("invalid letter {other:?}"))),
        }
    }
}

/// Five-way adjudication label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FiveWay {
    Letter(Letter),
    Deferred,
}

impl FiveWay {
    pub fn letter(self) -> Option<Letter> {
        match self {
            FiveWay::Letter(l) => Some(l),
            FiveWay::Deferred => None,
        }
    }
}

impl fmt::Display for FiveWay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FiveWay::Letter(l) => write!(f, "{l}"),
            FiveWay::Deferred => f.write_str("DEFERRED"),
        }
    }
}

impl FromStr for FiveWay {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("DEFERRED") {
            Ok(FiveWay::Deferred)
        } else {
            s.parse().map(FiveWay::Letter)
        }
    }
}

impl Serialize for FiveWay {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FiveWay {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Gold disposition: one letter, or two adjacent letters either of which is
/// an acceptable match. Serialized as `"C"` or `"C/D"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GoldLabel {
    pub primary: Letter,
    pub secondary: Option<Letter>,
}

impl GoldLabel {
    pub fn single(l: Letter) -> Self {
        GoldLabel {
            primary: l,
            secondary: None,
        }
    }

    pub fn dual(a: Letter, b: Letter) -> Result<Self> {
        if a.index().abs_diff(b.index()) != 1 {
            return Err(Error::invariant(format!(
                "dual gold {a}/{b} is not an adjacent pair"
            )));
        }
        Ok(GoldLabel {
            primary: a,
            secondary: Some(b),
        })
    }

    pub fn accepts(&self, l: Letter) -> bool {
        l == self.primary || Some(l) == self.secondary
    }

    /// Inclusive acceptable band `[lo, hi]`.
    pub fn band(&self) -> (Letter, Letter) {
        let other = self.secondary.unwrap_or(self.primary);
        (self.primary.min(other), self.primary.max(other))
    }
}

impl fmt::Display for GoldLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.secondary {
            Some(s) => write!(f, "{}/{}", self.primary, s),
            None => write!(f, "{}", self.primary),
        }
    }
}

impl FromStr for GoldLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('/') {
            Some((a, b)) => GoldLabel::dual(a.parse()?, b.parse()?),
            None => Ok(GoldLabel::single(s.parse()?)),
        }
    }
}

impl Serialize for GoldLabel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GoldLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Prediction record for one condition of one case.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionRecord {
    /// Extracted forced-choice letter; `null` records an abstention.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub letter: Option<Letter>,
    /// Per-judge 4-way adjudication of a free-text response.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub judges: BTreeMap<String, Letter>,
    /// Per-judge 5-way adjudication (DEFERRED allowed).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub five_way: BTreeMap<String, FiveWay>,
}

/// Everything known behaviorally about one case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub case_id: String,
    pub gold: GoldLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acuity: Option<String>,
    pub predictions: BTreeMap<Condition, ConditionRecord>,
}

impl CaseOutcome {
    pub fn record(&self, cond: Condition) -> Result<&ConditionRecord> {
        self.predictions
            .get(&cond)
            .ok_or_else(|| Error::missing(&self.case_id, format!("no {cond} prediction")))
    }

    /// Forced-choice letter (None = abstention). Errors on free-text conditions.
    pub fn letter(&self, cond: Condition) -> Result<Option<Letter>> {
        if !cond.is_multiple_choice() {
            return Err(Error::invariant(format!("{cond} is not a forced-letter condition")));
        }
        Ok(self.record(cond)?.letter)
    }

    /// Per-judge 4-way labels of a free-text condition (at least one judge).
    pub fn judges(&self, cond: Condition) -> Result<&BTreeMap<String, Letter>> {
        let rec = self.record(cond)?;
        if rec.judges.is_empty() {
            return Err(Error::missing(&self.case_id, format!("judge labels for {cond}")));
        }
        Ok(&rec.judges)
    }

    /// Per-judge correctness under 4-way adjudication.
    pub fn judge_correctness(&self, cond: Condition) -> Result<BTreeMap<&str, bool>> {
        Ok(self
            .judges(cond)?
            .iter()
            .map(|(j, &l)| (j.as_str(), self.gold.accepts(l)))
            .collect())
    }

    /// Headline correctness: the letter matches gold for forced-choice
    /// conditions; every judge agrees the response matches gold for
    /// free-text conditions.
    pub fn is_correct(&self, cond: Condition) -> Result<bool> {
        if cond.is_multiple_choice() {
            Ok(self.letter(cond)?.is_some_and(|l| self.gold.accepts(l)))
        } else {
            Ok(self.judge_correctness(cond)?.values().all(|&c| c))
        }
    }

    /// The single letter a free-text response was read as, when all judges
    /// agree; the extracted letter for forced-choice conditions.
    pub fn consensus_letter(&self, cond: Condition) -> Result<Option<Letter>> {
        if cond.is_multiple_choice() {
            return self.letter(cond);
        }
        let judges = self.judges(cond)?;
        let mut it = judges.values();
        let first = *it.next().expect("non-empty");
        Ok(it.all(|&l| l == first).then_some(first))
    }
}

/// Reads a JSON-lines outcome file (blank lines ignored).
pub fn read_outcomes(path: &Path) -> Result<Vec<CaseOutcome>> {
    read_jsonl(path)
}

pub(crate) fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            Error::MalformedHeader(format!("{}:{}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut text = String::new();
    for item in items {
        text.push_str(
            &serde_json::to_string(item).map_err(|e| Error::Internal(format!("jsonl encode: {e}")))?,
        );
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Fraction of cases correct under the headline rule.
pub fn score_condition(outcomes: &[CaseOutcome], cond: Condition) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::Empty("outcomes"));
    }
    let mut correct = 0usize;
    for o in outcomes {
        if o.is_correct(cond)? {
            correct += 1;
        }
    }
    Ok(correct as f64 / outcomes.len() as f64)
}

/// Accuracy under each individual judge of a free-text condition.
pub fn judge_accuracies(outcomes: &[CaseOutcome], cond: Condition) -> Result<BTreeMap<String, f64>> {
    if outcomes.is_empty() {
        return Err(Error::Empty("outcomes"));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for o in outcomes {
        for (judge, ok) in o.judge_correctness(cond)? {
            *counts.entry(judge.to_owned()).or_default() += usize::from(ok);
        }
    }
    let n = outcomes.len() as f64;
    Ok(counts.into_iter().map(|(j, c)| (j, c as f64 / n)).collect())
}

/// `(correct, total)` per gold label, for acuity stratification.
pub fn accuracy_by_gold(
    outcomes: &[CaseOutcome],
    cond: Condition,
) -> Result<BTreeMap<String, (usize, usize)>> {
    let mut out: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for o in outcomes {
        let slot = out.entry(o.gold.to_string()).or_default();
        slot.0 += usize::from(o.is_correct(cond)?);
        slot.1 += 1;
    }
    Ok(out)
}
