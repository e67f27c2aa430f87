use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{CaseOutcome, FiveWay, GoldLabel, Letter};
use crate::actstore::Condition;
use crate::error::{Error, Result};

/// Joint forced-choice / free-text correctness of one case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StratumLabel {
    BothRight,
    BothWrong,
    NfOnlyRight,
    NlOnlyRight,
    JudgesDisagree,
}

impl StratumLabel {
    pub const ALL: [StratumLabel; 5] = [
        StratumLabel::BothRight,
        StratumLabel::BothWrong,
        StratumLabel::NfOnlyRight,
        StratumLabel::NlOnlyRight,
        StratumLabel::JudgesDisagree,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StratumLabel::BothRight => "both_right",
            StratumLabel::BothWrong => "both_wrong",
            StratumLabel::NfOnlyRight => "nf_only_right",
            StratumLabel::NlOnlyRight => "nl_only_right",
            StratumLabel::JudgesDisagree => "judges_disagree",
        }
    }
}

impl std::fmt::Display for StratumLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for StratumLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StratumLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::invariant(format!("unknown stratum {s:?}")))
    }
}

/// Stratum of one case for a forced-choice / free-text condition pair.
/// Judges that differ on free-text correctness override the joint cell.
pub fn stratum_of(o: &CaseOutcome, forced: Condition, free: Condition) -> Result<StratumLabel> {
    let mc = o.is_correct(forced)?;
    let judges = o.judge_correctness(free)?;
    let mut it = judges.values();
    let first = *it.next().expect("non-empty");
    if !it.all(|&c| c == first) {
        return Ok(StratumLabel::JudgesDisagree);
    }
    Ok(match (mc, first) {
        (true, true) => StratumLabel::BothRight,
        (false, false) => StratumLabel::BothWrong,
        (false, true) => StratumLabel::NfOnlyRight,
        (true, false) => StratumLabel::NlOnlyRight,
    })
}

/// NL/NF stratum for every case, keyed by case id.
pub fn stratify(outcomes: &[CaseOutcome]) -> Result<BTreeMap<String, StratumLabel>> {
    outcomes
        .iter()
        .map(|o| Ok((o.case_id.clone(), stratum_of(o, Condition::NL, Condition::NF)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TriageDirection {
    Under,
    Correct,
    Over,
}

impl TriageDirection {
    /// Under when below the gold band, over when above it.
    pub fn of(gold: &GoldLabel, pred: Letter) -> Self {
        let (lo, hi) = gold.band();
        if pred < lo {
            TriageDirection::Under
        } else if pred > hi {
            TriageDirection::Over
        } else {
            TriageDirection::Correct
        }
    }
}

/// `(under, over)` error counts for a condition.
///
/// Forced-choice abstentions are skipped. A free-text case counts only when
/// every judge's letter falls on the same side of the gold band.
pub fn triage_error_direction(outcomes: &[CaseOutcome], cond: Condition) -> Result<(usize, usize)> {
    let mut under = 0;
    let mut over = 0;
    for o in outcomes {
        let dir = if cond.is_multiple_choice() {
            o.letter(cond)?.map(|l| TriageDirection::of(&o.gold, l))
        } else {
            let mut dirs = o.judges(cond)?.values().map(|&l| TriageDirection::of(&o.gold, l));
            let first = dirs.next().expect("non-empty");
            dirs.all(|d| d == first).then_some(first)
        };
        match dir {
            Some(TriageDirection::Under) => under += 1,
            Some(TriageDirection::Over) => over += 1,
            _ => {}
        }
    }
    Ok((under, over))
}

impl From<Letter> for FiveWay {
    fn from(l: Letter) -> Self {
        FiveWay::Letter(l)
    }
}

/// Integer distance on A<B<C<D; undefined when either side is DEFERRED.
pub fn adjacency(a: impl Into<FiveWay>, b: impl Into<FiveWay>) -> Option<usize> {
    match (a.into(), b.into()) {
        (FiveWay::Letter(x), FiveWay::Letter(y)) => Some(x.index().abs_diff(y.index())),
        _ => None,
    }
}

/// Per-judge accuracies under both label spaces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JudgeRescore {
    pub four_way: f64,
    pub five_way: f64,
    pub deferred: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FiveWayRescore {
    pub condition: Condition,
    pub n: usize,
    pub per_judge: BTreeMap<String, JudgeRescore>,
    /// All-judge rule, deferrals flattened to their 4-way letters.
    pub all_judges_four_way: f64,
    /// All-judge rule, DEFERRED counted incorrect.
    pub all_judges_five_way: f64,
    /// Cases where every judge answered DEFERRED.
    pub unanimous_deferred: Vec<String>,
    /// Cases where some but not all judges answered DEFERRED.
    pub split_deferred: Vec<String>,
}

fn five_way_labels(o: &CaseOutcome, cond: Condition) -> Result<&BTreeMap<String, FiveWay>> {
    let rec = o.record(cond)?;
    if rec.five_way.is_empty() {
        return Err(Error::missing(&o.case_id, format!("5-way judge labels for {cond}")));
    }
    Ok(&rec.five_way)
}

/// Rescores a free-text condition with the DEFERRED-capable label space.
pub fn rescore_five_way(outcomes: &[CaseOutcome], cond: Condition) -> Result<FiveWayRescore> {
    if outcomes.is_empty() {
        return Err(Error::Empty("outcomes"));
    }
    let mut four: BTreeMap<String, usize> = BTreeMap::new();
    let mut five: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let (mut all4, mut all5) = (0usize, 0usize);
    let mut unanimous = Vec::new();
    let mut split = Vec::new();
    for o in outcomes {
        let c4 = o.judge_correctness(cond)?;
        for (j, ok) in &c4 {
            *four.entry((*j).to_owned()).or_default() += usize::from(*ok);
        }
        all4 += usize::from(c4.values().all(|&c| c));

        let labels = five_way_labels(o, cond)?;
        let mut all_ok = true;
        let mut n_def = 0;
        for (j, l) in labels {
            let slot = five.entry(j.clone()).or_default();
            let ok = l.letter().is_some_and(|x| o.gold.accepts(x));
            slot.0 += usize::from(ok);
            if *l == FiveWay::Deferred {
                slot.1 += 1;
                n_def += 1;
            }
            all_ok &= ok;
        }
        all5 += usize::from(all_ok);
        if n_def == labels.len() {
            unanimous.push(o.case_id.clone());
        } else if n_def > 0 {
            split.push(o.case_id.clone());
        }
    }
    let n = outcomes.len();
    let nf = n as f64;
    let mut per_judge = BTreeMap::new();
    for (j, (ok5, def)) in five {
        let ok4 = four.get(&j).copied().unwrap_or(0);
        per_judge.insert(
            j,
            JudgeRescore {
                four_way: ok4 as f64 / nf,
                five_way: ok5 as f64 / nf,
                deferred: def,
            },
        );
    }
    Ok(FiveWayRescore {
        condition: cond,
        n,
        per_judge,
        all_judges_four_way: all4 as f64 / nf,
        all_judges_five_way: all5 as f64 / nf,
        unanimous_deferred: unanimous,
        split_deferred: split,
    })
}

/// One row of the per-case gap table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapCase {
    pub case_id: String,
    pub gold: GoldLabel,
    pub stratum: StratumLabel,
    pub nl: Option<Letter>,
    /// Letter all free-text judges agree on, if any.
    pub nf: Option<Letter>,
    pub distance: Option<usize>,
    pub unanimous_deferred: bool,
}

/// `adjacent` of `defined` cases were one step apart; `total` includes
/// cases whose distance is undefined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct AdjacencyCount {
    pub adjacent: usize,
    pub defined: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapDecomposition {
    pub n: usize,
    pub strata: BTreeMap<StratumLabel, usize>,
    pub nf_only_right: usize,
    pub nl_only_right: usize,
    /// Unanimous DEFERRED count under 5-way scoring (0 without 5-way labels).
    pub deferred: usize,
    /// Bounds on how many deferrals are counted wrong under 4-way scoring;
    /// a judge split widens the upper bound only.
    pub deferred_in_gap: (usize, usize),
    pub nf_only_adjacency: AdjacencyCount,
    pub nl_only_adjacency: AdjacencyCount,
    /// Gap-driving and unanimously deferred cases, in input order.
    pub cases: Vec<GapCase>,
}

fn gap_case(o: &CaseOutcome, stratum: StratumLabel, deferred: bool) -> Result<GapCase> {
    let nl = o.letter(Condition::NL)?;
    let nf = o.consensus_letter(Condition::NF)?;
    let distance = match (nl, nf) {
        (Some(a), Some(b)) => adjacency(a, b),
        _ => None,
    };
    Ok(GapCase {
        case_id: o.case_id.clone(),
        gold: o.gold,
        stratum,
        nl,
        nf,
        distance,
        unanimous_deferred: deferred,
    })
}

/// Decomposes the NL-NF gap into strata, adjacency and deferral parts.
/// Cases lacking 5-way labels contribute no deferrals.
pub fn gap_decompose(outcomes: &[CaseOutcome]) -> Result<GapDecomposition> {
    let mut strata: BTreeMap<StratumLabel, usize> =
        StratumLabel::ALL.into_iter().map(|s| (s, 0)).collect();
    let mut nf_adj = AdjacencyCount::default();
    let mut nl_adj = AdjacencyCount::default();
    let mut deferred = 0;
    let mut in_gap = (0usize, 0usize);
    let mut cases = Vec::new();
    for o in outcomes {
        let stratum = stratum_of(o, Condition::NL, Condition::NF)?;
        *strata.get_mut(&stratum).expect("all strata seeded") += 1;
        let five = &o.record(Condition::NF)?.five_way;
        let unanimous = !five.is_empty() && five.values().all(|&l| l == FiveWay::Deferred);
        if unanimous {
            deferred += 1;
            let correct = o.judge_correctness(Condition::NF)?;
            let wrong = correct.values().filter(|&&c| !c).count();
            if wrong == correct.len() {
                in_gap.0 += 1;
                in_gap.1 += 1;
            } else if wrong > 0 {
                in_gap.1 += 1;
            }
        }
        let adj = match stratum {
            StratumLabel::NfOnlyRight => Some(&mut nf_adj),
            StratumLabel::NlOnlyRight => Some(&mut nl_adj),
            _ => None,
        };
        if adj.is_none() && !unanimous {
            continue;
        }
        let row = gap_case(o, stratum, unanimous)?;
        if let Some(count) = adj {
            count.total += 1;
            if let Some(d) = row.distance {
                count.defined += 1;
                count.adjacent += usize::from(d == 1);
            }
        }
        cases.push(row);
    }
    Ok(GapDecomposition {
        n: outcomes.len(),
        nf_only_right: strata[&StratumLabel::NfOnlyRight],
        nl_only_right: strata[&StratumLabel::NlOnlyRight],
        strata,
        deferred,
        deferred_in_gap: in_gap,
        nf_only_adjacency: nf_adj,
        nl_only_adjacency: nl_adj,
        cases,
    })
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::letter_case;
    use super::*;
    use Letter::*;

    fn with_five(mut o: CaseOutcome, labels: [&str; 2]) -> CaseOutcome {
        let rec = o.predictions.get_mut(&Condition::NF).unwrap();
        rec.five_way = [("claude", labels[0]), ("gpt", labels[1])]
            .into_iter()
            .map(|(j, l)| (j.to_owned(), l.parse().unwrap()))
            .collect();
        o
    }

    #[test]
    fn strata_cells() {
        let cases = [
            letter_case("r", "C", Some(C), ["C", "C"]),
            letter_case("w", "C", Some(A), ["B", "D"]),
            letter_case("f", "C", Some(B), ["C", "C"]),
            letter_case("n", "C", Some(C), ["B", "B"]),
            letter_case("d", "C", Some(B), ["C", "B"]),
        ];
        let s = stratify(&cases).unwrap();
        assert_eq!(s["r"], StratumLabel::BothRight);
        assert_eq!(s["w"], StratumLabel::BothWrong);
        assert_eq!(s["f"], StratumLabel::NfOnlyRight);
        assert_eq!(s["n"], StratumLabel::NlOnlyRight);
        assert_eq!(s["d"], StratumLabel::JudgesDisagree);
    }

    #[test]
    fn direction_band_rule() {
        let g: GoldLabel = "C/D".parse().unwrap();
        assert_eq!(TriageDirection::of(&g, B), TriageDirection::Under);
        assert_eq!(TriageDirection::of(&g, C), TriageDirection::Correct);
        let cases = [
            letter_case("a", "C/D", Some(B), ["A", "B"]),
            letter_case("b", "B", Some(D), ["B", "C"]),
            letter_case("c", "B", None, ["C", "D"]),
        ];
        assert_eq!(triage_error_direction(&cases, Condition::NL).unwrap(), (1, 1));
        assert_eq!(triage_error_direction(&cases, Condition::NF).unwrap(), (1, 1));
    }

    #[test]
    fn adjacency_distances() {
        assert_eq!(adjacency(B, C), Some(1));
        assert_eq!(adjacency(A, D), Some(3));
        assert_eq!(adjacency(C, C), Some(0));
        assert_eq!(adjacency(FiveWay::Deferred, C), None);
    }

    #[test]
    fn six_case_decomposition() {
        let cases = vec![
            letter_case("1", "C", Some(B), ["C", "C"]),
            letter_case("2", "C/D", Some(A), ["C", "C"]),
            letter_case("3", "B", Some(B), ["D", "D"]),
            letter_case("4", "B", Some(B), ["B", "B"]),
            with_five(letter_case("5", "B", Some(B), ["B", "B"]), ["DEFERRED", "DEFERRED"]),
            with_five(letter_case("6", "A", Some(A), ["B", "B"]), ["DEFERRED", "B"]),
        ];
        let g = gap_decompose(&cases).unwrap();
        assert_eq!((g.nf_only_right, g.nl_only_right), (2, 2));
        assert_eq!(g.strata[&StratumLabel::BothRight], 2);
        assert_eq!(g.deferred, 1);
        assert_eq!(g.deferred_in_gap, (0, 0));
        assert_eq!(
            g.nf_only_adjacency,
            AdjacencyCount {
                adjacent: 1,
                defined: 2,
                total: 2
            }
        );
        assert_eq!(g.nl_only_adjacency.adjacent, 1);
        assert_eq!(g.cases.len(), 5);
    }

    #[test]
    fn all_both_right_is_empty() {
        let cases = vec![letter_case("1", "C", Some(C), ["C", "C"])];
        let g = gap_decompose(&cases).unwrap();
        assert_eq!((g.nf_only_right, g.nl_only_right, g.deferred), (0, 0, 0));
        assert!(g.cases.is_empty());
    }

    #[test]
    fn five_way_rescoring() {
        let cases = vec![
            with_five(letter_case("F15", "B", Some(B), ["B", "B"]), ["DEFERRED", "DEFERRED"]),
            with_five(letter_case("x", "B", Some(B), ["B", "B"]), ["DEFERRED", "B"]),
        ];
        let r = rescore_five_way(&cases, Condition::NF).unwrap();
        assert_eq!(r.unanimous_deferred, vec!["F15".to_owned()]);
        assert_eq!(r.split_deferred, vec!["x".to_owned()]);
        assert_eq!(r.per_judge["claude"].five_way, 0.0);
        assert_eq!(r.per_judge["gpt"].five_way, 0.5);
        assert_eq!(r.all_judges_four_way, 1.0);
        assert_eq!(r.all_judges_five_way, 0.0);
        let missing = vec![letter_case("y", "B", Some(B), ["B", "B"])];
        assert!(matches!(
            rescore_five_way(&missing, Condition::NF),
            Err(Error::Missing { .. })
        ));
    }
}
