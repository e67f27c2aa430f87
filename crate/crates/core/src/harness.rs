//! Records exchanged with the model-side extraction harness.
//!
//! The harness reads an [`ExtractionJob`] and emits activation dumps (see
//! [`crate::actstore`]), JSON-lines [`PredictionRecord`]s and JSON-lines
//! [`JudgeLabel`]s. [`assemble_outcomes`] joins those with the case list into
//! the per-case outcomes the behavior module consumes; shuffled-prompt
//! predictions become [`ShuffleRecord`]s instead.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::actstore::Condition;
use crate::behavior::{
    enumerate_permutations, read_jsonl, CaseOutcome, ConditionRecord, FiveWay, GoldLabel, Letter,
    ShuffleRecord,
};
use crate::error::{Error, Result};

/// Version tag of [`extract_letter`]; harness records carry it so a rule
/// change is detectable.
pub const LETTER_RULE: &str = "first-standalone-letter/1";

/// First standalone `A`-`D` in `response`: an uppercase letter with no ASCII
/// letter or digit on either side. `None` records an abstention.
pub fn extract_letter(response: &str) -> Option<Letter> {
    let chars: Vec<char> = response.chars().collect();
    let word = |c: Option<&char>| c.is_some_and(|c| c.is_ascii_alphanumeric());
    chars.iter().enumerate().find_map(|(i, &c)| {
        let letter = Letter::ALL.into_iter().find(|l| l.as_char() == c)?;
        let before = i.checked_sub(1).and_then(|j| chars.get(j));
        (!word(before) && !word(chars.get(i + 1))).then_some(letter)
    })
}

/// Residual positions a job captures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapturePosition {
    ContentRange,
    DecisionToken,
    LetterTokens,
}

/// Residual modification applied during generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Intervention {
    None,
    /// Subtract the SAE-decoded contribution of `features` at every token.
    Ablate { layer: u32, sae_dir: PathBuf, features: Vec<u32> },
    /// Add `-alpha * v` at every token, `v` from a saved steering descriptor.
    Steer { layer: u32, descriptor: PathBuf, alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationSettings {
    pub greedy: bool,
    pub max_new_tokens: usize,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        GenerationSettings {
            greedy: true,
            max_new_tokens: 512,
        }
    }
}

/// Job spec read by the harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionJob {
    pub model_id: String,
    pub layers: Vec<u32>,
    pub conditions: Vec<Condition>,
    pub case_ids: Vec<String>,
    pub capture: Vec<CapturePosition>,
    #[serde(default = "no_intervention")]
    pub intervention: Intervention,
    #[serde(default)]
    pub generation: GenerationSettings,
    /// Headline runs must decode greedily.
    #[serde(default)]
    pub headline: bool,
    /// Also generate the 23 option-order permutations of forced-letter prompts.
    #[serde(default)]
    pub shuffle: bool,
}

fn no_intervention() -> Intervention {
    Intervention::None
}

impl ExtractionJob {
    pub fn validate(&self) -> Result<()> {
        if self.model_id.is_empty() {
            return Err(Error::invariant("job has no model id"));
        }
        if self.layers.is_empty() {
            return Err(Error::Empty("job layers"));
        }
        if self.conditions.is_empty() {
            return Err(Error::Empty("job conditions"));
        }
        if self.case_ids.is_empty() {
            return Err(Error::Empty("job cases"));
        }
        let unique: BTreeSet<&String> = self.case_ids.iter().collect();
        if unique.len() != self.case_ids.len() {
            return Err(Error::invariant("job lists a case twice"));
        }
        if self.headline && !self.generation.greedy {
            return Err(Error::invariant("headline jobs decode greedily"));
        }
        if self.generation.max_new_tokens == 0 {
            return Err(Error::invariant("max_new_tokens must be positive"));
        }
        if self.shuffle && !self.conditions.iter().any(|c| c.is_multiple_choice()) {
            return Err(Error::invariant("shuffle needs a forced-letter condition"));
        }
        match &self.intervention {
            Intervention::None => {}
            Intervention::Ablate { layer, features, .. } => {
                if features.is_empty() {
                    return Err(Error::Empty("ablation features"));
                }
                if !self.layers.contains(layer) {
                    return Err(Error::invariant(format!("ablation layer {layer} is not captured")));
                }
            }
            Intervention::Steer { layer, alpha, .. } => {
                if !alpha.is_finite() || *alpha < 0.0 {
                    return Err(Error::invariant("steering alpha must be finite and non-negative"));
                }
                if !self.layers.contains(layer) {
                    return Err(Error::invariant(format!("steering layer {layer} is not captured")));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let job: ExtractionJob = serde_json::from_str(&text)
            .map_err(|e| Error::MalformedHeader(format!("{}: {e}", path.display())))?;
        job.validate()?;
        Ok(job)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Internal(format!("job encode: {e}")))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Gold disposition of one case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseMeta {
    pub case_id: String,
    pub gold: GoldLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acuity: Option<String>,
}

/// One generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub case_id: String,
    pub condition: Condition,
    pub response: String,
    /// Extracted letter of a forced-letter response; `null` is an abstention.
    #[serde(default)]
    pub letter: Option<Letter>,
    /// Option-order permutation id (1..=23) of a shuffled prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permutation: Option<u8>,
    #[serde(default = "default_rule")]
    pub letter_rule: String,
}

fn default_rule() -> String {
    LETTER_RULE.to_owned()
}

impl PredictionRecord {
    /// Record for `response` with the letter extracted by the current rule.
    pub fn new(case_id: &str, condition: Condition, response: &str, permutation: Option<u8>) -> Self {
        PredictionRecord {
            case_id: case_id.to_owned(),
            condition,
            response: response.to_owned(),
            letter: if condition.is_multiple_choice() {
                extract_letter(response)
            } else {
                None
            },
            permutation,
            letter_rule: LETTER_RULE.to_owned(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSpace {
    FourWay,
    FiveWay,
}

/// One judge's reading of one free-text response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeLabel {
    pub case_id: String,
    pub condition: Condition,
    pub judge: String,
    pub space: LabelSpace,
    pub label: FiveWay,
    /// Raw verdict text kept for audit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
}

impl JudgeLabel {
    fn validate(&self) -> Result<()> {
        if self.condition.is_multiple_choice() {
            return Err(Error::invariant(format!(
                "case {}: judge label for forced-letter condition {}",
                self.case_id, self.condition
            )));
        }
        if self.space == LabelSpace::FourWay && self.label == FiveWay::Deferred {
            return Err(Error::invariant(format!(
                "case {}: judge {} returned DEFERRED in the 4-way space",
                self.case_id, self.judge
            )));
        }
        Ok(())
    }
}

pub fn read_cases(path: &Path) -> Result<Vec<CaseMeta>> {
    read_jsonl(path)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    read_jsonl(path)
}

pub fn read_judge_labels(path: &Path) -> Result<Vec<JudgeLabel>> {
    read_jsonl(path)
}

/// Joins cases, canonical predictions and judge labels into outcomes, in
/// case-list order. Shuffled predictions are skipped (see
/// [`shuffle_records`]). A free-text prediction without judge labels is kept
/// with an empty judge map; scoring then reports the case as missing labels.
pub fn assemble_outcomes(
    cases: &[CaseMeta],
    predictions: &[PredictionRecord],
    labels: &[JudgeLabel],
) -> Result<Vec<CaseOutcome>> {
    let mut by_case: BTreeMap<&str, CaseOutcome> = BTreeMap::new();
    for c in cases {
        let fresh = CaseOutcome {
            case_id: c.case_id.clone(),
            gold: c.gold,
            acuity: c.acuity.clone(),
            predictions: BTreeMap::new(),
        };
        if by_case.insert(&c.case_id, fresh).is_some() {
            return Err(Error::invariant(format!("case {} listed twice", c.case_id)));
        }
    }
    for p in predictions.iter().filter(|p| p.permutation.is_none()) {
        let o = by_case
            .get_mut(p.case_id.as_str())
            .ok_or_else(|| Error::missing(&p.case_id, "prediction for a case not in the case list"))?;
        if !p.condition.is_multiple_choice() && p.letter.is_some() {
            return Err(Error::invariant(format!(
                "case {}: free-text {} prediction carries a letter",
                p.case_id, p.condition
            )));
        }
        let rec = ConditionRecord {
            letter: p.letter,
            ..Default::default()
        };
        if o.predictions.insert(p.condition, rec).is_some() {
            return Err(Error::invariant(format!(
                "case {}: two {} predictions",
                p.case_id, p.condition
            )));
        }
    }
    for l in labels {
        l.validate()?;
        let o = by_case
            .get_mut(l.case_id.as_str())
            .ok_or_else(|| Error::missing(&l.case_id, "judge label for a case not in the case list"))?;
        let rec = o.predictions.get_mut(&l.condition).ok_or_else(|| {
            Error::missing(&l.case_id, format!("judge label without a {} prediction", l.condition))
        })?;
        let dup = match l.space {
            LabelSpace::FourWay => {
                let letter = l.label.letter().expect("validated");
                rec.judges.insert(l.judge.clone(), letter).is_some()
            }
            LabelSpace::FiveWay => rec.five_way.insert(l.judge.clone(), l.label).is_some(),
        };
        if dup {
            return Err(Error::invariant(format!(
                "case {}: judge {} labelled {} twice",
                l.case_id, l.judge, l.condition
            )));
        }
    }
    Ok(cases
        .iter()
        .map(|c| by_case.remove(c.case_id.as_str()).expect("inserted above"))
        .collect())
}

/// Shuffled-prompt predictions as shuffle records, mapping each picked
/// letter back to its canonical option.
pub fn shuffle_records(predictions: &[PredictionRecord]) -> Result<Vec<ShuffleRecord>> {
    let perms = enumerate_permutations();
    predictions
        .iter()
        .filter_map(|p| p.permutation.map(|id| (p, id)))
        .map(|(p, id)| {
            if !p.condition.is_multiple_choice() {
                return Err(Error::invariant(format!(
                    "case {}: shuffled prediction under free-text condition {}",
                    p.case_id, p.condition
                )));
            }
            let perm = perms.get((id as usize).wrapping_sub(1)).ok_or_else(|| {
                Error::invariant(format!("case {}: permutation id {id} outside 1..=23", p.case_id))
            })?;
            Ok(ShuffleRecord {
                case_id: p.case_id.clone(),
                permutation: id,
                picked_letter: p.letter,
                picked_content: p.letter.map(|l| perm.content_at(l)),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn letter_rule_examples() {
        assert_eq!(extract_letter("B."), Some(Letter::B));
        assert_eq!(extract_letter("Answer: C"), Some(Letter::C));
        assert_eq!(extract_letter("(D) go now"), Some(Letter::D));
        assert_eq!(extract_letter("I cannot decide."), None);
        assert_eq!(extract_letter("BC"), None);
        assert_eq!(extract_letter("E or F"), None);
        assert_eq!(extract_letter(""), None);
    }

    fn gold(s: &str) -> GoldLabel {
        s.parse().unwrap()
    }

    #[test]
    fn assembles_letters_and_judges() {
        let cases = vec![CaseMeta {
            case_id: "E1".into(),
            gold: gold("C/D"),
            acuity: None,
        }];
        let preds = vec![
            PredictionRecord::new("E1", Condition::NL, "D.", None),
            PredictionRecord::new("E1", Condition::NF, "Go to urgent care", None),
            PredictionRecord::new("E1", Condition::NL, "A", Some(5)),
        ];
        let labels = vec![
            JudgeLabel {
                case_id: "E1".into(),
                condition: Condition::NF,
                judge: "claude".into(),
                space: LabelSpace::FourWay,
                label: FiveWay::Letter(Letter::C),
                raw: None,
            },
            JudgeLabel {
                case_id: "E1".into(),
                condition: Condition::NF,
                judge: "claude".into(),
                space: LabelSpace::FiveWay,
                label: FiveWay::Deferred,
                raw: Some("depends".into()),
            },
        ];
        let out = assemble_outcomes(&cases, &preds, &labels).unwrap();
        assert_eq!(out[0].letter(Condition::NL).unwrap(), Some(Letter::D));
        assert!(out[0].is_correct(Condition::NF).unwrap());
        assert_eq!(out[0].record(Condition::NF).unwrap().five_way["claude"], FiveWay::Deferred);

        let shuf = shuffle_records(&preds).unwrap();
        assert_eq!(shuf.len(), 1);
        let p5 = enumerate_permutations()[4];
        assert_eq!(shuf[0].picked_content, Some(p5.content_at(Letter::A)));
    }

    #[test]
    fn missing_labels_name_the_case() {
        let cases = vec![CaseMeta {
            case_id: "E7".into(),
            gold: gold("B"),
            acuity: None,
        }];
        let preds = vec![PredictionRecord::new("E7", Condition::NF, "rest at home", None)];
        let out = assemble_outcomes(&cases, &preds, &[]).unwrap();
        match out[0].is_correct(Condition::NF) {
            Err(Error::Missing { case_id, .. }) => assert_eq!(case_id, "E7"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn deferred_needs_five_way_space() {
        let l = JudgeLabel {
            case_id: "E2".into(),
            condition: Condition::NF,
            judge: "gpt".into(),
            space: LabelSpace::FourWay,
            label: FiveWay::Deferred,
            raw: None,
        };
        assert!(l.validate().is_err());
    }

    #[test]
    fn job_round_trip_and_rules() {
        let dir = tempfile::tempdir().unwrap();
        let mut job = ExtractionJob {
            model_id: "toy".into(),
            layers: vec![3],
            conditions: vec![Condition::NL, Condition::NF],
            case_ids: vec!["E1".into()],
            capture: vec![CapturePosition::ContentRange, CapturePosition::DecisionToken],
            intervention: Intervention::Steer {
                layer: 3,
                descriptor: "steer.json".into(),
                alpha: 2.0,
            },
            generation: GenerationSettings::default(),
            headline: true,
            shuffle: true,
        };
        let path = dir.path().join("job.json");
        job.save(&path).unwrap();
        assert_eq!(ExtractionJob::load(&path).unwrap(), job);
        job.generation.greedy = false;
        assert!(job.validate().is_err());
        job.generation.greedy = true;
        job.intervention = Intervention::Ablate {
            layer: 9,
            sae_dir: "sae".into(),
            features: vec![1],
        };
        assert!(job.validate().is_err());
    }
}
