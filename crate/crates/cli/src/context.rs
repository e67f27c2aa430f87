//! Shared run state: resolved config, lazily loaded inputs, report output.

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use formatprobe::actstore::{ActivationDump, Condition, CorpusManifest};
use formatprobe::behavior::{read_outcomes, CaseOutcome};
use formatprobe::harness::{self, PredictionRecord, LETTER_RULE};
use formatprobe::sae::SaeParams;
use formatprobe::{Error, Result, Scalar};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use crate::config::{RunConfig, Seeds};

/// Embedded in every report.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub engine: &'static str,
    pub version: &'static str,
    pub stage: String,
    pub config_hash: String,
    pub seeds: Seeds,
    pub bootstrap: usize,
    pub resample_draws: usize,
    pub permutations: usize,
    pub letter_rule: &'static str,
}

/// One named report: JSON record plus aligned-text rendering.
pub struct Report {
    pub name: String,
    pub json: Value,
    pub text: String,
}

pub struct Context {
    pub cfg: RunConfig,
    pub hash: String,
    manifest: OnceCell<CorpusManifest>,
    outcomes: OnceCell<Vec<CaseOutcome>>,
    predictions: OnceCell<Vec<PredictionRecord>>,
}

pub fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report values serialize")
}

impl Context {
    pub fn new(cfg: RunConfig) -> Self {
        let hash = cfg.hash();
        Context {
            cfg,
            hash,
            manifest: OnceCell::new(),
            outcomes: OnceCell::new(),
            predictions: OnceCell::new(),
        }
    }

    pub fn provenance(&self, stage: &str) -> Provenance {
        Provenance {
            engine: "formatprobe",
            version: env!("CARGO_PKG_VERSION"),
            stage: stage.to_owned(),
            config_hash: self.hash.clone(),
            seeds: self.cfg.seeds,
            bootstrap: self.cfg.bootstrap,
            resample_draws: self.cfg.resample_draws,
            permutations: self.cfg.permutations,
            letter_rule: LETTER_RULE,
        }
    }

    /// Report JSON: `provenance` first, then the stage body's fields.
    pub fn report(&self, stage: &str, name: String, body: Value, text: String) -> Report {
        let mut obj = serde_json::Map::new();
        obj.insert("provenance".into(), to_value(&self.provenance(stage)));
        match body {
            Value::Object(m) => obj.extend(m),
            other => {
                obj.insert("result".into(), other);
            }
        }
        Report {
            name,
            json: Value::Object(obj),
            text,
        }
    }

    pub fn manifest(&self) -> Result<&CorpusManifest> {
        if let Some(m) = self.manifest.get() {
            return Ok(m);
        }
        let path = self.cfg.require(&self.cfg.manifest, "manifest")?;
        let m = CorpusManifest::load(&path)?;
        m.verify()?;
        Ok(self.manifest.get_or_init(|| m))
    }

    /// Dumps of one condition and layer, sorted by case id.
    pub fn dumps(&self, condition: Condition, layer: u32) -> Result<Vec<ActivationDump>> {
        let m = self.manifest()?;
        let entries = m.select(condition, layer);
        if entries.is_empty() {
            return Err(Error::Invariant(format!("manifest has no {condition} dumps at layer {layer}")));
        }
        entries.par_iter().map(|e| m.load_dump(e)).collect()
    }

    pub fn contrast(&self, which: &Option<PathBuf>, name: &str, layer: u32) -> Result<Vec<ActivationDump>> {
        let path = self.cfg.require(which, name)?;
        let m = CorpusManifest::load(&path)?;
        m.verify()?;
        let entries: Vec<_> = m.entries.iter().filter(|e| e.layer == layer).collect();
        if entries.is_empty() {
            return Err(Error::Invariant(format!("{name} has no dumps at layer {layer}")));
        }
        let mut dumps: Vec<ActivationDump> = entries.par_iter().map(|e| m.load_dump(e)).collect::<Result<_>>()?;
        dumps.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        Ok(dumps)
    }

    pub fn sae<T: Scalar>(&self, layer: u32) -> Result<SaeParams<T>> {
        let dir = self
            .cfg
            .sae
            .get(&layer)
            .ok_or_else(|| Error::Invariant(format!("config has no SAE for layer {layer}")))?;
        SaeParams::load_dir(&self.cfg.resolve(dir))
    }

    pub fn has_outcomes(&self) -> bool {
        self.cfg.outcomes.is_some() || self.cfg.cases.is_some()
    }

    pub fn predictions(&self) -> Result<&[PredictionRecord]> {
        if let Some(p) = self.predictions.get() {
            return Ok(p);
        }
        let path = self.cfg.require(&self.cfg.predictions, "predictions")?;
        let p = harness::read_predictions(&path)?;
        Ok(self.predictions.get_or_init(|| p))
    }

    /// Outcomes from the pre-assembled file, else joined from the harness files.
    pub fn outcomes(&self) -> Result<&[CaseOutcome]> {
        if let Some(o) = self.outcomes.get() {
            return Ok(o);
        }
        let o = match &self.cfg.outcomes {
            Some(p) => read_outcomes(&self.cfg.resolve(p))?,
            None => {
                let cases = harness::read_cases(&self.cfg.require(&self.cfg.cases, "outcomes or cases")?)?;
                let labels = match &self.cfg.judge_labels {
                    Some(p) => harness::read_judge_labels(&self.cfg.resolve(p))?,
                    None => Vec::new(),
                };
                harness::assemble_outcomes(&cases, self.predictions()?, &labels)?
            }
        };
        if o.is_empty() {
            return Err(Error::Empty("outcomes"));
        }
        Ok(self.outcomes.get_or_init(|| o))
    }

    /// Conditions with a prediction in any outcome, in canonical order.
    pub fn conditions(&self) -> Result<Vec<Condition>> {
        let o = self.outcomes()?;
        Ok(Condition::ALL
            .into_iter()
            .filter(|c| o.iter().any(|x| x.predictions.contains_key(c)))
            .collect())
    }
}

/// Writes `{name}.json` and `{name}.txt` into `dir`.
pub fn write_report(dir: &Path, r: &Report) -> Result<()> {
    let json = serde_json::to_string_pretty(&r.json).map_err(|e| Error::Internal(e.to_string()))?;
    write_file(&dir.join(format!("{}.json", r.name)), &(json + "\n"))?;
    write_file(&dir.join(format!("{}.txt", r.name)), &r.text)
}

pub fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Mean of the defined values, with their count.
pub fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    let n = v.len();
    ((n > 0).then(|| v.iter().sum::<f64>() / n as f64), n)
}

pub fn by_case<'a>(dumps: &'a [ActivationDump]) -> BTreeMap<&'a str, &'a ActivationDump> {
    dumps.iter().map(|d| (d.case_id.as_str(), d)).collect()
}
