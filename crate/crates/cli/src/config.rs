//! Run configuration: one JSON file, overridden by command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use formatprobe::actstore::{sha256_hex, Condition};
use formatprobe::invariance::PoolMode;
use formatprobe::{Error, Result};
use serde::{Deserialize, Serialize};

/// Every random draw of a run is keyed by one of these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub selection: u64,
    pub bootstrap: u64,
    pub resample: u64,
    pub permutation: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            selection: 0,
            bootstrap: 0,
            resample: 0,
            permutation: 0,
        }
    }
}

impl Seeds {
    pub fn set_all(&mut self, seed: u64) {
        *self = Seeds {
            selection: seed,
            bootstrap: seed,
            resample: seed,
            permutation: seed,
        };
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Source-to-target correctness transition for the flip probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Transition {
    pub source: Condition,
    pub target: Condition,
}

impl TryFrom<String> for Transition {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        let (a, b) = s
            .split_once("->")
            .ok_or_else(|| format!("transition {s:?} is not SOURCE->TARGET"))?;
        let source: Condition = a.trim().parse().map_err(|e: Error| e.to_string())?;
        let target: Condition = b.trim().parse().map_err(|e: Error| e.to_string())?;
        if source == target {
            return Err(format!("transition {s:?} has identical ends"));
        }
        Ok(Transition { source, target })
    }
}

impl From<Transition> for String {
    fn from(t: Transition) -> String {
        format!("{}->{}", t.source, t.target)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSettings {
    pub l2: f64,
    pub standardize: bool,
    pub balanced: bool,
    pub transitions: Vec<Transition>,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings {
            l2: formatprobe::probes::DEFAULT_L2,
            standardize: true,
            balanced: true,
            transitions: vec![Transition {
                source: Condition::NL,
                target: Condition::NF,
            }],
        }
    }
}

/// Run configuration. Relative paths resolve against the config file's
/// directory (or the working directory when no file is given).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Corpus manifest of NL/NF (and other condition) dumps.
    pub manifest: Option<PathBuf>,
    /// SAE directory per layer.
    pub sae: BTreeMap<u32, PathBuf>,
    /// Layers to analyse; defaults to every layer with an SAE.
    pub layers: Vec<u32>,
    /// Pre-made feature selection per layer; overrides the contrastive inputs.
    pub selection: BTreeMap<u32, PathBuf>,
    pub contrast_medical: Option<PathBuf>,
    pub contrast_non: Option<PathBuf>,
    /// Pre-assembled outcomes, or the three harness files below.
    pub outcomes: Option<PathBuf>,
    pub cases: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub judge_labels: Option<PathBuf>,
    pub unembedding: Option<PathBuf>,
    pub seeds: Seeds,
    pub bootstrap: usize,
    pub resample_draws: usize,
    pub permutations: usize,
    pub k: usize,
    pub n_random: usize,
    pub pool_mode: PoolMode,
    pub precision: Precision,
    pub top_k: usize,
    pub scaffold_features: usize,
    pub probe: ProbeSettings,
    /// Not part of the config hash: output location and parallelism do not
    /// change results.
    #[serde(skip_serializing)]
    pub output_dir: Option<PathBuf>,
    #[serde(skip_serializing)]
    pub workers: Option<usize>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: None,
            sae: BTreeMap::new(),
            layers: Vec::new(),
            selection: BTreeMap::new(),
            contrast_medical: None,
            contrast_non: None,
            outcomes: None,
            cases: None,
            predictions: None,
            judge_labels: None,
            unembedding: None,
            seeds: Seeds::default(),
            bootstrap: formatprobe::invariance::DEFAULT_RESAMPLES,
            resample_draws: 1000,
            permutations: formatprobe::probes::DEFAULT_PERMUTATIONS,
            k: formatprobe::features::DEFAULT_K,
            n_random: formatprobe::features::DEFAULT_RANDOM_FEATURES,
            pool_mode: PoolMode::Max,
            precision: Precision::F64,
            top_k: formatprobe::attribution::DEFAULT_TOP_K,
            scaffold_features: formatprobe::attribution::DEFAULT_SCAFFOLD_FEATURES,
            probe: ProbeSettings::default(),
            output_dir: None,
            workers: None,
            base_dir: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::MalformedHeader(format!("config {}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if cfg.base_dir.as_os_str().is_empty() {
            cfg.base_dir = PathBuf::from(".");
        }
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(self.output_dir.as_deref().unwrap_or(Path::new("out")))
    }

    pub fn layers(&self) -> Vec<u32> {
        if self.layers.is_empty() {
            self.sae.keys().copied().collect()
        } else {
            self.layers.clone()
        }
    }

    /// Every referenced path exists and counts are usable.
    pub fn validate(&self) -> Result<()> {
        let mut paths: Vec<(&str, &Path)> = Vec::new();
        for (name, p) in [
            ("manifest", &self.manifest),
            ("contrast_medical", &self.contrast_medical),
            ("contrast_non", &self.contrast_non),
            ("outcomes", &self.outcomes),
            ("cases", &self.cases),
            ("predictions", &self.predictions),
            ("judge_labels", &self.judge_labels),
            ("unembedding", &self.unembedding),
        ] {
            if let Some(p) = p {
                paths.push((name, p));
            }
        }
        paths.extend(self.sae.values().map(|p| ("sae", p.as_path())));
        paths.extend(self.selection.values().map(|p| ("selection", p.as_path())));
        for (name, p) in paths {
            let full = self.resolve(p);
            if !full.exists() {
                return Err(Error::Invariant(format!("config {name}: {} does not exist", full.display())));
            }
        }
        if let Some(l) = self.layers.iter().find(|l| !self.sae.contains_key(l)) {
            return Err(Error::Invariant(format!("config lists layer {l} without an SAE")));
        }
        if self.bootstrap == 0 || self.resample_draws == 0 || self.k == 0 || self.n_random == 0 {
            return Err(Error::Invariant(
                "bootstrap, resample_draws, k and n_random must be positive".into(),
            ));
        }
        if self.workers == Some(0) {
            return Err(Error::Invariant("workers must be positive".into()));
        }
        if !(self.probe.l2 > 0.0) || !self.probe.l2.is_finite() {
            return Err(Error::Invariant("probe l2 must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form (paths as written, no output
    /// location or worker count).
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        sha256_hex(text.as_bytes())
    }

    pub fn require<'a>(&self, p: &'a Option<PathBuf>, name: &str) -> Result<PathBuf> {
        p.as_deref()
            .map(|p| self.resolve(p))
            .ok_or_else(|| Error::Invariant(format!("config has no {name}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_unknown_keys() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg.bootstrap, 2000);
        assert_eq!(cfg.probe.transitions[0].source, Condition::NL);
        assert!(serde_json::from_str::<RunConfig>(r#"{"bootstrp": 5}"#).is_err());
    }

    #[test]
    fn hash_ignores_location_and_workers() {
        let mut a = RunConfig::default();
        let h = a.hash();
        a.workers = Some(8);
        a.output_dir = Some("elsewhere".into());
        assert_eq!(a.hash(), h);
        a.seeds.bootstrap = 1;
        assert_ne!(a.hash(), h);
    }

    #[test]
    fn transition_syntax() {
        let t: Transition = serde_json::from_str(r#""NL_CF->NF""#).unwrap();
        assert_eq!((t.source, t.target), (Condition::NlCf, Condition::NF));
        assert!(serde_json::from_str::<Transition>(r#""NL->NL""#).is_err());
        assert_eq!(serde_json::to_string(&t).unwrap(), r#""NL_CF->NF""#);
    }
}
