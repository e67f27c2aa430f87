use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::dump::{read_dump, write_dump, ActivationDump, Condition};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub case_id: String,
    pub condition: Condition,
    pub layer: u32,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    /// Lowercase hex SHA-256 of the file bytes.
    pub checksum: String,
}

/// Index of dump files making up one analysis corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_labels: Option<PathBuf>,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    base_dir: PathBuf,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl CorpusManifest {
    pub fn new(base_dir: impl Into<PathBuf>) -> Self {
        CorpusManifest {
            gold_labels: None,
            entries: Vec::new(),
            base_dir: base_dir.into(),
        }
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: CorpusManifest = serde_json::from_str(&text)
            .map_err(|e| Error::MalformedHeader(format!("manifest {}: {e}", path.display())))?;
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Internal(format!("manifest encode: {e}")))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&entry.path)
    }

    /// Writes `dump` into the manifest directory and records its entry.
    pub fn add_dump(&mut self, dump: &ActivationDump) -> Result<&ManifestEntry> {
        let rel = PathBuf::from(format!(
            "{}_{}_L{}.fprb",
            dump.case_id, dump.condition, dump.layer
        ));
        let path = self.base_dir.join(&rel);
        write_dump(dump, &path)?;
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.entries.push(ManifestEntry {
            case_id: dump.case_id.clone(),
            condition: dump.condition,
            layer: dump.layer,
            path: rel,
            checksum: sha256_hex(&bytes),
        });
        Ok(self.entries.last().expect("just pushed"))
    }

    /// Uniqueness of (case, condition, layer), file presence, and checksums.
    pub fn verify(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert((&e.case_id, e.condition, e.layer)) {
                return Err(Error::invariant(format!(
                    "duplicate manifest entry ({}, {}, {})",
                    e.case_id, e.condition, e.layer
                )));
            }
            let path = self.resolve(e);
            let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
            let actual = sha256_hex(&bytes);
            if actual != e.checksum {
                return Err(Error::invariant(format!(
                    "checksum mismatch for {}: manifest {}, file {actual}",
                    path.display(),
                    e.checksum
                )));
            }
        }
        Ok(())
    }

    pub fn select(&self, condition: Condition, layer: u32) -> Vec<&ManifestEntry> {
        let mut out: Vec<_> = self
            .entries
            .iter()
            .filter(|e| e.condition == condition && e.layer == layer)
            .collect();
        out.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        out
    }

    pub fn find(&self, case_id: &str, condition: Condition, layer: u32) -> Option<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.case_id == case_id && e.condition == condition && e.layer == layer)
    }

    /// Reads a dump and cross-checks it against its manifest entry.
    pub fn load_dump(&self, entry: &ManifestEntry) -> Result<ActivationDump> {
        let dump = read_dump(&self.resolve(entry))?;
        if dump.case_id != entry.case_id
            || dump.condition != entry.condition
            || dump.layer != entry.layer
        {
            return Err(Error::invariant(format!(
                "{} holds ({}, {}, {}) but manifest says ({}, {}, {})",
                entry.path.display(),
                dump.case_id,
                dump.condition,
                dump.layer,
                entry.case_id,
                entry.condition,
                entry.layer
            )));
        }
        Ok(dump)
    }

    pub fn layers(&self) -> Vec<u32> {
        let mut layers: Vec<u32> = self.entries.iter().map(|e| e.layer).collect();
        layers.sort_unstable();
        layers.dedup();
        layers
    }
}
