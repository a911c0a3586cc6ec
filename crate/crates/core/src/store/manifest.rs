//! JSON-lines run manifests: one `(model, epoch)` observation per line.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::StoreError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub model_id: String,
    pub epoch: u32,
    pub optimizer: String,
    pub dataset: String,
    #[serde(default)]
    pub hyperparams: BTreeMap<String, String>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Container path, relative paths resolve against the manifest directory.
    pub weights_path: String,
}

impl RunRecord {
    pub fn generalization_gap(&self) -> f64 {
        self.train_accuracy - self.test_accuracy
    }

    /// Value of a grouping key: a record field or, failing that, a
    /// hyperparameter of the same name.
    pub fn group_value(&self, key: &str) -> Option<String> {
        match key {
            "model_id" => Some(self.model_id.clone()),
            "epoch" => Some(self.epoch.to_string()),
            "optimizer" => Some(self.optimizer.clone()),
            "dataset" => Some(self.dataset.clone()),
            other => self.hyperparams.get(other).cloned(),
        }
    }

    fn to_line(&self) -> Result<String, StoreError> {
        let mut line = serde_json::to_string(self).map_err(|e| StoreError::ParseError {
            line: 0,
            message: e.to_string(),
        })?;
        line.push('\n');
        Ok(line)
    }
}

/// Parses manifest text, validating key uniqueness and accuracy scale.
/// Blank lines are ignored.
pub fn parse_manifest(text: &str) -> Result<Vec<RunRecord>, StoreError> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let r: RunRecord = serde_json::from_str(raw).map_err(|e| StoreError::ParseError {
            line,
            message: e.to_string(),
        })?;
        for acc in [r.train_accuracy, r.test_accuracy] {
            if !acc.is_finite() || acc < 0.0 {
                return Err(StoreError::ParseError {
                    line,
                    message: format!("accuracy {acc} is not a finite non-negative number"),
                });
            }
        }
        if !seen.insert((r.model_id.clone(), r.epoch)) {
            return Err(StoreError::DuplicateKey {
                line,
                model_id: r.model_id,
                epoch: r.epoch,
            });
        }
        records.push(r);
    }
    let mut accs = records.iter().flat_map(|r| [r.train_accuracy, r.test_accuracy]);
    if let Some(first) = accs.next() {
        let fractional = first <= 1.0;
        if accs.any(|a| (a <= 1.0) != fractional) {
            return Err(StoreError::ScaleMixing);
        }
    }
    Ok(records)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<RunRecord>, StoreError> {
    parse_manifest(&fs::read_to_string(path)?)
}

/// Appends one record as a single write of one line.
pub fn append_record(path: impl AsRef<Path>, r: &RunRecord) -> Result<(), StoreError> {
    let line = r.to_line()?;
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(line.as_bytes())?;
    Ok(())
}

/// Replaces the manifest at `path` with `records`.
pub fn write_manifest(path: impl AsRef<Path>, records: &[RunRecord]) -> Result<(), StoreError> {
    let mut text = String::new();
    for r in records {
        text.push_str(&r.to_line()?);
    }
    fs::write(path, text)?;
    Ok(())
}

/// Resolves a record's container path against the manifest location.
pub fn resolve_weights_path(manifest: &Path, r: &RunRecord) -> PathBuf {
    let p = Path::new(&r.weights_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or_else(|| Path::new(".")).join(p)
    }
}
