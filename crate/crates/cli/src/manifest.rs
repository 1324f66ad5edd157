//! Run manifest: checksums of every stage's inputs and outputs, used to
//! refuse stale inputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    /// Relative path -> sha256 hex.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub config_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub code_version: String,
    /// Checksum of the settings that shape the corpus and fine-tuned models.
    pub upstream_checksum: String,
    pub corpus_checksum: Option<String>,
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: malformed manifest: {msg}")]
    Malformed { path: PathBuf, msg: String },
    #[error("no manifest in {0}; run gen-data first")]
    Missing(PathBuf),
    #[error("stale input: {0}")]
    Stale(String),
}

pub fn sha256_file(path: &Path) -> Result<String, ManifestError> {
    let bytes = fs::read(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(upstream_checksum: String) -> Self {
        Self {
            code_version: CODE_VERSION.to_string(),
            upstream_checksum,
            corpus_checksum: None,
            stages: BTreeMap::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self, ManifestError> {
        let path = dir.join(MANIFEST_FILE);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(ManifestError::Missing(dir.to_path_buf()))
            }
            Err(source) => return Err(ManifestError::Io { path, source }),
        };
        serde_json::from_str(&text).map_err(|e| ManifestError::Malformed {
            path,
            msg: e.to_string(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<(), ManifestError> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|source| ManifestError::Io { path, source })
    }

    /// Refuses to continue when the upstream settings changed since the
    /// corpus was generated, or the manifest was written by other code.
    pub fn check_upstream(&self, upstream_checksum: &str) -> Result<(), ManifestError> {
        if self.code_version != CODE_VERSION {
            return Err(ManifestError::Stale(format!(
                "outputs were produced by {}, this is {CODE_VERSION}; rerun gen-data",
                self.code_version
            )));
        }
        if self.upstream_checksum != upstream_checksum {
            return Err(ManifestError::Stale(
                "corpus, model or fine-tune settings changed since gen-data; rerun gen-data".into(),
            ));
        }
        Ok(())
    }

    /// Checks `rel` against the checksum recorded by the stage that wrote it
    /// and returns that checksum.
    pub fn verify_output(&self, dir: &Path, producer: &str, rel: &str) -> Result<String, ManifestError> {
        let path = dir.join(rel);
        let recorded = self
            .stages
            .get(producer)
            .and_then(|s| s.outputs.get(rel))
            .ok_or_else(|| ManifestError::Stale(format!("{} was not produced by {producer}; run {producer} first", path.display())))?;
        if !path.exists() {
            return Err(ManifestError::Io {
                path,
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "recorded output is missing"),
            });
        }
        let actual = sha256_file(&path)?;
        if &actual != recorded {
            return Err(ManifestError::Stale(format!(
                "{} changed since {producer} wrote it; rerun {producer}",
                path.display()
            )));
        }
        Ok(actual)
    }

    /// Records a stage and drops every stage downstream of its outputs.
    pub fn record(&mut self, name: &str, record: StageRecord) {
        let mut dirty: Vec<String> = record.outputs.keys().cloned().collect();
        loop {
            let stale: Vec<String> = self
                .stages
                .iter()
                .filter(|(stage, r)| *stage != name && r.inputs.keys().any(|k| dirty.contains(k)))
                .map(|(stage, _)| stage.clone())
                .collect();
            if stale.is_empty() {
                break;
            }
            for stage in stale {
                let r = self.stages.remove(&stage).expect("present");
                dirty.extend(r.outputs.into_keys());
            }
        }
        self.stages.insert(name.to_string(), record);
    }
}

/// Accumulates checksums for one stage, paths relative to the output root.
#[derive(Debug)]
pub struct StageBuilder<'a> {
    root: &'a Path,
    record: StageRecord,
}

impl<'a> StageBuilder<'a> {
    pub fn new(root: &'a Path, config_checksum: String) -> Self {
        Self {
            root,
            record: StageRecord {
                config_checksum,
                ..StageRecord::default()
            },
        }
    }

    pub fn input(&mut self, rel: &str, sha: String) {
        self.record.inputs.insert(rel.to_string(), sha);
    }

    pub fn output(&mut self, rel: &str) -> Result<(), ManifestError> {
        let sha = sha256_file(&self.root.join(rel))?;
        self.record.outputs.insert(rel.to_string(), sha);
        Ok(())
    }

    pub fn finish(self) -> StageRecord {
        self.record
    }
}
