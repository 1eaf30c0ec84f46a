//! Registry of every file an experiment emits, with content hashes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::{ensure_parent, sha256_hex};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the output directory when inside it, absolute otherwise.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Hash of the effective configuration (after command-line overrides).
    pub config_sha256: String,
    pub files: Vec<FileEntry>,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub artifact_version: String,
    /// Hash of the config file as read.
    pub config_sha256: String,
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub registered: usize,
    pub missing: Vec<String>,
    pub modified: Vec<String>,
    pub unregistered: Vec<String>,
}

impl Verification {
    pub fn ok(&self) -> bool {
        self.missing.is_empty() && self.modified.is_empty() && self.unregistered.is_empty()
    }
}

fn display_path(out_dir: &Path, file: &Path) -> String {
    match file.strip_prefix(out_dir) {
        Ok(rel) => rel.to_string_lossy().replace('\\', "/"),
        Err(_) => file.to_string_lossy().into_owned(),
    }
}

fn resolve(out_dir: &Path, entry: &str) -> PathBuf {
    let p = Path::new(entry);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        out_dir.join(p)
    }
}

pub fn file_entry(out_dir: &Path, file: &Path) -> Result<FileEntry> {
    let bytes = std::fs::read(file).with_context(|| format!("hashing {}", file.display()))?;
    Ok(FileEntry {
        path: display_path(out_dir, file),
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
    })
}

impl ExperimentManifest {
    pub fn new(config_sha256: &str) -> Self {
        Self {
            artifact_version: ARTIFACT_VERSION.to_string(),
            config_sha256: config_sha256.to_string(),
            stages: BTreeMap::new(),
        }
    }

    pub fn path(out_dir: &Path) -> PathBuf {
        out_dir.join(MANIFEST_FILE)
    }

    pub fn load(out_dir: &Path) -> Result<Option<Self>> {
        let path = Self::path(out_dir);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path)?;
        Ok(Some(
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
        ))
    }

    /// Existing manifest for the same configuration, or a fresh one.
    pub fn load_or_new(out_dir: &Path, config_sha256: &str) -> Result<Self> {
        Ok(match Self::load(out_dir)? {
            Some(m) if m.config_sha256 == config_sha256 => m,
            _ => Self::new(config_sha256),
        })
    }

    pub fn record_stage(
        &mut self,
        out_dir: &Path,
        stage: &str,
        effective_config: &str,
        files: &[PathBuf],
        wall_clock_secs: f64,
    ) -> Result<()> {
        let mut entries = files
            .iter()
            .map(|f| file_entry(out_dir, f))
            .collect::<Result<Vec<_>>>()?;
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        entries.dedup_by(|a, b| a.path == b.path);
        self.stages.insert(
            stage.to_string(),
            StageRecord {
                config_sha256: effective_config.to_string(),
                files: entries,
                wall_clock_secs,
            },
        );
        Ok(())
    }

    pub fn save(&self, out_dir: &Path) -> Result<()> {
        let path = Self::path(out_dir);
        ensure_parent(&path)?;
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Re-hashes every registered file and lists files under `out_dir` that
    /// no stage registered.
    pub fn verify(&self, out_dir: &Path) -> Result<Verification> {
        let mut v = Verification::default();
        let mut registered = BTreeSet::new();
        for stage in self.stages.values() {
            for entry in &stage.files {
                v.registered += 1;
                let path = resolve(out_dir, &entry.path);
                registered.insert(path.clone());
                match std::fs::read(&path) {
                    Ok(bytes) if sha256_hex(&bytes) == entry.sha256 => {}
                    Ok(_) => v.modified.push(entry.path.clone()),
                    Err(_) => v.missing.push(entry.path.clone()),
                }
            }
        }
        let manifest = Self::path(out_dir);
        let mut stack = vec![out_dir.to_path_buf()];
        while let Some(dir) = stack.pop() {
            let Ok(read) = std::fs::read_dir(&dir) else { continue };
            for item in read {
                let path = item?.path();
                if path.is_dir() {
                    stack.push(path);
                } else if path != manifest && !registered.contains(&path) {
                    v.unregistered.push(display_path(out_dir, &path));
                }
            }
        }
        v.unregistered.sort();
        Ok(v)
    }
}
