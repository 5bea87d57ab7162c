//! The output directory: artifacts, the echoed config and the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use amnesic::AmnesicReport;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TSV: &str = "report.tsv";
pub const ITERATIONS_CSV: &str = "iterations.csv";
pub const RECOVERABILITY_CSV: &str = "recoverability.csv";
pub const LAYER_IMPACT_CSV: &str = "layer_impact.csv";
pub const PER_LABEL_TSV: &str = "per_label.tsv";

/// `report.json`: the measured reports plus whatever else the command
/// produced.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    #[serde(default)]
    pub reports: Vec<AmnesicReport>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl RunReport {
    pub fn new(command: &str, reports: Vec<AmnesicReport>) -> Self {
        RunReport {
            command: command.to_string(),
            reports,
            extra: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Serialize) -> Self {
        let v = serde_json::to_value(value).expect("report value serializes");
        self.extra.insert(key.to_string(), v);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub files: Vec<ManifestEntry>,
}

pub struct Output {
    dir: PathBuf,
}

impl Output {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Output {
            dir: dir.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn write_report(&self, report: &RunReport) -> Result<()> {
        let json = serde_json::to_string_pretty(report).expect("report serializes") + "\n";
        self.write(REPORT_JSON, json)?;
        if !report.reports.is_empty() {
            self.write(REPORT_TSV, amnesic::eval::table_tsv(&report.reports))?;
        }
        Ok(())
    }

    /// Echoes the config and writes the checksum manifest; call last.
    pub fn finish(&self, cfg: &ExperimentConfig) -> Result<Manifest> {
        self.write(CONFIG_FILE, cfg.to_json())?;
        let mut files = Vec::new();
        collect_files(&self.dir, &self.dir, &mut files)?;
        files.sort();
        let mut entries = Vec::with_capacity(files.len());
        for rel in files {
            if rel == MANIFEST_FILE {
                continue;
            }
            let path = self.dir.join(&rel);
            let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
            entries.push(ManifestEntry {
                path: rel,
                bytes: bytes.len() as u64,
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        let manifest = Manifest {
            command: cfg.command.clone(),
            files: entries,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        self.write(MANIFEST_FILE, json)?;
        Ok(manifest)
    }
}

/// Relative paths of all files under `dir`, with `/` separators.
fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| CliError::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("under root");
            let parts: Vec<String> = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect();
            out.push(parts.join("/"));
        }
    }
    Ok(())
}

/// Reads the `report.json` of an earlier run.
pub fn read_report(dir: &Path) -> Result<RunReport> {
    let path = dir.join(REPORT_JSON);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::config_at(format!("bad report: {e}"), &path))
}
