//! Run manifest: per-cell completion status keyed by a config hash.
//! A completed cell is never re-executed on resume; the manifest is the
//! single synchronization point for parallel cell execution.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status")]
pub enum CellStatus {
    Done { unix_time: u64 },
    Failed { reason: String, unix_time: u64 },
    Skipped { reason: String },
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    format_version: u32,
    config_hash: String,
    cells: BTreeMap<String, CellStatus>,
    notes: BTreeMap<String, String>,
}

#[derive(Debug)]
pub struct RunManifest {
    path: PathBuf,
    inner: Mutex<ManifestFile>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    /// Open or create the manifest at `dir/manifest.json`. An existing
    /// manifest with a different config hash is an error: resume is only
    /// defined for an identical configuration.
    pub fn open(dir: &Path, config_hash: &str) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("manifest.json");
        let inner = if path.exists() {
            let file: ManifestFile =
                serde_json::from_str(&std::fs::read_to_string(&path)?)
                    .map_err(|e| Error::format(format!("manifest: {e}")))?;
            if file.config_hash != config_hash {
                return Err(Error::config(format!(
                    "output dir holds a run with config hash {} (this config: {config_hash}); \
                     use a fresh out_dir",
                    file.config_hash
                )));
            }
            file
        } else {
            ManifestFile {
                format_version: crate::io::FORMAT_VERSION,
                config_hash: config_hash.to_string(),
                cells: BTreeMap::new(),
                notes: BTreeMap::new(),
            }
        };
        Ok(RunManifest { path, inner: Mutex::new(inner) })
    }

    fn flush(&self, inner: &ManifestFile) -> Result<()> {
        let tmp = self.path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(inner).unwrap())?;
        std::fs::rename(&tmp, &self.path)?;
        Ok(())
    }

    pub fn is_done(&self, cell: &str) -> bool {
        matches!(
            self.inner.lock().unwrap().cells.get(cell),
            Some(CellStatus::Done { .. })
        )
    }

    pub fn mark_done(&self, cell: &str) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        inner.cells.insert(cell.to_string(), CellStatus::Done { unix_time: now() });
        self.flush(&inner)
    }

    pub fn mark_failed(&self, cell: &str, reason: &str) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        inner.cells.insert(
            cell.to_string(),
            CellStatus::Failed { reason: reason.to_string(), unix_time: now() },
        );
        self.flush(&inner)
    }

    pub fn mark_skipped(&self, cell: &str, reason: &str) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        inner
            .cells
            .insert(cell.to_string(), CellStatus::Skipped { reason: reason.to_string() });
        self.flush(&inner)
    }

    pub fn note(&self, key: &str, value: &str) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        inner.notes.insert(key.to_string(), value.to_string());
        self.flush(&inner)
    }

    pub fn failed_cells(&self) -> Vec<(String, String)> {
        self.inner
            .lock()
            .unwrap()
            .cells
            .iter()
            .filter_map(|(k, v)| match v {
                CellStatus::Failed { reason, .. } => Some((k.clone(), reason.clone())),
                _ => None,
            })
            .collect()
    }

    pub fn cell_count(&self) -> usize {
        self.inner.lock().unwrap().cells.len()
    }
}
