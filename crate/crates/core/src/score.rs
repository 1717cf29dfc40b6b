//! Append-only score tables: one record per (sae, variant, train seed,
//! snapshot, metric, hyperparameter, task seed) cell, persisted as
//! newline-delimited JSON with a canonical sort on finalization.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variant labels that mark degraded controls and the oracle; every other
/// variant is a trained SAE.
pub const CONTROL_VARIANTS: [&str; 4] =
    ["random_init", "random_l0_matched", "permuted_decoder", "oracle"];

pub fn is_control_variant(variant: &str) -> bool {
    CONTROL_VARIANTS.contains(&variant)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sae_id: String,
    pub variant: String,
    pub train_seed: u64,
    pub snapshot_samples: u64,
    pub metric_id: String,
    pub hparam: Option<i64>,
    pub task_seed: u64,
    pub value: f64,
    pub higher_is_better: bool,
}

impl ScoreRecord {
    pub fn key(&self) -> String {
        format!(
            "{}\u{1}{}\u{1}{}\u{1}{}\u{1}{}\u{1}{}\u{1}{}",
            self.sae_id,
            self.variant,
            self.train_seed,
            self.snapshot_samples,
            self.metric_id,
            self.hparam.map(|h| h.to_string()).unwrap_or_default(),
            self.task_seed
        )
    }

    fn sort_key(&self) -> (String, Option<i64>, String, String, u64, u64, u64) {
        (
            self.metric_id.clone(),
            self.hparam,
            self.variant.clone(),
            self.sae_id.clone(),
            self.train_seed,
            self.snapshot_samples,
            self.task_seed,
        )
    }
}

#[derive(Debug, Default)]
pub struct ScoreTable {
    records: Vec<ScoreRecord>,
    keys: HashSet<String>,
}

impl ScoreTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: ScoreRecord) -> Result<()> {
        if !record.value.is_finite() {
            return Err(Error::input(format!(
                "non-finite score for {} / {}",
                record.sae_id, record.metric_id
            )));
        }
        if !self.keys.insert(record.key()) {
            return Err(Error::input(format!("duplicate score key: {}", record.key())));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn extend(&mut self, records: impl IntoIterator<Item = ScoreRecord>) -> Result<()> {
        for r in records {
            self.push(r)?;
        }
        Ok(())
    }

    pub fn records(&self) -> &[ScoreRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Canonical order: metric, hparam, variant, sae, train seed, snapshot,
    /// task seed.
    pub fn canonicalize(&mut self) {
        self.records.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    }

    pub fn save_jsonl(&mut self, path: &Path) -> Result<()> {
        self.canonicalize();
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut f = fs::File::create(path)?;
        for r in &self.records {
            writeln!(f, "{}", serde_json::to_string(r).unwrap())?;
        }
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let f = fs::File::open(path)?;
        let mut table = ScoreTable::new();
        for line in BufReader::new(f).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ScoreRecord = serde_json::from_str(&line)
                .map_err(|e| Error::format(format!("score record: {e}")))?;
            table.push(rec)?;
        }
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(metric: &str, value: f64) -> ScoreRecord {
        ScoreRecord {
            sae_id: "sae0".into(),
            variant: "batchtopk-k16".into(),
            train_seed: 0,
            snapshot_samples: 1000,
            metric_id: metric.into(),
            hparam: Some(10),
            task_seed: 1,
            value,
            higher_is_better: true,
        }
    }

    #[test]
    fn duplicate_keys_rejected() {
        let mut t = ScoreTable::new();
        t.push(rec("scr", 0.5)).unwrap();
        assert!(t.push(rec("scr", 0.6)).is_err());
        t.push(rec("tpp", 0.2)).unwrap();
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn non_finite_rejected() {
        let mut t = ScoreTable::new();
        assert!(t.push(rec("scr", f64::NAN)).is_err());
    }

    #[test]
    fn jsonl_roundtrip_canonical_bytes() {
        let mut t = ScoreTable::new();
        t.push(rec("tpp", 0.25)).unwrap();
        t.push(rec("scr", 0.5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.jsonl");
        let p2 = dir.path().join("b.jsonl");
        t.save_jsonl(&p1).unwrap();
        let mut loaded = ScoreTable::load_jsonl(&p1).unwrap();
        loaded.save_jsonl(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        // Insertion order never leaks into the file.
        let mut t2 = ScoreTable::new();
        t2.push(rec("scr", 0.5)).unwrap();
        t2.push(rec("tpp", 0.25)).unwrap();
        let p3 = dir.path().join("c.jsonl");
        t2.save_jsonl(&p3).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p3).unwrap());
    }
}
