//! Task-suite persistence: a manifest plus one JSONL record per task, so a
//! pinned suite can be re-run against new SAEs. Pool samples are regenerated
//! from the stored pool seed; labels are recomputed from the expressions.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthgen::{sample_batch, FeatureModel};

use super::{
    BoolExpr, ExprShape, ProbingCategory, ProbingTask, ScrPair, TaskGenParams, TaskPool,
    TaskSuite, TppGroup, TppScope, SCR_CELLS,
};

#[derive(Serialize, Deserialize)]
struct SuiteManifest {
    format_version: u32,
    model_fingerprint: String,
    d_sae: usize,
    seed: u64,
    pool_seed: u64,
    pool_size: usize,
    params: TaskGenParams,
}

#[derive(Serialize, Deserialize)]
struct ProbingRecord {
    category: String,
    expr: String,
    train: Vec<u32>,
    test: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct TppRecord {
    scope: String,
    siblings: [usize; 4],
    per_sibling: usize,
    train: Vec<u32>,
    train_class: Vec<u8>,
    test: Vec<u32>,
    test_class: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct ScrRecord {
    t: String,
    s: String,
    structure: [String; 2],
    cells_train: [Vec<u32>; SCR_CELLS],
    cells_test: [Vec<u32>; SCR_CELLS],
}

pub fn save_suite(suite: &TaskSuite, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = SuiteManifest {
        format_version: crate::io::FORMAT_VERSION,
        model_fingerprint: suite.model_fingerprint.clone(),
        d_sae: suite.d_sae,
        seed: suite.seed,
        pool_seed: suite.pool_seed,
        pool_size: suite.pool_size,
        params: suite.params,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string(&manifest).unwrap())?;

    let mut f = fs::File::create(dir.join("probing.jsonl"))?;
    for task in &suite.probing {
        let rec = ProbingRecord {
            category: task.category.label().to_string(),
            expr: task.expr.to_text(),
            train: task.train_idx.clone(),
            test: task.test_idx.clone(),
        };
        writeln!(f, "{}", serde_json::to_string(&rec).unwrap())?;
    }

    let mut f = fs::File::create(dir.join("tpp.jsonl"))?;
    for group in &suite.tpp {
        let rec = TppRecord {
            scope: group.scope.label().to_string(),
            siblings: group.siblings,
            per_sibling: group.per_sibling,
            train: group.train_idx.clone(),
            train_class: group.train_class.clone(),
            test: group.test_idx.clone(),
            test_class: group.test_class.clone(),
        };
        writeln!(f, "{}", serde_json::to_string(&rec).unwrap())?;
    }

    let mut f = fs::File::create(dir.join("scr.jsonl"))?;
    for pair in &suite.scr {
        let rec = ScrRecord {
            t: pair.t_expr.to_text(),
            s: pair.s_expr.to_text(),
            structure: [
                pair.structure.0.label().to_string(),
                pair.structure.1.label().to_string(),
            ],
            cells_train: pair.cells_train.clone(),
            cells_test: pair.cells_test.clone(),
        };
        writeln!(f, "{}", serde_json::to_string(&rec).unwrap())?;
    }
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(line);
        }
    }
    Ok(out)
}

fn parse_shape(s: &str) -> Result<ExprShape> {
    match s {
        "single" => Ok(ExprShape::Single),
        "or" => Ok(ExprShape::Or),
        other => Err(Error::format(format!("unknown SCR structure `{other}`"))),
    }
}

/// Load a pinned suite and regenerate its pool from the recorded seed.
/// The model must match the fingerprint recorded at generation time.
pub fn load_suite(dir: &Path, model: &FeatureModel) -> Result<(TaskSuite, TaskPool)> {
    let manifest: SuiteManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)
            .map_err(|e| Error::format(format!("suite manifest: {e}")))?;
    if manifest.format_version != crate::io::FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported suite format version {}",
            manifest.format_version
        )));
    }
    if manifest.model_fingerprint != model.fingerprint() {
        return Err(Error::format("suite was generated for a different model"));
    }
    let batch = sample_batch(model, manifest.pool_size, manifest.pool_seed)?;
    let pool = TaskPool { batch, seed: manifest.seed, pool_seed: manifest.pool_seed };

    let mut probing = Vec::new();
    for line in read_lines(&dir.join("probing.jsonl"))? {
        let rec: ProbingRecord =
            serde_json::from_str(&line).map_err(|e| Error::format(format!("probing: {e}")))?;
        let category = ProbingCategory::parse(&rec.category)
            .ok_or_else(|| Error::format(format!("unknown category `{}`", rec.category)))?;
        let expr = BoolExpr::parse(&rec.expr)?;
        let labels_of = |idx: &[u32]| -> Vec<bool> {
            idx.iter()
                .map(|&i| expr.eval(&|f| pool.batch.fires(i as usize, f)))
                .collect()
        };
        let train_labels = labels_of(&rec.train);
        let test_labels = labels_of(&rec.test);
        probing.push(ProbingTask {
            category,
            expr,
            train_idx: rec.train,
            train_labels,
            test_idx: rec.test,
            test_labels,
        });
    }

    let mut tpp = Vec::new();
    for line in read_lines(&dir.join("tpp.jsonl"))? {
        let rec: TppRecord =
            serde_json::from_str(&line).map_err(|e| Error::format(format!("tpp: {e}")))?;
        let scope = match rec.scope.as_str() {
            "in" => TppScope::In,
            "out" => TppScope::Out,
            other => return Err(Error::format(format!("unknown TPP scope `{other}`"))),
        };
        tpp.push(TppGroup {
            scope,
            siblings: rec.siblings,
            per_sibling: rec.per_sibling,
            train_idx: rec.train,
            train_class: rec.train_class,
            test_idx: rec.test,
            test_class: rec.test_class,
        });
    }

    let mut scr = Vec::new();
    for line in read_lines(&dir.join("scr.jsonl"))? {
        let rec: ScrRecord =
            serde_json::from_str(&line).map_err(|e| Error::format(format!("scr: {e}")))?;
        scr.push(ScrPair {
            t_expr: BoolExpr::parse(&rec.t)?,
            s_expr: BoolExpr::parse(&rec.s)?,
            structure: (parse_shape(&rec.structure[0])?, parse_shape(&rec.structure[1])?),
            cells_train: rec.cells_train,
            cells_test: rec.cells_test,
        });
    }

    let suite = TaskSuite {
        model_fingerprint: manifest.model_fingerprint,
        d_sae: manifest.d_sae,
        seed: manifest.seed,
        pool_seed: manifest.pool_seed,
        pool_size: manifest.pool_size,
        params: manifest.params,
        probing,
        tpp,
        scr,
    };
    Ok((suite, pool))
}
