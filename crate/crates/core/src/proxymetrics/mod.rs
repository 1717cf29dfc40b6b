//! Synthetic task suites and the three probe-based proxy metrics:
//! sparse probing, TPP, and SCR.

mod expr;
mod eval;
mod gen;
mod suite;

pub use eval::{encode_pool, eval_scr, eval_scr_sweep, eval_sparse_probing, eval_tpp, eval_tpp_sweep, EncodedPool};
pub use expr::BoolExpr;
pub use gen::{gen_probing_tasks, gen_scr_pairs, gen_tpp_groups, generate_suite};
pub use suite::{load_suite, save_suite};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rng;
use crate::synthgen::{sample_batch, ActivationBatch, FeatureModel};

/// Hyperparameter sweeps mirrored from the benchmark defaults.
pub const SPARSE_PROBING_KS: [usize; 3] = [1, 4, 16];
pub const TOPN_SWEEP: [usize; 7] = [2, 5, 10, 20, 50, 100, 500];

/// Shared activation pool all tasks of one generation seed subset from.
#[derive(Debug)]
pub struct TaskPool {
    pub batch: ActivationBatch,
    pub seed: u64,
    pub pool_seed: u64,
}

/// Draw the per-seed pool (default 60,000 activations).
pub fn draw_pool(model: &FeatureModel, seed: u64, size: usize) -> Result<TaskPool> {
    use rand::Rng;
    let pool_seed = rng::stream("task-pool", seed, &[]).gen::<u64>();
    let batch = sample_batch(model, size, pool_seed)?;
    Ok(TaskPool { batch, seed, pool_seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbingCategory {
    SingleIn,
    SingleOut,
    BoolIn,
    BoolOut,
    BoolMixed,
}

impl ProbingCategory {
    pub const ALL: [ProbingCategory; 5] = [
        ProbingCategory::SingleIn,
        ProbingCategory::SingleOut,
        ProbingCategory::BoolIn,
        ProbingCategory::BoolOut,
        ProbingCategory::BoolMixed,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            ProbingCategory::SingleIn => "single_in",
            ProbingCategory::SingleOut => "single_out",
            ProbingCategory::BoolIn => "bool_in",
            ProbingCategory::BoolOut => "bool_out",
            ProbingCategory::BoolMixed => "bool_mixed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.label() == s)
    }
}

/// One binary probing task: expression, balanced train/test pool indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbingTask {
    pub category: ProbingCategory,
    pub expr: BoolExpr,
    pub train_idx: Vec<u32>,
    pub train_labels: Vec<bool>,
    pub test_idx: Vec<u32>,
    pub test_labels: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TppScope {
    In,
    Out,
}

impl TppScope {
    pub fn label(&self) -> &'static str {
        match self {
            TppScope::In => "in",
            TppScope::Out => "out",
        }
    }
}

/// A four-sibling group at depth 3 with balanced per-sibling samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TppGroup {
    pub scope: TppScope,
    pub siblings: [usize; 4],
    pub per_sibling: usize,
    pub train_idx: Vec<u32>,
    /// Class = position of the firing sibling (0..4), aligned with train_idx.
    pub train_class: Vec<u8>,
    pub test_idx: Vec<u32>,
    pub test_class: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExprShape {
    Single,
    Or,
}

impl ExprShape {
    pub fn label(&self) -> &'static str {
        match self {
            ExprShape::Single => "single",
            ExprShape::Or => "or",
        }
    }
}

/// Contingency cells in fixed order: (T&S, T&!S, !T&S, !T&!S).
pub const SCR_CELLS: usize = 4;

/// One SCR (T, S) pair with per-cell balanced train/test pool indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ScrPair {
    pub t_expr: BoolExpr,
    pub s_expr: BoolExpr,
    pub structure: (ExprShape, ExprShape),
    pub cells_train: [Vec<u32>; SCR_CELLS],
    pub cells_test: [Vec<u32>; SCR_CELLS],
}

/// All tasks drawn for one (model, d_sae, seed).
#[derive(Debug)]
pub struct TaskSuite {
    pub model_fingerprint: String,
    pub d_sae: usize,
    pub seed: u64,
    pub pool_seed: u64,
    pub pool_size: usize,
    pub params: TaskGenParams,
    pub probing: Vec<ProbingTask>,
    pub tpp: Vec<TppGroup>,
    pub scr: Vec<ScrPair>,
}

/// Generation knobs; every field is a config key.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskGenParams {
    pub pool_size: usize,
    /// Per-category task counts: single_in, single_out, bool_in, bool_out,
    /// bool_mixed.
    pub probing_counts: [usize; 5],
    /// Probability a boolean task uses three leaves instead of two.
    pub three_leaf_prob: f64,
    /// Minimum pool positives for a feature to be a task leaf.
    pub leaf_min_positives: usize,
    pub train_cap_per_class: usize,
    pub test_cap_per_class: usize,
    pub tpp_groups_per_scope: usize,
    pub tpp_per_sibling_cap: usize,
    pub tpp_min_per_sibling: usize,
    pub scr_per_structure: usize,
    pub scr_attempts: usize,
    pub scr_cell_min: usize,
    pub scr_cell_cap: usize,
    /// SCR leaves need enough positives for the joint cells to be feasible.
    pub scr_leaf_min_positives: usize,
    /// Pairs whose oracle-minus-biased gap is below this are skipped.
    pub scr_min_gap: f64,
}

impl Default for TaskGenParams {
    fn default() -> Self {
        TaskGenParams {
            pool_size: 60_000,
            probing_counts: [20, 20, 20, 16, 16],
            three_leaf_prob: 0.5,
            leaf_min_positives: 150,
            train_cap_per_class: 512,
            test_cap_per_class: 1500,
            tpp_groups_per_scope: 30,
            tpp_per_sibling_cap: 2000,
            tpp_min_per_sibling: 20,
            scr_per_structure: 3,
            scr_attempts: 15,
            scr_cell_min: 100,
            scr_cell_cap: 1500,
            scr_leaf_min_positives: 1500,
            scr_min_gap: 0.02,
        }
    }
}
