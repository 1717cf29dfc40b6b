//! Synthetic feature model and ground-truth-labelled activation sampling.
//!
//! A [`FeatureModel`] holds a dictionary of unit-norm feature directions, a
//! forest of mutually-exclusive-children hierarchies over a prefix of the
//! dictionary, per-feature firing probabilities, and rectified-Gaussian
//! magnitude parameters. [`sample_batch`] draws activations `x = D^T c + b`
//! together with the firing pattern and magnitudes that produced them.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

/// Shape of the hierarchy forest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchySpec {
    pub num_trees: usize,
    pub branching: usize,
    pub depth: usize,
    pub num_nonhier: usize,
}

impl Default for HierarchySpec {
    fn default() -> Self {
        // Desk-scale "mini-16k": 16 trees x 85 nodes + 688 non-hierarchical = 2,048.
        HierarchySpec { num_trees: 16, branching: 4, depth: 3, num_nonhier: 688 }
    }
}

impl HierarchySpec {
    /// Nodes per tree: sum of branching^l over levels 0..=depth.
    pub fn tree_size(&self) -> usize {
        let mut total = 0usize;
        let mut level = 1usize;
        for _ in 0..=self.depth {
            total += level;
            level *= self.branching;
        }
        total
    }

    pub fn num_hierarchical(&self) -> usize {
        self.num_trees * self.tree_size()
    }

    pub fn total_features(&self) -> usize {
        self.num_hierarchical() + self.num_nonhier
    }

    pub fn validate(&self) -> Result<()> {
        if self.branching < 2 {
            return Err(Error::config(format!("branching must be >= 2, got {}", self.branching)));
        }
        if self.depth < 1 {
            return Err(Error::config(format!("depth must be >= 1, got {}", self.depth)));
        }
        if self.num_trees < 1 {
            return Err(Error::config("num_trees must be >= 1"));
        }
        Ok(())
    }
}

/// Ledger parameters of the generator; every one is a config key.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    /// Zipf exponent for root / non-hierarchical firing probabilities.
    pub zipf_alpha: f64,
    /// Firing probability of the rank-0 feature.
    pub zipf_p_max: f64,
    /// Probability that a firing parent activates exactly one child.
    pub q_child: f64,
    /// Rectified-Gaussian magnitude mean.
    pub mag_mean: f64,
    /// Rectified-Gaussian magnitude std.
    pub mag_std: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            zipf_alpha: 0.45,
            zipf_p_max: 0.2,
            q_child: 0.8,
            mag_mean: 1.0,
            mag_std: 0.25,
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.zipf_p_max > 0.0 && self.zipf_p_max <= 1.0) {
            return Err(Error::config("zipf_p_max must lie in (0, 1]"));
        }
        if self.zipf_alpha < 0.0 {
            return Err(Error::config("zipf_alpha must be >= 0"));
        }
        if !(self.q_child > 0.0 && self.q_child <= 1.0) {
            return Err(Error::config("q_child must lie in (0, 1]"));
        }
        if self.mag_std < 0.0 {
            return Err(Error::config("mag_std must be >= 0"));
        }
        Ok(())
    }
}

/// Base-model variations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VariationKind {
    RelP05,
    RelP15,
    Std25,
}

impl VariationKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rel-p-0.5" => Ok(VariationKind::RelP05),
            "rel-p-1.5" => Ok(VariationKind::RelP15),
            "std-2.5" => Ok(VariationKind::Std25),
            other => Err(Error::config(format!("unknown variation kind `{other}`"))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            VariationKind::RelP05 => "rel-p-0.5",
            VariationKind::RelP15 => "rel-p-1.5",
            VariationKind::Std25 => "std-2.5",
        }
    }
}

/// The synthetic generator: dictionary, hierarchy forest, firing statistics.
#[derive(Debug, Clone)]
pub struct FeatureModel {
    pub dim: usize,
    pub num_features: usize,
    /// F x D, unit-norm rows.
    pub directions: Array2<f32>,
    pub parent: Vec<Option<u32>>,
    pub children: Vec<Vec<u32>>,
    /// Index of each feature's level-0 root (self for non-hierarchical).
    pub root_of: Vec<u32>,
    /// Marginal probability for roots and non-hierarchical features;
    /// conditional-given-parent probability for children.
    pub firing_prob: Vec<f64>,
    pub mag_mean: Vec<f64>,
    pub mag_std: Vec<f64>,
    pub bias: Array1<f32>,
    pub spec: HierarchySpec,
    pub params: GeneratorParams,
    pub seed: u64,
    /// Applied variation labels, in order.
    pub variations: Vec<String>,
}

impl FeatureModel {
    pub fn depth_of(&self, feature: usize) -> usize {
        let mut d = 0;
        let mut f = feature;
        while let Some(p) = self.parent[f] {
            d += 1;
            f = p as usize;
        }
        d
    }

    pub fn is_hierarchical(&self, feature: usize) -> bool {
        feature < self.spec.num_hierarchical()
    }

    /// Content fingerprint used to tie batches and task suites to a model.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.spec).unwrap());
        hasher.update(serde_json::to_vec(&self.params).unwrap());
        hasher.update(self.seed.to_le_bytes());
        hasher.update((self.dim as u64).to_le_bytes());
        for v in &self.variations {
            hasher.update(v.as_bytes());
        }
        for x in self.directions.iter() {
            hasher.update(x.to_le_bytes());
        }
        for p in &self.firing_prob {
            hasher.update(p.to_le_bytes());
        }
        for (m, s) in self.mag_mean.iter().zip(&self.mag_std) {
            hasher.update(m.to_le_bytes());
            hasher.update(s.to_le_bytes());
        }
        for b in self.bias.iter() {
            hasher.update(b.to_le_bytes());
        }
        hex_string(&hasher.finalize())
    }

    /// Expected number of simultaneously-firing features, from the model's
    /// own probabilities (marginals for roots/non-hier, propagated through
    /// the conditional child rule for the forest).
    pub fn expected_l0(&self) -> f64 {
        let mut marginal = vec![0.0f64; self.num_features];
        for f in 0..self.num_features {
            match self.parent[f] {
                None => marginal[f] = self.firing_prob[f],
                Some(p) => marginal[f] = marginal[p as usize] * self.firing_prob[f],
            }
        }
        marginal.iter().sum()
    }
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Build the feature model deterministically from `(spec, dim, seed)`.
///
/// Trees are laid out breadth-first in a contiguous low-index block followed
/// by the non-hierarchical features; roots and non-hierarchical features get
/// Zipf-decaying marginal firing probabilities in that order, children get
/// the uniform conditional probability `q_child / branching`.
pub fn build_model(
    spec: HierarchySpec,
    dim: usize,
    seed: u64,
    params: GeneratorParams,
) -> Result<FeatureModel> {
    spec.validate()?;
    params.validate()?;
    if dim < 8 {
        return Err(Error::config(format!("dim must be >= 8, got {dim}")));
    }

    let num_features = spec.total_features();
    let tree_size = spec.tree_size();
    let num_hier = spec.num_hierarchical();

    let mut parent: Vec<Option<u32>> = vec![None; num_features];
    let mut children: Vec<Vec<u32>> = vec![Vec::new(); num_features];
    let mut root_of: Vec<u32> = (0..num_features as u32).collect();

    for t in 0..spec.num_trees {
        let base = t * tree_size;
        // Per-level offsets within the tree, breadth-first.
        let mut level_start = base;
        let mut level_count = 1usize;
        for _level in 0..spec.depth {
            let next_start = level_start + level_count;
            for (i, node) in (level_start..level_start + level_count).enumerate() {
                for c in 0..spec.branching {
                    let child = next_start + i * spec.branching + c;
                    parent[child] = Some(node as u32);
                    children[node].push(child as u32);
                    root_of[child] = base as u32;
                }
            }
            root_of[base] = base as u32;
            level_start = next_start;
            level_count *= spec.branching;
        }
    }

    // Zipf ranks: roots first (by tree order), then non-hierarchical features.
    let mut firing_prob = vec![0.0f64; num_features];
    for t in 0..spec.num_trees {
        let rank = t as f64;
        firing_prob[t * tree_size] = params.zipf_p_max / (1.0 + rank).powf(params.zipf_alpha);
    }
    for j in 0..spec.num_nonhier {
        let rank = (spec.num_trees + j) as f64;
        firing_prob[num_hier + j] = params.zipf_p_max / (1.0 + rank).powf(params.zipf_alpha);
    }
    let child_cond = params.q_child / spec.branching as f64;
    for f in 0..num_features {
        if parent[f].is_some() {
            firing_prob[f] = child_cond;
        }
    }

    let mut gen_rng = rng::stream("model", seed, &[]);
    let mut directions = Array2::<f32>::zeros((num_features, dim));
    for mut row in directions.rows_mut() {
        loop {
            let mut norm_sq = 0.0f64;
            for v in row.iter_mut() {
                let g: f64 = StandardNormal.sample(&mut gen_rng);
                *v = g as f32;
                norm_sq += g * g;
            }
            if norm_sq > 1e-12 {
                let inv = 1.0 / norm_sq.sqrt();
                for v in row.iter_mut() {
                    *v = (*v as f64 * inv) as f32;
                }
                break;
            }
        }
    }

    Ok(FeatureModel {
        dim,
        num_features,
        directions,
        parent,
        children,
        root_of,
        firing_prob,
        mag_mean: vec![params.mag_mean; num_features],
        mag_std: vec![params.mag_std; num_features],
        bias: Array1::zeros(dim),
        spec,
        params,
        seed,
        variations: Vec::new(),
    })
}

/// Apply one of the published base-model variations, leaving directions,
/// hierarchy, and bias unchanged.
pub fn apply_variation(model: &FeatureModel, kind: VariationKind) -> FeatureModel {
    let mut out = model.clone();
    match kind {
        VariationKind::RelP05 | VariationKind::RelP15 => {
            let factor = if kind == VariationKind::RelP05 { 0.5 } else { 1.5 };
            for p in &mut out.firing_prob {
                *p = (*p * factor).min(1.0);
            }
        }
        VariationKind::Std25 => {
            for s in &mut out.mag_std {
                *s *= 2.5;
            }
        }
    }
    out.variations.push(kind.label().to_string());
    out
}

/// Activations with their generating firing pattern and magnitudes.
///
/// The firing pattern and magnitudes are stored sparsely: feature `f` fired
/// in sample `i` (z = 1) iff it appears in that row's active list; its
/// magnitude is the stored value (>= 0; a rectified draw may clip to 0).
#[derive(Debug, Clone)]
pub struct ActivationBatch {
    /// N x D activations.
    pub x: Array2<f32>,
    /// Row offsets into the active lists, length N + 1.
    pub offsets: Vec<u64>,
    /// Feature indices of active entries, ascending within each row.
    pub active_feat: Vec<u32>,
    /// Magnitudes of active entries.
    pub active_mag: Vec<f32>,
    pub seed: u64,
    pub model_fingerprint: String,
}

impl ActivationBatch {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Active features and magnitudes of row `i`.
    pub fn actives(&self, i: usize) -> (&[u32], &[f32]) {
        let a = self.offsets[i] as usize;
        let b = self.offsets[i + 1] as usize;
        (&self.active_feat[a..b], &self.active_mag[a..b])
    }

    /// Whether feature `f` fired (z = 1) in row `i`.
    pub fn z(&self, i: usize, f: usize) -> bool {
        self.actives(i).0.binary_search(&(f as u32)).is_ok()
    }

    /// Whether feature `f` fired with positive magnitude in row `i`.
    ///
    /// This is the firing indicator used by every evaluation: a rectified
    /// magnitude draw can clip to exactly 0, in which case the feature left
    /// no trace in `x` and no encoder could ever detect it.
    pub fn fires(&self, i: usize, f: usize) -> bool {
        let (feats, mags) = self.actives(i);
        match feats.binary_search(&(f as u32)) {
            Ok(pos) => mags[pos] > 0.0,
            Err(_) => false,
        }
    }

    /// Magnitude c of feature `f` in row `i` (0 when not firing).
    pub fn magnitude(&self, i: usize, f: usize) -> f32 {
        let (feats, mags) = self.actives(i);
        match feats.binary_search(&(f as u32)) {
            Ok(pos) => mags[pos],
            Err(_) => 0.0,
        }
    }

    /// Dense magnitudes of the first `cols` features, N x cols.
    pub fn magnitudes_dense(&self, cols: usize) -> Array2<f32> {
        let mut out = Array2::zeros((self.len(), cols));
        for i in 0..self.len() {
            let (feats, mags) = self.actives(i);
            for (&f, &m) in feats.iter().zip(mags) {
                let f = f as usize;
                if f < cols {
                    out[(i, f)] = m;
                }
            }
        }
        out
    }

    /// Per-feature count of rows where the feature fires (positive magnitude).
    pub fn firing_counts(&self, num_features: usize) -> Vec<u32> {
        let mut counts = vec![0u32; num_features];
        for (&f, &m) in self.active_feat.iter().zip(&self.active_mag) {
            if m > 0.0 {
                counts[f as usize] += 1;
            }
        }
        counts
    }

    /// Mean number of firing features per row.
    pub fn mean_l0(&self) -> f64 {
        let firing = self.active_mag.iter().filter(|&&m| m > 0.0).count();
        firing as f64 / self.len() as f64
    }
}

/// Sample `n` independent activations, deterministic in `(model, n, seed)`.
pub fn sample_batch(model: &FeatureModel, n: usize, seed: u64) -> Result<ActivationBatch> {
    if n < 1 {
        return Err(Error::input("batch size must be >= 1"));
    }
    let mut g = rng::stream("batch", seed, &[]);
    let dim = model.dim;
    let tree_size = model.spec.tree_size();

    let mut x = Array2::<f32>::zeros((n, dim));
    let mut offsets = Vec::with_capacity(n + 1);
    let mut active_feat: Vec<u32> = Vec::new();
    let mut active_mag: Vec<f32> = Vec::new();
    offsets.push(0u64);

    let mut row_acc = vec![0.0f64; dim];
    for i in 0..n {
        let row_start = active_feat.len();

        // Hierarchical block: roots fire on their marginal, then each firing
        // node activates at most one child per the conditional probabilities.
        for t in 0..model.spec.num_trees {
            let root = t * tree_size;
            if g.gen::<f64>() >= model.firing_prob[root] {
                continue;
            }
            active_feat.push(root as u32);
            let mut node = root;
            loop {
                let kids = &model.children[node];
                if kids.is_empty() {
                    break;
                }
                // One draw per sibling group: exactly one child fires with
                // probability equal to the (clamped) sum of conditionals.
                let total: f64 = kids.iter().map(|&c| model.firing_prob[c as usize]).sum();
                let total_c = total.min(1.0);
                let u: f64 = g.gen();
                if u >= total_c {
                    break;
                }
                let scale = if total > 1.0 { total_c / total } else { 1.0 };
                let mut acc = 0.0;
                let mut chosen = kids[kids.len() - 1];
                for &c in kids {
                    acc += model.firing_prob[c as usize] * scale;
                    if u < acc {
                        chosen = c;
                        break;
                    }
                }
                active_feat.push(chosen);
                node = chosen as usize;
            }
        }

        // Non-hierarchical features fire independently.
        let num_hier = model.spec.num_hierarchical();
        for f in num_hier..model.num_features {
            if g.gen::<f64>() < model.firing_prob[f] {
                active_feat.push(f as u32);
            }
        }

        // Rectified-Gaussian magnitudes for the active set.
        row_acc.iter_mut().for_each(|v| *v = 0.0);
        for idx in row_start..active_feat.len() {
            let f = active_feat[idx] as usize;
            let eps: f64 = StandardNormal.sample(&mut g);
            let c = (model.mag_mean[f] + model.mag_std[f] * eps).max(0.0);
            let c32 = c as f32;
            active_mag.push(c32);
            if c32 > 0.0 {
                let dir = model.directions.row(f);
                for (acc, &d) in row_acc.iter_mut().zip(dir.iter()) {
                    *acc += c32 as f64 * d as f64;
                }
            }
        }
        for (out, (&acc, &b)) in
            x.row_mut(i).iter_mut().zip(row_acc.iter().zip(model.bias.iter()))
        {
            *out = (acc + b as f64) as f32;
        }
        offsets.push(active_feat.len() as u64);
    }

    Ok(ActivationBatch {
        x,
        offsets,
        active_feat,
        active_mag,
        seed,
        model_fingerprint: model.fingerprint(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_spec() -> HierarchySpec {
        HierarchySpec { num_trees: 2, branching: 2, depth: 2, num_nonhier: 5 }
    }

    #[test]
    fn tree_size_matches_paper_model() {
        let spec = HierarchySpec { num_trees: 128, branching: 4, depth: 3, num_nonhier: 5504 };
        assert_eq!(spec.tree_size(), 85);
        assert_eq!(spec.num_hierarchical(), 10_880);
        assert_eq!(spec.total_features(), 16_384);
    }

    #[test]
    fn mini_model_has_2048_features() {
        let spec = HierarchySpec::default();
        assert_eq!(spec.total_features(), 2048);
        assert_eq!(spec.num_hierarchical(), 1360);
    }

    #[test]
    fn smallest_forest() {
        let spec = HierarchySpec { num_trees: 1, branching: 2, depth: 1, num_nonhier: 0 };
        let m = build_model(spec, 8, 0, GeneratorParams::default()).unwrap();
        assert_eq!(m.num_features, 3);
        assert_eq!(m.parent[0], None);
        assert_eq!(m.parent[1], Some(0));
        assert_eq!(m.parent[2], Some(0));
        assert_eq!(m.children[0], vec![1, 2]);
    }

    #[test]
    fn dim_too_small_rejected() {
        let err = build_model(small_spec(), 4, 0, GeneratorParams::default());
        assert!(err.is_err());
    }

    #[test]
    fn invalid_spec_rejected() {
        let spec = HierarchySpec { num_trees: 1, branching: 1, depth: 1, num_nonhier: 0 };
        assert!(build_model(spec, 8, 0, GeneratorParams::default()).is_err());
    }

    #[test]
    fn directions_unit_norm_and_zipf_monotone() {
        let spec = HierarchySpec { num_trees: 16, branching: 4, depth: 3, num_nonhier: 688 };
        let m = build_model(spec, 128, 3, GeneratorParams::default()).unwrap();
        assert_eq!(m.num_features, 2048);
        for row in m.directions.rows() {
            let norm: f64 = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-6);
        }
        // firing_prob non-increasing across (roots, non-hier) in index order.
        let ts = spec.tree_size();
        let mut ordered: Vec<f64> = (0..spec.num_trees).map(|t| m.firing_prob[t * ts]).collect();
        ordered.extend((0..spec.num_nonhier).map(|j| m.firing_prob[spec.num_hierarchical() + j]));
        for w in ordered.windows(2) {
            assert!(w[0] >= w[1]);
        }
        for &p in &m.firing_prob {
            assert!(p > 0.0 && p <= 1.0);
        }
    }

    #[test]
    fn hierarchy_is_consistent_forest() {
        let m = build_model(small_spec(), 16, 1, GeneratorParams::default()).unwrap();
        for f in 0..m.num_features {
            if let Some(p) = m.parent[f] {
                assert!(m.children[p as usize].contains(&(f as u32)));
                assert_eq!(m.root_of[f], m.root_of[p as usize]);
            } else {
                assert_eq!(m.root_of[f], f as u32);
            }
            assert!(m.depth_of(f) <= m.spec.depth);
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_model(small_spec(), 16, 9, GeneratorParams::default()).unwrap();
        let b = build_model(small_spec(), 16, 9, GeneratorParams::default()).unwrap();
        assert_eq!(a.directions, b.directions);
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = build_model(small_spec(), 16, 10, GeneratorParams::default()).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn nothing_fires_when_probabilities_zero() {
        let mut m = build_model(small_spec(), 16, 2, GeneratorParams::default()).unwrap();
        for p in &mut m.firing_prob {
            *p = 1e-300; // firing_prob must stay > 0; this never fires in practice
        }
        let b = sample_batch(&m, 50, 11).unwrap();
        assert_eq!(b.active_feat.len(), 0);
        for i in 0..b.len() {
            for (j, &v) in b.x.row(i).iter().enumerate() {
                assert_eq!(v, m.bias[j]);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let m = build_model(small_spec(), 16, 2, GeneratorParams::default()).unwrap();
        let a = sample_batch(&m, 64, 5).unwrap();
        let b = sample_batch(&m, 64, 5).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.active_feat, b.active_feat);
        assert_eq!(a.active_mag, b.active_mag);
        let c = sample_batch(&m, 64, 6).unwrap();
        assert_ne!(a.active_feat, c.active_feat);
    }

    #[test]
    fn hierarchy_constraints_hold_on_samples() {
        let m = build_model(
            HierarchySpec { num_trees: 4, branching: 3, depth: 3, num_nonhier: 10 },
            16,
            7,
            GeneratorParams { zipf_p_max: 0.9, zipf_alpha: 0.1, ..GeneratorParams::default() },
        )
        .unwrap();
        let b = sample_batch(&m, 500, 3).unwrap();
        for i in 0..b.len() {
            let (feats, _) = b.actives(i);
            for &f in feats {
                if let Some(p) = m.parent[f as usize] {
                    assert!(feats.binary_search(&p).is_ok(), "child {f} active without parent");
                }
            }
            // At most one active child per sibling group.
            for f in 0..m.num_features {
                let kids = &m.children[f];
                if kids.is_empty() {
                    continue;
                }
                let active_kids =
                    kids.iter().filter(|&&c| feats.binary_search(&c).is_ok()).count();
                assert!(active_kids <= 1, "sibling group of {f} has {active_kids} active");
            }
        }
    }

    #[test]
    fn reconstruction_identity() {
        let m = build_model(small_spec(), 16, 4, GeneratorParams::default()).unwrap();
        let b = sample_batch(&m, 200, 8).unwrap();
        let max_abs = b.x.iter().fold(0.0f64, |acc, &v| acc.max((v as f64).abs()));
        let mut worst = 0.0f64;
        for i in 0..b.len() {
            let (feats, mags) = b.actives(i);
            for j in 0..m.dim {
                let mut acc = m.bias[j] as f64;
                for (&f, &c) in feats.iter().zip(mags) {
                    acc += c as f64 * m.directions[(f as usize, j)] as f64;
                }
                worst = worst.max((acc - b.x[(i, j)] as f64).abs());
            }
        }
        assert!(worst <= 1e-4 * max_abs.max(1.0), "worst residual {worst}");
    }

    #[test]
    fn root_firing_rates_concentrate() {
        let m = build_model(HierarchySpec::default(), 128, 0, GeneratorParams::default()).unwrap();
        let n = 100_000;
        let b = sample_batch(&m, n, 1).unwrap();
        let ts = m.spec.tree_size();
        // z-counts (active regardless of clipped magnitude) match the Bernoulli rate.
        let mut z_counts = vec![0u32; m.num_features];
        for &f in &b.active_feat {
            z_counts[f as usize] += 1;
        }
        for t in 0..m.spec.num_trees {
            let root = t * ts;
            let p = m.firing_prob[root];
            let emp = z_counts[root] as f64 / n as f64;
            let band = 3.0 * (p * (1.0 - p) / n as f64).sqrt();
            assert!(
                (emp - p).abs() <= band,
                "root {t}: emp {emp:.5} vs p {p:.5} (band {band:.5})"
            );
        }
    }

    #[test]
    fn magnitudes_nonnegative_and_expected_l0_in_probing_range() {
        let m = build_model(HierarchySpec::default(), 128, 0, GeneratorParams::default()).unwrap();
        let b = sample_batch(&m, 2000, 2).unwrap();
        assert!(b.active_mag.iter().all(|&c| c >= 0.0));
        let expect = m.expected_l0();
        assert!(
            (15.0..=45.0).contains(&expect),
            "expected ground-truth L0 {expect:.1} outside the probing range"
        );
        assert!((b.mean_l0() - expect).abs() < 0.15 * expect);
    }

    #[test]
    fn variations_scale_parameters() {
        let m = build_model(small_spec(), 16, 2, GeneratorParams::default()).unwrap();
        let half = apply_variation(&m, VariationKind::RelP05);
        for (a, b) in m.firing_prob.iter().zip(&half.firing_prob) {
            assert_abs_diff_eq!(*b, *a * 0.5, epsilon = 1e-15);
        }
        assert_eq!(half.directions, m.directions);
        assert_eq!(half.variations, vec!["rel-p-0.5".to_string()]);

        let mut boosted = m.clone();
        boosted.firing_prob[0] = 0.9;
        let up = apply_variation(&boosted, VariationKind::RelP15);
        assert_abs_diff_eq!(up.firing_prob[0], 1.0, epsilon = 1e-15);

        let wide = apply_variation(&m, VariationKind::Std25);
        for (a, b) in m.mag_std.iter().zip(&wide.mag_std) {
            assert_abs_diff_eq!(*b, *a * 2.5, epsilon = 1e-15);
        }
        assert_eq!(wide.firing_prob, m.firing_prob);
    }

    #[test]
    fn variation_examples() {
        assert_eq!(VariationKind::parse("rel-p-0.5").unwrap(), VariationKind::RelP05);
        assert!(VariationKind::parse("bogus").is_err());
        // 0.02 -> 0.01 ; 0.25 -> 0.625
        let mut m = build_model(small_spec(), 16, 2, GeneratorParams::default()).unwrap();
        m.firing_prob[0] = 0.02;
        let half = apply_variation(&m, VariationKind::RelP05);
        assert_abs_diff_eq!(half.firing_prob[0], 0.01, epsilon = 1e-15);
        let wide = apply_variation(&m, VariationKind::Std25);
        assert_abs_diff_eq!(wide.mag_std[0], 0.625, epsilon = 1e-15);
    }
}
