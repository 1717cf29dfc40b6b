//! Shared probe machinery: per-latent feature selection, logistic probes,
//! accuracy evaluation, latent ablation.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub l1_penalty: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl ProbeConfig {
    /// TPP/SCR internal probes: the penalty and batch size are load-bearing.
    /// The learning rate is sized for the desk-scale group sizes (a few
    /// hundred training samples); slower rates leave probes at the
    /// majority-class solution.
    pub fn internal(seed: u64) -> Self {
        ProbeConfig { l1_penalty: 1e-3, batch_size: 16, lr: 0.05, epochs: 50, seed }
    }

    /// Sparse-probing final probes. The small rate keeps the learned
    /// decision threshold near zero, where a latent that perfectly
    /// indicates the concept is read exactly.
    pub fn sparse_probing(seed: u64) -> Self {
        ProbeConfig { l1_penalty: 0.0, batch_size: 64, lr: 1e-3, epochs: 50, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 || self.epochs < 1 {
            return Err(Error::config("probe batch_size and epochs must be >= 1"));
        }
        if self.l1_penalty < 0.0 {
            return Err(Error::config("probe l1_penalty must be >= 0"));
        }
        Ok(())
    }
}

/// A trained linear probe over a subset of input columns.
#[derive(Debug, Clone)]
pub struct Probe {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Column indices (into the original input space) the probe reads.
    pub selected: Vec<usize>,
}

impl Probe {
    pub fn logit(&self, row: &[f32]) -> f64 {
        let mut f = self.bias;
        for (w, &j) in self.weights.iter().zip(&self.selected) {
            f += w * row[j] as f64;
        }
        f
    }
}

/// Train/test split with binary labels; train and test must come from
/// disjoint samples.
#[derive(Debug, Clone)]
pub struct LabeledSplit {
    pub train_x: Array2<f32>,
    pub train_y: Vec<bool>,
    pub test_x: Array2<f32>,
    pub test_y: Vec<bool>,
}

/// Rank latents by a pooled-std-normalized mean difference between classes
/// and return the k best, ties broken by lower index.
pub fn select_topk_latents(
    latents: ArrayView2<f32>,
    labels: &[bool],
    k: usize,
) -> Result<Vec<usize>> {
    let n = latents.nrows();
    let l = latents.ncols();
    if labels.len() != n {
        return Err(Error::shape("labels length must match rows"));
    }
    if k > l {
        return Err(Error::input(format!("k = {k} exceeds {l} latents")));
    }
    let n1 = labels.iter().filter(|&&y| y).count();
    let n0 = n - n1;
    if n1 == 0 || n0 == 0 {
        return Err(Error::Task("both classes must be present for latent selection".into()));
    }

    let mut scores = vec![0.0f64; l];
    let mut sum1 = vec![0.0f64; l];
    let mut sum0 = vec![0.0f64; l];
    let mut sq1 = vec![0.0f64; l];
    let mut sq0 = vec![0.0f64; l];
    for (i, row) in latents.rows().into_iter().enumerate() {
        if labels[i] {
            for (j, &v) in row.iter().enumerate() {
                sum1[j] += v as f64;
                sq1[j] += (v as f64) * (v as f64);
            }
        } else {
            for (j, &v) in row.iter().enumerate() {
                sum0[j] += v as f64;
                sq0[j] += (v as f64) * (v as f64);
            }
        }
    }
    for j in 0..l {
        let m1 = sum1[j] / n1 as f64;
        let m0 = sum0[j] / n0 as f64;
        let var1 = (sq1[j] - sum1[j] * m1).max(0.0);
        let var0 = (sq0[j] - sum0[j] * m0).max(0.0);
        let df = (n1 + n0).saturating_sub(2).max(1) as f64;
        let pooled = ((var1 + var0) / df).sqrt();
        scores[j] = (m1 - m0).abs() / (pooled + 1e-8);
    }

    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
    });
    order.truncate(k);
    Ok(order)
}

/// Minibatch gradient descent on logistic loss with an L1 subgradient,
/// deterministic in `(split, cfg)`.
pub fn train_logistic(split: &LabeledSplit, cfg: &ProbeConfig) -> Result<Probe> {
    let selected: Vec<usize> = (0..split.train_x.ncols()).collect();
    train_logistic_selected(split, &selected, cfg)
}

/// Same, restricted to the given input columns.
pub fn train_logistic_selected(
    split: &LabeledSplit,
    selected: &[usize],
    cfg: &ProbeConfig,
) -> Result<Probe> {
    cfg.validate()?;
    let n = split.train_x.nrows();
    if n == 0 || split.train_y.len() != n {
        return Err(Error::input("empty or inconsistent training split"));
    }
    let d = selected.len();
    let mut w = vec![0.0f64; d];
    let mut b = 0.0f64;
    let mut g = rng::stream("probe-shuffle", cfg.seed, &[]);
    let mut order: Vec<usize> = (0..n).collect();
    let mut grad = vec![0.0f64; d];

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut g);
        for chunk in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|v| *v = 0.0);
            let mut grad_b = 0.0f64;
            for &i in chunk {
                let row = split.train_x.row(i);
                let mut f = b;
                for (pos, &j) in selected.iter().enumerate() {
                    f += w[pos] * row[j] as f64;
                }
                let y = if split.train_y[i] { 1.0 } else { -1.0 };
                // d/df log(1 + exp(-y f)) = -y * sigmoid(-y f)
                let s = 1.0 / (1.0 + (y * f).exp());
                let coeff = -y * s;
                for (pos, &j) in selected.iter().enumerate() {
                    grad[pos] += coeff * row[j] as f64;
                }
                grad_b += coeff;
            }
            let inv = 1.0 / chunk.len() as f64;
            let mut finite = true;
            for (pos, gw) in grad.iter().enumerate() {
                let sub = if w[pos] > 0.0 {
                    1.0
                } else if w[pos] < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                let step = cfg.lr * (gw * inv + cfg.l1_penalty * sub);
                w[pos] -= step;
                finite &= w[pos].is_finite();
            }
            b -= cfg.lr * grad_b * inv;
            finite &= b.is_finite();
            if !finite {
                return Err(Error::Probe("non-finite probe weights".into()));
            }
        }
    }
    Ok(Probe { weights: w, bias: b, selected: selected.to_vec() })
}

/// Fraction of samples where the probe's sign matches the label
/// (decision threshold at logit 0; positive class iff logit > 0).
pub fn probe_accuracy(probe: &Probe, x: ArrayView2<f32>, y: &[bool]) -> f64 {
    let n = x.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut correct = 0usize;
    for (i, row) in x.rows().into_iter().enumerate() {
        let f = probe.logit(row.as_slice().unwrap());
        if (f > 0.0) == y[i] {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}

/// Copy with the listed columns zeroed.
pub fn ablate_latents(latents: ArrayView2<f32>, idx: &[usize]) -> Result<Array2<f32>> {
    let l = latents.ncols();
    if let Some(&bad) = idx.iter().find(|&&j| j >= l) {
        return Err(Error::input(format!("ablate index {bad} out of range ({l} columns)")));
    }
    let mut out = latents.to_owned();
    for &j in idx {
        out.column_mut(j).fill(0.0);
    }
    Ok(out)
}
