//! Panel-level reliability statistics over a ScoreTable: variance
//! decomposition with its Monte-Carlo null, SNR, winner stability,
//! cross-seed and cross-metric ranking agreement, trajectory slopes, and
//! ground-truth validity correlations.
//!
//! Observations are the per-(variant, train seed, snapshot) scores; when a
//! cell was evaluated at several task seeds the analyses use their mean.

use std::collections::{BTreeMap, BTreeSet};

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::score::{is_control_variant, ScoreRecord, ScoreTable};

use super::stats::spearman_rho;

/// A metric cell: id plus optional hyperparameter (k or top-N).
pub type MetricKey = (String, Option<i64>);

pub fn metric_label(key: &MetricKey) -> String {
    match key.1 {
        Some(h) => format!("{}@{}", key.0, h),
        None => key.0.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceShares {
    pub share_variant: f64,
    pub share_seed: f64,
    pub share_snap: f64,
}

/// Post-warmup trajectories per variant and seed:
/// `data[variant][seed] = scores by ascending snapshot`.
pub struct PanelData {
    pub variants: Vec<String>,
    pub higher_is_better: bool,
    /// data[v][s][t]
    pub values: Vec<Vec<Vec<f64>>>,
    pub seeds: Vec<Vec<u64>>,
    /// snapshots[v][s][t], ascending
    pub snapshots: Vec<Vec<Vec<u64>>>,
}

fn group_by_metric(table: &ScoreTable) -> BTreeMap<MetricKey, Vec<&ScoreRecord>> {
    let mut out: BTreeMap<MetricKey, Vec<&ScoreRecord>> = BTreeMap::new();
    for r in table.records() {
        out.entry((r.metric_id.clone(), r.hparam)).or_default().push(r);
    }
    out
}

/// Extract post-warmup trajectories (task seeds averaged per snapshot).
pub fn panel_data(records: &[&ScoreRecord], warmup: u64) -> PanelData {
    type Cell = BTreeMap<u64, Vec<f64>>; // snapshot -> values over task seeds
    let mut nested: BTreeMap<String, BTreeMap<u64, Cell>> = BTreeMap::new();
    let mut hib = true;
    for r in records {
        if r.snapshot_samples < warmup {
            continue;
        }
        hib = r.higher_is_better;
        nested
            .entry(r.variant.clone())
            .or_default()
            .entry(r.train_seed)
            .or_default()
            .entry(r.snapshot_samples)
            .or_default()
            .push(r.value);
    }
    let mut variants = Vec::new();
    let mut values = Vec::new();
    let mut seeds = Vec::new();
    let mut snapshots = Vec::new();
    for (variant, by_seed) in nested {
        variants.push(variant);
        let mut v_vals = Vec::new();
        let mut v_seeds = Vec::new();
        let mut v_snaps = Vec::new();
        for (seed, by_snap) in by_seed {
            v_seeds.push(seed);
            let mut snaps = Vec::new();
            let mut vals = Vec::new();
            for (snap, task_vals) in by_snap {
                snaps.push(snap);
                vals.push(task_vals.iter().sum::<f64>() / task_vals.len() as f64);
            }
            v_snaps.push(snaps);
            v_vals.push(vals);
        }
        values.push(v_vals);
        seeds.push(v_seeds);
        snapshots.push(v_snaps);
    }
    PanelData { variants, higher_is_better: hib, values, seeds, snapshots }
}

fn sample_var(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Variance decomposition of `values[v][s][t]` into variant signal,
/// training-seed noise, and snapshot jitter. `Ok(None)` marks the undefined
/// all-equal-scores case.
pub fn decompose(values: &[Vec<Vec<f64>>]) -> Result<Option<VarianceShares>> {
    if values.len() < 2 {
        return Err(Error::Insufficient("variance decomposition needs >= 2 variants".into()));
    }
    for per_seed in values {
        if per_seed.len() < 2 {
            return Err(Error::Insufficient(
                "variance decomposition needs >= 2 seeds per variant".into(),
            ));
        }
        for traj in per_seed {
            if traj.len() < 2 {
                return Err(Error::Insufficient(
                    "variance decomposition needs >= 2 post-warmup snapshots".into(),
                ));
            }
        }
    }
    let variant_means: Vec<f64> = values
        .iter()
        .map(|per_seed| {
            let all: Vec<f64> = per_seed.iter().flatten().copied().collect();
            mean(&all)
        })
        .collect();
    let v_variant = sample_var(&variant_means);
    let v_seed = mean(
        &values
            .iter()
            .map(|per_seed| {
                let seed_means: Vec<f64> = per_seed.iter().map(|t| mean(t)).collect();
                sample_var(&seed_means)
            })
            .collect::<Vec<_>>(),
    );
    let v_snap = mean(
        &values
            .iter()
            .flat_map(|per_seed| per_seed.iter().map(|t| sample_var(t)))
            .collect::<Vec<_>>(),
    );
    let total = v_variant + v_seed + v_snap;
    if total == 0.0 {
        return Ok(None);
    }
    Ok(Some(VarianceShares {
        share_variant: v_variant / total,
        share_seed: v_seed / total,
        share_snap: v_snap / total,
    }))
}

/// Per-metric variance decomposition over post-warmup scores.
pub fn variance_decomposition(
    table: &ScoreTable,
    warmup: u64,
) -> Result<BTreeMap<MetricKey, Option<VarianceShares>>> {
    let mut out = BTreeMap::new();
    for (key, records) in group_by_metric(table) {
        let data = panel_data(&records, warmup);
        out.insert(key, decompose(&data.values)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McNull {
    pub trials: usize,
    /// share_variant samples, one per trial, in trial order.
    pub shares: Vec<f64>,
    /// (threshold, exceedance probability, binomial standard error)
    pub exceedance: Vec<(f64, f64, f64)>,
}

/// Monte-Carlo null for the variance decomposition: i.i.d. standard-normal
/// scores on a (variants, seeds, snapshots) design, routed through the same
/// decomposition code.
pub fn mc_null(
    design: (usize, usize, usize),
    trials: usize,
    seed: u64,
) -> Result<McNull> {
    let (n_variants, n_seeds, n_snaps) = design;
    if trials < 1000 {
        return Err(Error::Insufficient("mc_null needs at least 1000 trials".into()));
    }
    if n_variants < 2 || n_seeds < 2 || n_snaps < 2 {
        return Err(Error::Insufficient(
            "mc_null design needs >= 2 variants, seeds, and snapshots".into(),
        ));
    }
    let shares: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut g = rng::stream("mc-null", seed, &[trial as u64]);
            let values: Vec<Vec<Vec<f64>>> = (0..n_variants)
                .map(|_| {
                    (0..n_seeds)
                        .map(|_| {
                            (0..n_snaps).map(|_| StandardNormal.sample(&mut g)).collect()
                        })
                        .collect()
                })
                .collect();
            decompose(&values)
                .expect("valid design")
                .expect("continuous scores")
                .share_variant
        })
        .collect();
    let thresholds = [0.05, 0.10, 0.20];
    let exceedance = thresholds
        .iter()
        .map(|&t| {
            let k = shares.iter().filter(|&&s| s > t).count();
            let p = k as f64 / trials as f64;
            let se = (p * (1.0 - p) / trials as f64).sqrt();
            (t, p, se)
        })
        .collect();
    Ok(McNull { trials, shares, exceedance })
}

/// Least-squares fit of a degree-2 polynomial on index 0..n-1 (x centered
/// and scaled for conditioning); returns the residuals.
fn detrend_deg2(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    debug_assert!(n >= 4);
    let half = (n - 1) as f64 / 2.0;
    let xs: Vec<f64> = (0..n).map(|i| (i as f64 - half) / half.max(1.0)).collect();
    // Normal equations for basis {1, x, x^2}.
    let mut a = [[0.0f64; 3]; 3];
    let mut b = [0.0f64; 3];
    for (&x, &v) in xs.iter().zip(y) {
        let basis = [1.0, x, x * x];
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] += basis[i] * basis[j];
            }
            b[i] += basis[i] * v;
        }
    }
    let coeffs = solve3(a, b);
    xs.iter()
        .zip(y)
        .map(|(&x, &v)| v - (coeffs[0] + coeffs[1] * x + coeffs[2] * x * x))
        .collect()
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> [f64; 3] {
    // Gaussian elimination with partial pivoting.
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        let p = a[col][col];
        if p.abs() < 1e-300 {
            continue;
        }
        for row in col + 1..3 {
            let f = a[row][col] / p;
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0f64; 3];
    for row in (0..3).rev() {
        let mut acc = b[row];
        for k in row + 1..3 {
            acc -= a[row][k] * x[k];
        }
        x[row] = if a[row][row].abs() < 1e-300 { 0.0 } else { acc / a[row][row] };
    }
    x
}

/// ANOVA-style signal-to-noise ratio per metric: std across variants of
/// post-warmup trajectory means, divided by the pooled std of residuals
/// after a per-(variant, seed) degree-2 detrend. Infinite when the
/// denominator is zero.
pub fn snr(table: &ScoreTable, warmup: u64) -> Result<BTreeMap<MetricKey, f64>> {
    let mut out = BTreeMap::new();
    for (key, records) in group_by_metric(table) {
        let data = panel_data(&records, warmup);
        if data.variants.len() < 2 {
            return Err(Error::Insufficient(format!(
                "snr needs >= 2 variants for {}",
                metric_label(&key)
            )));
        }
        let mut variant_means = Vec::new();
        let mut resid_sq = 0.0f64;
        let mut resid_df = 0.0f64;
        for per_seed in &data.values {
            let all: Vec<f64> = per_seed.iter().flatten().copied().collect();
            variant_means.push(mean(&all));
            for traj in per_seed {
                if traj.len() < 4 {
                    return Err(Error::Insufficient(format!(
                        "snr needs >= 4 post-warmup snapshots per trajectory for {}",
                        metric_label(&key)
                    )));
                }
                let resid = detrend_deg2(traj);
                resid_sq += resid.iter().map(|r| r * r).sum::<f64>();
                resid_df += (traj.len() - 3) as f64;
            }
        }
        let numerator = sample_var(&variant_means).sqrt();
        let denominator = (resid_sq / resid_df).sqrt();
        out.insert(key, if denominator == 0.0 { f64::INFINITY } else { numerator / denominator });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WinnerStability {
    /// Winner variant per train seed, in ascending seed order.
    pub winners: Vec<(u64, String)>,
    pub distinct: usize,
}

/// Per-metric count of distinct best variants across training seeds,
/// honoring each metric's orientation.
pub fn winner_stability(
    table: &ScoreTable,
    warmup: u64,
) -> Result<BTreeMap<MetricKey, WinnerStability>> {
    let mut out = BTreeMap::new();
    for (key, records) in group_by_metric(table) {
        let data = panel_data(&records, warmup);
        // Post-warmup mean per (variant, seed).
        let mut by_seed: BTreeMap<u64, Vec<(String, f64)>> = BTreeMap::new();
        for (v, variant) in data.variants.iter().enumerate() {
            for (s, seed) in data.seeds[v].iter().enumerate() {
                let m = mean(&data.values[v][s]);
                by_seed.entry(*seed).or_default().push((variant.clone(), m));
            }
        }
        if by_seed.len() < 2 {
            return Err(Error::Insufficient(format!(
                "winner_stability needs >= 2 seeds for {}",
                metric_label(&key)
            )));
        }
        let mut winners = Vec::new();
        for (seed, entries) in &by_seed {
            let best = entries
                .iter()
                .max_by(|a, b| {
                    let (x, y) = if data.higher_is_better { (a.1, b.1) } else { (-a.1, -b.1) };
                    x.partial_cmp(&y).unwrap().then(b.0.cmp(&a.0))
                })
                .unwrap();
            winners.push((*seed, best.0.clone()));
        }
        let distinct = winners.iter().map(|(_, v)| v.clone()).collect::<BTreeSet<_>>().len();
        out.insert(key, WinnerStability { winners, distinct });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossSeedAgreement {
    /// Pairwise Spearman rho per seed pair (None = tie-degenerate, skipped).
    pub pair_rhos: Vec<(u64, u64, Option<f64>)>,
    /// Mean over defined pairs; None when every pair was skipped.
    pub mean_rho: Option<f64>,
}

/// Mean pairwise Spearman correlation between the variant rankings
/// produced by each pair of training seeds.
pub fn cross_seed_rank_agreement(
    table: &ScoreTable,
    warmup: u64,
) -> Result<BTreeMap<MetricKey, CrossSeedAgreement>> {
    let mut out = BTreeMap::new();
    for (key, records) in group_by_metric(table) {
        let data = panel_data(&records, warmup);
        if data.variants.len() < 2 {
            return Err(Error::Insufficient(format!(
                "rank agreement needs >= 2 variants for {}",
                metric_label(&key)
            )));
        }
        // variant scores per seed, aligned to data.variants order.
        let mut seeds: BTreeSet<u64> = BTreeSet::new();
        for per_variant in &data.seeds {
            seeds.extend(per_variant.iter().copied());
        }
        let seeds: Vec<u64> = seeds.into_iter().collect();
        if seeds.len() < 2 {
            return Err(Error::Insufficient(format!(
                "rank agreement needs >= 2 seeds for {}",
                metric_label(&key)
            )));
        }
        let mut score_by_seed: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for &seed in &seeds {
            let mut scores = Vec::with_capacity(data.variants.len());
            for (v, _) in data.variants.iter().enumerate() {
                let pos = data.seeds[v].iter().position(|&s| s == seed).ok_or_else(|| {
                    Error::Insufficient(format!(
                        "variant {} missing seed {seed} for {}",
                        data.variants[v],
                        metric_label(&key)
                    ))
                })?;
                let m = mean(&data.values[v][pos]);
                scores.push(if data.higher_is_better { m } else { -m });
            }
            score_by_seed.insert(seed, scores);
        }
        let mut pair_rhos = Vec::new();
        let mut defined = Vec::new();
        for i in 0..seeds.len() {
            for j in i + 1..seeds.len() {
                let rho = spearman_rho(&score_by_seed[&seeds[i]], &score_by_seed[&seeds[j]])?;
                if let Some(r) = rho {
                    defined.push(r);
                }
                pair_rhos.push((seeds[i], seeds[j], rho));
            }
        }
        let mean_rho = if defined.is_empty() { None } else { Some(mean(&defined)) };
        out.insert(key, CrossSeedAgreement { pair_rhos, mean_rho });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankAgreementMatrix {
    pub metrics: Vec<MetricKey>,
    /// Pairwise Spearman rho between metric rankings of the variants.
    pub rho: Vec<Vec<Option<f64>>>,
    pub mean_offdiag: Option<f64>,
}

/// Pairwise ranking agreement between SNR-informative metrics
/// (snr >= floor). Variants are ranked by post-warmup mean by default, or
/// by the final snapshot when `use_final` is set; orientation honors each
/// metric's higher-is-better flag.
pub fn metric_rank_agreement(
    table: &ScoreTable,
    warmup: u64,
    snr_floor: f64,
    use_final: bool,
) -> Result<RankAgreementMatrix> {
    let snr_by_metric = snr(table, warmup)?;
    let groups = group_by_metric(table);
    let mut metrics = Vec::new();
    let mut variant_scores: Vec<Vec<f64>> = Vec::new();
    let mut variant_names: Option<Vec<String>> = None;
    for (key, records) in &groups {
        if snr_by_metric[key] < snr_floor {
            continue;
        }
        let data = panel_data(records, warmup);
        match &variant_names {
            None => variant_names = Some(data.variants.clone()),
            Some(names) => {
                if *names != data.variants {
                    return Err(Error::Insufficient(
                        "metrics cover different variant sets".into(),
                    ));
                }
            }
        }
        let scores: Vec<f64> = data
            .values
            .iter()
            .zip(&data.snapshots)
            .map(|(per_seed, per_seed_snaps)| {
                let vals: Vec<f64> = if use_final {
                    per_seed
                        .iter()
                        .zip(per_seed_snaps)
                        .map(|(traj, snaps)| {
                            let last = snaps
                                .iter()
                                .enumerate()
                                .max_by_key(|(_, &s)| s)
                                .map(|(i, _)| i)
                                .unwrap();
                            traj[last]
                        })
                        .collect()
                } else {
                    per_seed.iter().map(|traj| mean(traj)).collect()
                };
                let m = mean(&vals);
                if data.higher_is_better {
                    m
                } else {
                    -m
                }
            })
            .collect();
        metrics.push(key.clone());
        variant_scores.push(scores);
    }
    if metrics.len() < 2 {
        return Err(Error::Insufficient(format!(
            "only {} metrics pass the SNR floor {snr_floor}",
            metrics.len()
        )));
    }
    let n = metrics.len();
    let mut rho = vec![vec![None; n]; n];
    let mut offdiag = Vec::new();
    for i in 0..n {
        rho[i][i] = Some(1.0);
        for j in i + 1..n {
            let r = spearman_rho(&variant_scores[i], &variant_scores[j])?;
            rho[i][j] = r;
            rho[j][i] = r;
            if let Some(v) = r {
                offdiag.push(v);
            }
        }
    }
    let mean_offdiag = if offdiag.is_empty() { None } else { Some(mean(&offdiag)) };
    Ok(RankAgreementMatrix { metrics, rho, mean_offdiag })
}

/// Ordinary least-squares slope of score on samples seen, post-warmup,
/// reported per million samples. `None` marks single-point trajectories.
pub fn trajectory_slope(
    table: &ScoreTable,
    warmup: u64,
) -> Result<BTreeMap<(MetricKey, String), Option<f64>>> {
    let mut out = BTreeMap::new();
    for (key, records) in group_by_metric(table) {
        let data = panel_data(&records, warmup);
        for (v, variant) in data.variants.iter().enumerate() {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for (s, traj) in data.values[v].iter().enumerate() {
                for (t, &val) in traj.iter().enumerate() {
                    xs.push(data.snapshots[v][s][t] as f64);
                    ys.push(val);
                }
            }
            let distinct: BTreeSet<u64> =
                xs.iter().map(|&x| x as u64).collect();
            let slope = if distinct.len() < 2 {
                None
            } else {
                let mx = mean(&xs);
                let my = mean(&ys);
                let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
                let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
                Some(sxy / sxx * 1_000_000.0)
            };
            out.insert((key.clone(), variant.clone()), slope);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scope {
    FullPanel,
    WithinTrained,
}

impl Scope {
    pub fn label(&self) -> &'static str {
        match self {
            Scope::FullPanel => "full_panel",
            Scope::WithinTrained => "within_trained",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GtCorrelation {
    pub metric_id: String,
    pub hparam: Option<i64>,
    pub vs: String,
    pub scope: String,
    /// Mean over task seeds of the per-seed Spearman rho.
    pub rho: Option<f64>,
    pub n_task_seeds: usize,
    pub n_saes: usize,
    pub insufficient: bool,
}

/// Spearman correlation of each proxy metric against the ground-truth
/// metrics, per task seed, averaged over seeds. `within_trained` excludes
/// controls and the oracle.
pub fn correlate_with_gt(
    table: &ScoreTable,
    gt: &ScoreTable,
    scope: Scope,
) -> Result<Vec<GtCorrelation>> {
    // Ground-truth value per (gt metric, sae_id), final snapshot.
    let mut gt_values: BTreeMap<(String, String), (u64, f64)> = BTreeMap::new();
    for r in gt.records() {
        let key = (r.metric_id.clone(), r.sae_id.clone());
        let entry = gt_values.entry(key).or_insert((r.snapshot_samples, r.value));
        if r.snapshot_samples >= entry.0 {
            *entry = (r.snapshot_samples, r.value);
        }
    }
    let gt_metrics: BTreeSet<String> =
        gt.records().iter().map(|r| r.metric_id.clone()).collect();

    let mut out = Vec::new();
    for (key, records) in group_by_metric(table) {
        // Per (task_seed, sae_id): final-snapshot value.
        let mut cells: BTreeMap<u64, BTreeMap<String, (u64, f64)>> = BTreeMap::new();
        for r in records {
            if scope == Scope::WithinTrained && is_control_variant(&r.variant) {
                continue;
            }
            let by_sae = cells.entry(r.task_seed).or_default();
            let entry = by_sae.entry(r.sae_id.clone()).or_insert((r.snapshot_samples, r.value));
            if r.snapshot_samples >= entry.0 {
                *entry = (r.snapshot_samples, r.value);
            }
        }
        for gt_metric in &gt_metrics {
            let mut per_seed = Vec::new();
            let mut n_saes = 0;
            let mut insufficient = false;
            for by_sae in cells.values() {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for (sae_id, &(_, v)) in by_sae {
                    if let Some(&(_, g)) = gt_values.get(&(gt_metric.clone(), sae_id.clone()))
                    {
                        xs.push(v);
                        ys.push(g);
                    }
                }
                n_saes = n_saes.max(xs.len());
                if xs.len() < 3 {
                    insufficient = true;
                    continue;
                }
                if let Some(rho) = spearman_rho(&xs, &ys)? {
                    per_seed.push(rho);
                }
            }
            let rho = if per_seed.is_empty() { None } else { Some(mean(&per_seed)) };
            out.push(GtCorrelation {
                metric_id: key.0.clone(),
                hparam: key.1,
                vs: gt_metric.clone(),
                scope: scope.label().to_string(),
                rho,
                n_task_seeds: per_seed.len(),
                n_saes,
                insufficient,
            });
        }
    }
    Ok(out)
}
