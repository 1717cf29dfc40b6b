//! SAE training: Adam on reconstruction loss with per-architecture
//! sparsification, decoder-row renormalization, and scheduled snapshots.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::synthgen::{sample_batch, FeatureModel};

use super::{ActivationRule, ControlTag, PrefixMode, Provenance, SaeModel};

/// Architecture requested for a training run. `JumpRelu` carries an L0
/// target; its penalty coefficient is calibrated by pilot runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ArchSpec {
    ReluL1 { l1_coeff: f64 },
    JumpRelu { target_l0: f64 },
    BatchTopK { k: usize },
    Matryoshka { k: usize, prefix_mode: Option<PrefixMode> },
}

impl ArchSpec {
    /// Parse a compact arch string, e.g. `batchtopk:k=32`,
    /// `matryoshka:k=32,loguniform,n=4,wmin=64`, `relu_l1:c=0.0005`,
    /// `jumprelu:l0=32`, `matryoshka:k=32,prefixes=64-128-512`.
    pub fn parse(s: &str) -> Result<Self> {
        let (name, rest) = match s.split_once(':') {
            Some((n, r)) => (n, r),
            None => (s, ""),
        };
        let mut kv = std::collections::HashMap::new();
        let mut flags = Vec::new();
        for part in rest.split(',').filter(|p| !p.is_empty()) {
            match part.split_once('=') {
                Some((k, v)) => {
                    kv.insert(k.to_string(), v.to_string());
                }
                None => flags.push(part.to_string()),
            }
        }
        let get_f64 = |kv: &std::collections::HashMap<String, String>, key: &str| -> Result<f64> {
            kv.get(key)
                .ok_or_else(|| Error::config(format!("arch `{s}` missing `{key}`")))?
                .parse::<f64>()
                .map_err(|e| Error::config(format!("arch `{s}`: bad `{key}`: {e}")))
        };
        let get_usize =
            |kv: &std::collections::HashMap<String, String>, key: &str| -> Result<usize> {
                kv.get(key)
                    .ok_or_else(|| Error::config(format!("arch `{s}` missing `{key}`")))?
                    .parse::<usize>()
                    .map_err(|e| Error::config(format!("arch `{s}`: bad `{key}`: {e}")))
            };
        match name {
            "relu_l1" => Ok(ArchSpec::ReluL1 { l1_coeff: get_f64(&kv, "c")? }),
            "jumprelu" => Ok(ArchSpec::JumpRelu { target_l0: get_f64(&kv, "l0")? }),
            "batchtopk" => Ok(ArchSpec::BatchTopK { k: get_usize(&kv, "k")? }),
            "matryoshka" => {
                let k = get_usize(&kv, "k")?;
                let prefix_mode = if flags.iter().any(|f| f == "loguniform") {
                    Some(PrefixMode::LogUniform {
                        n: get_usize(&kv, "n")?,
                        w_min: get_usize(&kv, "wmin")?,
                    })
                } else if kv.contains_key("prefixes") {
                    let widths = kv["prefixes"]
                        .split('-')
                        .map(|w| w.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| Error::config(format!("arch `{s}`: bad prefixes: {e}")))?;
                    Some(PrefixMode::Fixed(widths))
                } else {
                    None
                };
                Ok(ArchSpec::Matryoshka { k, prefix_mode })
            }
            other => Err(Error::config(format!("unknown architecture `{other}`"))),
        }
    }

    pub fn label(&self) -> String {
        match self {
            ArchSpec::ReluL1 { l1_coeff } => format!("relu_l1-c{l1_coeff}"),
            ArchSpec::JumpRelu { target_l0 } => format!("jumprelu-l0_{target_l0}"),
            ArchSpec::BatchTopK { k } => format!("batchtopk-k{k}"),
            ArchSpec::Matryoshka { k, prefix_mode } => match prefix_mode {
                Some(PrefixMode::LogUniform { n, .. }) => format!("matryoshka-k{k}-n{n}"),
                _ => format!("matryoshka-k{k}"),
            },
        }
    }

    /// The nominal L0 target, where one exists (used for panel bookkeeping).
    pub fn l0_target(&self) -> Option<f64> {
        match self {
            ArchSpec::BatchTopK { k } | ArchSpec::Matryoshka { k, .. } => Some(*k as f64),
            ArchSpec::JumpRelu { target_l0 } => Some(*target_l0),
            ArchSpec::ReluL1 { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub d_sae: usize,
    pub total_samples: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Final fraction of training with linear LR decay to zero.
    pub lr_decay_fraction: f64,
    pub snapshot_schedule: Vec<u64>,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale defaults: width 512, batch 1,024, 2M samples, peak LR
    /// 3e-4, decay over the final fifth, snapshot at 0 plus 10 evenly
    /// spaced after a 10% warmup.
    pub fn desk_default(seed: u64) -> Self {
        let total = 2_000_000u64;
        TrainConfig {
            d_sae: 512,
            total_samples: total,
            batch_size: 1024,
            lr: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lr_decay_fraction: 0.2,
            snapshot_schedule: default_snapshot_schedule(total, 10),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 || self.total_samples < 1 || self.d_sae < 1 {
            return Err(Error::config("batch_size, total_samples, d_sae must be >= 1"));
        }
        if !(self.lr_decay_fraction > 0.0 && self.lr_decay_fraction < 1.0) {
            return Err(Error::config("lr_decay_fraction must lie in (0, 1)"));
        }
        if self.snapshot_schedule.iter().any(|&s| s > self.total_samples) {
            return Err(Error::config("snapshot points must be <= total_samples"));
        }
        Ok(())
    }
}

/// Snapshot at 0, then `count` evenly spaced points after a 10% warmup.
pub fn default_snapshot_schedule(total_samples: u64, count: u64) -> Vec<u64> {
    let warmup = total_samples / 10;
    let mut sched = vec![0];
    for i in 1..=count {
        sched.push(warmup + i * (total_samples - warmup) / count);
    }
    sched.dedup();
    sched
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Adam {
    fn new(len: usize) -> Self {
        Adam { m: vec![0.0; len], v: vec![0.0; len] }
    }

    fn update(
        &mut self,
        param: &mut [f32],
        grad: &[f32],
        lr: f64,
        t: i32,
        cfg: &TrainConfig,
    ) {
        let b1 = cfg.adam_beta1;
        let b2 = cfg.adam_beta2;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for i in 0..param.len() {
            let g = grad[i] as f64;
            let m = b1 * self.m[i] as f64 + (1.0 - b1) * g;
            let v = b2 * self.v[i] as f64 + (1.0 - b2) * g * g;
            self.m[i] = m as f32;
            self.v[i] = v as f32;
            let mhat = m / bc1;
            let vhat = v / bc2;
            param[i] -= (lr * mhat / (vhat.sqrt() + cfg.adam_eps)) as f32;
        }
    }
}

fn init_sae(source: &FeatureModel, arch: &ArchSpec, cfg: &TrainConfig) -> SaeModel {
    let d_in = source.dim;
    let d_sae = cfg.d_sae;
    let mut g = rng::stream("sae-init", cfg.seed, &[]);
    let scale = 1.0 / (d_in as f64).sqrt();
    let mut w_enc = Array2::<f32>::zeros((d_sae, d_in));
    for v in w_enc.iter_mut() {
        let n: f64 = StandardNormal.sample(&mut g);
        *v = (n * scale) as f32;
    }
    let mut w_dec = w_enc.clone();
    normalize_rows(&mut w_dec);
    let rule = initial_rule(arch, d_sae);
    SaeModel {
        d_in,
        d_sae,
        w_enc,
        b_enc: Array1::zeros(d_sae),
        w_dec,
        b_dec: Array1::zeros(d_in),
        rule,
        provenance: Provenance {
            arch: arch.label(),
            train_seed: cfg.seed,
            samples_seen: 0,
            control: ControlTag::None,
        },
    }
}

pub(crate) const JUMPRELU_THRESHOLD_INIT: f32 = 0.001;
const JUMPRELU_BANDWIDTH: f64 = 0.001;
// Thresholds see consistent one-sided gradients only inside a narrow kernel
// window; at desk-scale step counts they need a faster learning rate than
// the weights to reach their equilibrium.
const JUMPRELU_THETA_LR_MULT: f64 = 100.0;

fn initial_rule(arch: &ArchSpec, d_sae: usize) -> ActivationRule {
    match arch {
        ArchSpec::ReluL1 { l1_coeff } => ActivationRule::ReluL1 { l1_coeff: *l1_coeff },
        ArchSpec::JumpRelu { .. } => {
            ActivationRule::JumpRelu { thresholds: vec![JUMPRELU_THRESHOLD_INIT; d_sae] }
        }
        ArchSpec::BatchTopK { k } => ActivationRule::BatchTopK { k: *k },
        ArchSpec::Matryoshka { k, prefix_mode } => ActivationRule::MatryoshkaBatchTopK {
            k: *k,
            prefix_mode: prefix_mode.clone().unwrap_or_else(|| default_prefixes(d_sae)),
        },
    }
}

fn default_prefixes(d_sae: usize) -> PrefixMode {
    let mut widths = vec![(d_sae / 16).max(1), (d_sae / 4).max(2), d_sae];
    widths.dedup();
    PrefixMode::Fixed(widths)
}

pub(crate) fn normalize_rows(w: &mut Array2<f32>) {
    for mut row in w.rows_mut() {
        let norm: f64 = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            let inv = (1.0 / norm) as f32;
            row.iter_mut().for_each(|v| *v *= inv);
        }
    }
}

/// Train an SAE on the synthetic source, returning deep-copy snapshots at
/// the scheduled sample counts. Deterministic in `(source, arch, cfg)`.
pub fn train(
    source: &FeatureModel,
    arch: &ArchSpec,
    cfg: &TrainConfig,
) -> Result<Vec<(u64, SaeModel)>> {
    cfg.validate()?;
    let trial_rule = initial_rule(arch, cfg.d_sae);
    trial_rule.validate(cfg.d_sae)?;

    let l0_coeff = match arch {
        ArchSpec::JumpRelu { target_l0 } => calibrate_jumprelu_coeff(source, *target_l0, cfg)?,
        _ => 0.0,
    };
    train_inner(source, arch, cfg, l0_coeff)
}

fn train_inner(
    source: &FeatureModel,
    arch: &ArchSpec,
    cfg: &TrainConfig,
    l0_coeff: f64,
) -> Result<Vec<(u64, SaeModel)>> {
    let mut sae = init_sae(source, arch, cfg);
    let d_in = sae.d_in;
    let d_sae = sae.d_sae;
    let n = cfg.batch_size;

    let mut schedule: Vec<u64> = cfg.snapshot_schedule.clone();
    schedule.sort_unstable();
    schedule.dedup();
    let mut snapshots: Vec<(u64, SaeModel)> = Vec::new();
    let mut sched_pos = 0usize;
    while sched_pos < schedule.len() && schedule[sched_pos] == 0 {
        let mut snap = sae.clone();
        snap.provenance.samples_seen = 0;
        snapshots.push((0, snap));
        sched_pos += 1;
    }

    let mut adam_w_enc = Adam::new(d_sae * d_in);
    let mut adam_b_enc = Adam::new(d_sae);
    let mut adam_w_dec = Adam::new(d_sae * d_in);
    let mut adam_b_dec = Adam::new(d_in);
    let mut adam_theta = Adam::new(d_sae);

    let mut grad_w_enc = vec![0.0f32; d_sae * d_in];
    let mut grad_b_enc = vec![0.0f32; d_sae];
    let mut grad_w_dec = vec![0.0f32; d_sae * d_in];
    let mut grad_b_dec = vec![0.0f32; d_in];
    let mut grad_theta = vec![0.0f32; d_sae];

    let mut batch_seeds = rng::stream("train-batches", cfg.seed, &[]);
    let mut prefix_rng = rng::stream("train-prefixes", cfg.seed, &[]);

    let total = cfg.total_samples;
    let steps = total.div_ceil(n as u64);
    let mut samples_seen = 0u64;

    for step in 0..steps {
        let batch = sample_batch(source, n, batch_seeds.gen::<u64>())?;
        let x = &batch.x;

        // Forward: preactivations, sparsify, collect active entries.
        let mut a = x.dot(&sae.w_enc.t());
        a += &sae.b_enc;

        // Near-threshold bookkeeping for JumpReLU straight-through grads.
        let mut near: Vec<(usize, usize)> = Vec::new();
        let is_jump = matches!(sae.rule, ActivationRule::JumpRelu { .. });
        if is_jump {
            if let ActivationRule::JumpRelu { thresholds } = &sae.rule {
                let half_bw = (JUMPRELU_BANDWIDTH / 2.0) as f32;
                for (i, row) in a.rows().into_iter().enumerate() {
                    for (j, &v) in row.iter().enumerate() {
                        if (v - thresholds[j]).abs() <= half_bw {
                            near.push((i, j));
                        }
                    }
                }
            }
        }

        let mut z = a.clone();
        match &sae.rule {
            ActivationRule::ReluL1 { .. } => z.mapv_inplace(|v| v.max(0.0)),
            ActivationRule::JumpRelu { thresholds } => {
                for mut row in z.rows_mut() {
                    for (v, &t) in row.iter_mut().zip(thresholds.iter()) {
                        if *v <= t {
                            *v = 0.0;
                        }
                    }
                }
            }
            ActivationRule::BatchTopK { k }
            | ActivationRule::MatryoshkaBatchTopK { k, .. } => {
                z.mapv_inplace(|v| v.max(0.0));
                super::batch_topk_inplace(&mut z, *k);
            }
        }

        // Active (row, latent, value) entries drive the sparse backward pass.
        let mut act_rows: Vec<Vec<(u32, f32)>> = vec![Vec::new(); n];
        for (i, row) in z.rows().into_iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    act_rows[i].push((j as u32, v));
                }
            }
        }

        // Prefix widths this step (full width only for non-Matryoshka).
        let prefixes: Vec<usize> = match &sae.rule {
            ActivationRule::MatryoshkaBatchTopK { prefix_mode, .. } => match prefix_mode {
                PrefixMode::Fixed(widths) => widths.clone(),
                PrefixMode::LogUniform { n: num, w_min } => {
                    sample_log_uniform_prefixes(&mut prefix_rng, *num, *w_min, d_sae)
                }
            },
            _ => vec![d_sae],
        };

        grad_w_enc.iter_mut().for_each(|g| *g = 0.0);
        grad_b_enc.iter_mut().for_each(|g| *g = 0.0);
        grad_w_dec.iter_mut().for_each(|g| *g = 0.0);
        grad_b_dec.iter_mut().for_each(|g| *g = 0.0);
        grad_theta.iter_mut().for_each(|g| *g = 0.0);

        let mut dz_rows: Vec<Vec<f32>> =
            act_rows.iter().map(|acts| vec![0.0f32; acts.len()]).collect();
        let mut loss = 0.0f64;
        let inv_nd = 1.0 / (n as f64 * d_in as f64);

        let w_dec = &sae.w_dec;
        let mut resid = vec![0.0f32; d_in];
        // Reusable per-row reconstruction; prefixes are processed widest-last
        // so each pass extends the previous partial sum.
        for (i, acts) in act_rows.iter().enumerate() {
            let xr = x.row(i);
            // Sort prefix list ascending and accumulate reconstruction
            // incrementally: recon_w2 = recon_w1 + contributions in (w1, w2].
            let mut sorted_prefixes = prefixes.clone();
            sorted_prefixes.sort_unstable();
            let mut recon = vec![sae.b_dec[0]; 0];
            recon.resize(d_in, 0.0);
            for (dst, &b) in recon.iter_mut().zip(sae.b_dec.iter()) {
                *dst = b;
            }
            let mut act_pos = 0usize;
            for &w in &sorted_prefixes {
                while act_pos < acts.len() && (acts[act_pos].0 as usize) < w {
                    let (j, zv) = acts[act_pos];
                    let wrow = w_dec.row(j as usize);
                    for (r, &wd) in recon.iter_mut().zip(wrow.iter()) {
                        *r += zv * wd;
                    }
                    act_pos += 1;
                }
                // Residual and gradients for this prefix.
                let mut prefix_err = 0.0f64;
                for (d, (&rv, &xv)) in recon.iter().zip(xr.iter()).enumerate() {
                    let r = rv - xv;
                    resid[d] = r;
                    prefix_err += (r as f64) * (r as f64);
                }
                loss += prefix_err * inv_nd;
                let gscale = (2.0 * inv_nd) as f32;
                for d in 0..d_in {
                    grad_b_dec[d] += gscale * resid[d];
                }
                // Entries 0..act_pos are exactly the actives with latent < w.
                for (pos, &(j, zv)) in acts.iter().take(act_pos).enumerate() {
                    let j = j as usize;
                    let gw = &mut grad_w_dec[j * d_in..(j + 1) * d_in];
                    let mut dz = 0.0f32;
                    let wrow = w_dec.row(j);
                    for d in 0..d_in {
                        let g = gscale * resid[d];
                        gw[d] += g * zv;
                        dz += g * wrow[d];
                    }
                    dz_rows[i][pos] += dz;
                }
            }
        }

        // Sparsity penalty (ReLU+L1) contributes through dz.
        if let ActivationRule::ReluL1 { l1_coeff } = &sae.rule {
            let g = (*l1_coeff / (n as f64 * d_sae as f64)) as f32;
            for dzs in dz_rows.iter_mut() {
                for dz in dzs.iter_mut() {
                    *dz += g;
                }
            }
            let z_abs_mean: f64 =
                act_rows.iter().flatten().map(|&(_, v)| v.abs() as f64).sum::<f64>()
                    / (n as f64 * d_sae as f64);
            loss += l1_coeff * z_abs_mean;
        }

        // Encoder gradients through the pass-through mask.
        for (i, acts) in act_rows.iter().enumerate() {
            let xr = x.row(i);
            for (pos, &(j, _)) in acts.iter().enumerate() {
                let j = j as usize;
                let da = dz_rows[i][pos];
                if da == 0.0 {
                    continue;
                }
                grad_b_enc[j] += da;
                let gw = &mut grad_w_enc[j * d_in..(j + 1) * d_in];
                for (g, &xv) in gw.iter_mut().zip(xr.iter()) {
                    *g += da * xv;
                }
            }
        }

        // JumpReLU: straight-through gradients for thresholds, plus the L0
        // penalty, using the rectangle kernel over near-threshold entries.
        if is_jump {
            if let ActivationRule::JumpRelu { thresholds } = &sae.rule {
                let inv_bw = 1.0 / JUMPRELU_BANDWIDTH;
                let gscale = (2.0 * inv_nd) as f32;
                for &(i, j) in &near {
                    // dz at (i, j): prefixes are always [d_sae] for JumpReLU,
                    // so recompute the row residual directly (rows are sparse
                    // and near-threshold entries are rare).
                    let xr = x.row(i);
                    let acts = &act_rows[i];
                    let wrow = sae.w_dec.row(j);
                    let mut recon_dot = 0.0f32;
                    for d in 0..d_in {
                        let mut rv = sae.b_dec[d];
                        for &(jj, zv) in acts.iter() {
                            rv += zv * sae.w_dec[(jj as usize, d)];
                        }
                        recon_dot += gscale * (rv - xr[d]) * wrow[d];
                    }
                    let theta = thresholds[j] as f64;
                    // d z / d theta = -theta/eps inside the kernel window.
                    grad_theta[j] += (recon_dot as f64 * (-theta * inv_bw)) as f32;
                    // d L0 / d theta = -1/(N eps) per in-window entry.
                    grad_theta[j] -= (l0_coeff * inv_bw / n as f64) as f32;
                }
                let active_count: usize = act_rows.iter().map(|a| a.len()).sum();
                loss += l0_coeff * active_count as f64 / n as f64;
            }
        }

        if !loss.is_finite() {
            return Err(Error::Training {
                step: step as usize,
                reason: format!("non-finite loss {loss}"),
            });
        }

        // Linear LR decay over the final fraction.
        let progress = (samples_seen + n as u64).min(total) as f64 / total as f64;
        let decay_start = 1.0 - cfg.lr_decay_fraction;
        let lr = if progress <= decay_start {
            cfg.lr
        } else {
            cfg.lr * ((1.0 - progress) / cfg.lr_decay_fraction).max(0.0)
        };

        let t = step as i32 + 1;
        adam_w_enc.update(sae.w_enc.as_slice_mut().unwrap(), &grad_w_enc, lr, t, cfg);
        adam_b_enc.update(sae.b_enc.as_slice_mut().unwrap(), &grad_b_enc, lr, t, cfg);
        adam_w_dec.update(sae.w_dec.as_slice_mut().unwrap(), &grad_w_dec, lr, t, cfg);
        adam_b_dec.update(sae.b_dec.as_slice_mut().unwrap(), &grad_b_dec, lr, t, cfg);
        if let ActivationRule::JumpRelu { thresholds } = &mut sae.rule {
            adam_theta.update(thresholds, &grad_theta, lr * JUMPRELU_THETA_LR_MULT, t, cfg);
            for t in thresholds.iter_mut() {
                *t = t.max(0.0);
            }
        }

        normalize_rows(&mut sae.w_dec);

        samples_seen = (samples_seen + n as u64).min(total);
        while sched_pos < schedule.len() && schedule[sched_pos] <= samples_seen {
            let mut snap = sae.clone();
            snap.provenance.samples_seen = schedule[sched_pos];
            snapshots.push((schedule[sched_pos], snap));
            sched_pos += 1;
        }
    }

    Ok(snapshots)
}

/// Log-uniform prefix sample: `count` widths with log(w) uniform in
/// [log w_min, log d_sae], deduplicated, sorted, clamped to
/// [w_min, d_sae - 1], with the full width always appended.
pub fn sample_log_uniform_prefixes(
    g: &mut impl Rng,
    count: usize,
    w_min: usize,
    d_sae: usize,
) -> Vec<usize> {
    let lo = (w_min as f64).ln();
    let hi = (d_sae as f64).ln();
    let mut widths: Vec<usize> = (0..count)
        .map(|_| {
            let w = (lo + g.gen::<f64>() * (hi - lo)).exp().round() as usize;
            w.clamp(w_min, d_sae.saturating_sub(1).max(w_min))
        })
        .collect();
    widths.sort_unstable();
    widths.dedup();
    widths.push(d_sae);
    widths
}

/// Mean L0 of the final snapshot of a pilot run, used by the JumpReLU
/// penalty search.
fn pilot_l0(source: &FeatureModel, cfg: &TrainConfig, coeff: f64) -> Result<f64> {
    let pilot_total = (cfg.total_samples / 5)
        .clamp(16 * cfg.batch_size as u64, 150_000)
        .min(cfg.total_samples);
    let pilot_cfg = TrainConfig {
        total_samples: pilot_total,
        snapshot_schedule: vec![pilot_total],
        ..cfg.clone()
    };
    let arch = ArchSpec::JumpRelu { target_l0: 0.0 };
    let snaps = train_inner(source, &arch, &pilot_cfg, coeff)?;
    let (_, sae) = snaps.last().ok_or_else(|| Error::config("pilot produced no snapshot"))?;
    let mut eval_seed = rng::stream("jumprelu-pilot-eval", cfg.seed, &[]);
    let eval = sample_batch(source, 2048, eval_seed.gen::<u64>())?;
    Ok(super::core_metrics(sae, &eval)?.mean_l0)
}

/// Binary-search the L0 penalty coefficient across short pilot runs until
/// the pilot's mean L0 lands within 10% of the target.
fn calibrate_jumprelu_coeff(
    source: &FeatureModel,
    target_l0: f64,
    cfg: &TrainConfig,
) -> Result<f64> {
    if target_l0 <= 0.0 {
        return Err(Error::config("jumprelu target L0 must be > 0"));
    }
    let tol = 0.1 * target_l0;
    let mut lo = 1e-6;
    let l0_lo = pilot_l0(source, cfg, lo)?;
    if l0_lo < target_l0 - tol {
        return Err(Error::Training {
            step: 0,
            reason: format!(
                "L0 penalty search not bracketing: pilot L0 {l0_lo:.1} below target {target_l0}"
            ),
        });
    }
    if (l0_lo - target_l0).abs() <= tol {
        return Ok(lo);
    }
    let mut hi = 1e-4;
    let mut l0_hi = pilot_l0(source, cfg, hi)?;
    let mut growths = 0;
    while l0_hi > target_l0 && growths < 14 {
        hi *= 4.0;
        l0_hi = pilot_l0(source, cfg, hi)?;
        growths += 1;
    }
    if l0_hi > target_l0 + tol {
        return Err(Error::Training {
            step: 0,
            reason: "L0 penalty search not bracketing from above".into(),
        });
    }
    for _ in 0..12 {
        let mid = (lo.ln() / 2.0 + hi.ln() / 2.0).exp();
        let l0_mid = pilot_l0(source, cfg, mid)?;
        if (l0_mid - target_l0).abs() <= tol {
            return Ok(mid);
        }
        if l0_mid > target_l0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Training {
        step: 0,
        reason: format!("L0 penalty search did not converge to {target_l0} +/- 10%"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sae::{core_metrics, make_control, ControlKind};
    use crate::synthgen::{build_model, GeneratorParams, HierarchySpec};

    fn tiny_model() -> FeatureModel {
        let spec = HierarchySpec { num_trees: 2, branching: 2, depth: 2, num_nonhier: 10 };
        build_model(
            spec,
            16,
            3,
            GeneratorParams { zipf_p_max: 0.5, zipf_alpha: 0.2, ..Default::default() },
        )
        .unwrap()
    }

    fn tiny_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            d_sae: 16,
            total_samples: 40_000,
            batch_size: 256,
            lr: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lr_decay_fraction: 0.2,
            snapshot_schedule: vec![0, 20_000, 40_000],
            seed,
        }
    }

    #[test]
    fn arch_spec_parsing() {
        assert_eq!(ArchSpec::parse("batchtopk:k=32").unwrap(), ArchSpec::BatchTopK { k: 32 });
        assert_eq!(
            ArchSpec::parse("relu_l1:c=0.0005").unwrap(),
            ArchSpec::ReluL1 { l1_coeff: 0.0005 }
        );
        assert_eq!(
            ArchSpec::parse("jumprelu:l0=25").unwrap(),
            ArchSpec::JumpRelu { target_l0: 25.0 }
        );
        assert_eq!(
            ArchSpec::parse("matryoshka:k=32,loguniform,n=4,wmin=64").unwrap(),
            ArchSpec::Matryoshka {
                k: 32,
                prefix_mode: Some(PrefixMode::LogUniform { n: 4, w_min: 64 })
            }
        );
        assert_eq!(
            ArchSpec::parse("matryoshka:k=8,prefixes=4-8-16").unwrap(),
            ArchSpec::Matryoshka { k: 8, prefix_mode: Some(PrefixMode::Fixed(vec![4, 8, 16])) }
        );
        assert!(ArchSpec::parse("mystery:k=1").is_err());
    }

    #[test]
    fn zero_schedule_returns_initialization_only() {
        let model = tiny_model();
        let cfg = TrainConfig { snapshot_schedule: vec![0], ..tiny_cfg(1) };
        let snaps = train(&model, &ArchSpec::BatchTopK { k: 4 }, &cfg).unwrap();
        assert_eq!(snaps.len(), 1);
        assert_eq!(snaps[0].0, 0);
        assert_eq!(snaps[0].1.provenance.samples_seen, 0);
    }

    #[test]
    fn training_is_deterministic() {
        let model = tiny_model();
        let snaps_a = train(&model, &ArchSpec::BatchTopK { k: 4 }, &tiny_cfg(7)).unwrap();
        let snaps_b = train(&model, &ArchSpec::BatchTopK { k: 4 }, &tiny_cfg(7)).unwrap();
        for ((sa, a), (sb, b)) in snaps_a.iter().zip(&snaps_b) {
            assert_eq!(sa, sb);
            assert_eq!(a.w_enc, b.w_enc);
            assert_eq!(a.w_dec, b.w_dec);
            assert_eq!(a.b_enc, b.b_enc);
        }
        let snaps_c = train(&model, &ArchSpec::BatchTopK { k: 4 }, &tiny_cfg(8)).unwrap();
        assert_ne!(snaps_a.last().unwrap().1.w_enc, snaps_c.last().unwrap().1.w_enc);
    }

    #[test]
    fn decoder_rows_stay_unit_norm() {
        let model = tiny_model();
        let snaps = train(&model, &ArchSpec::BatchTopK { k: 4 }, &tiny_cfg(2)).unwrap();
        for (_, sae) in &snaps {
            for row in sae.w_dec.rows() {
                let norm: f64 = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-5, "row norm {norm}");
            }
        }
    }

    #[test]
    fn trained_beats_random_init_and_hits_k() {
        let model = tiny_model();
        let snaps = train(&model, &ArchSpec::BatchTopK { k: 4 }, &tiny_cfg(3)).unwrap();
        let final_sae = &snaps.last().unwrap().1;
        let eval = crate::synthgen::sample_batch(&model, 1024, 999).unwrap();
        let control = make_control(final_sae, ControlKind::RandomInit, &eval).unwrap();
        let m_trained = core_metrics(final_sae, &eval).unwrap();
        let m_control = core_metrics(&control, &eval).unwrap();
        assert!(
            m_trained.mse < m_control.mse,
            "trained {} vs control {}",
            m_trained.mse,
            m_control.mse
        );
        assert!((m_trained.mean_l0 - 4.0).abs() < 1e-9);
    }

    #[test]
    fn training_monotonicity_weak() {
        let model = tiny_model();
        for arch in [
            ArchSpec::BatchTopK { k: 4 },
            ArchSpec::ReluL1 { l1_coeff: 1e-4 },
            ArchSpec::Matryoshka { k: 4, prefix_mode: None },
        ] {
            let snaps = train(&model, &arch, &tiny_cfg(4)).unwrap();
            let eval = crate::synthgen::sample_batch(&model, 1024, 998).unwrap();
            let first_post = core_metrics(&snaps[1].1, &eval).unwrap();
            let last = core_metrics(&snaps.last().unwrap().1, &eval).unwrap();
            assert!(
                last.mse < first_post.mse,
                "{}: final {} vs first {}",
                arch.label(),
                last.mse,
                first_post.mse
            );
        }
    }

    #[test]
    fn log_uniform_prefixes_well_formed() {
        let mut g = rng::stream("test-prefix", 0, &[]);
        for _ in 0..200 {
            let p = sample_log_uniform_prefixes(&mut g, 4, 64, 512);
            assert_eq!(*p.last().unwrap(), 512);
            for w in p.windows(2) {
                assert!(w[0] < w[1], "not strictly increasing: {p:?}");
            }
            for &w in &p[..p.len() - 1] {
                assert!((64..512).contains(&w));
            }
        }
    }

    #[test]
    fn matryoshka_log_uniform_trains() {
        let model = tiny_model();
        let arch = ArchSpec::Matryoshka {
            k: 4,
            prefix_mode: Some(PrefixMode::LogUniform { n: 3, w_min: 4 }),
        };
        let snaps = train(&model, &arch, &tiny_cfg(5)).unwrap();
        assert_eq!(snaps.len(), 3);
    }

    #[test]
    fn jumprelu_calibrates_to_target_l0() {
        let model = tiny_model();
        let cfg = TrainConfig { total_samples: 60_000, ..tiny_cfg(6) };
        let cfg = TrainConfig { snapshot_schedule: vec![60_000], ..cfg };
        let snaps = train(&model, &ArchSpec::JumpRelu { target_l0: 4.0 }, &cfg).unwrap();
        let final_sae = &snaps.last().unwrap().1;
        let eval = crate::synthgen::sample_batch(&model, 2048, 997).unwrap();
        let m = core_metrics(final_sae, &eval).unwrap();
        assert!(
            (m.mean_l0 - 4.0).abs() <= 1.6,
            "jumprelu L0 {} far from target 4",
            m.mean_l0
        );
    }
}
