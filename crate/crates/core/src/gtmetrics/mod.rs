//! Ground-truth quality scores against the known dictionary: GT-MCC
//! (Hungarian-matched decoder cosines) and GT-F1 (firing agreement with each
//! latent's best-correlated feature).

mod hungarian;

pub use hungarian::{assignment_cost, brute_force_min_cost, hungarian};

use crate::error::{Error, Result};
use crate::sae::SaeModel;
use crate::synthgen::{ActivationBatch, FeatureModel};

/// Mean absolute cosine similarity between decoder rows and their
/// Hungarian-matched dictionary directions. Zero-norm decoder rows count as
/// cosine 0 against every feature.
pub fn gt_mcc(sae: &SaeModel, model: &FeatureModel) -> Result<f64> {
    let matched = gt_mcc_with_matching(sae, model)?;
    Ok(matched.score)
}

pub struct MccResult {
    pub score: f64,
    /// Matched feature index per latent (injective).
    pub matching: Vec<usize>,
}

pub fn gt_mcc_with_matching(sae: &SaeModel, model: &FeatureModel) -> Result<MccResult> {
    if sae.d_in != model.dim {
        return Err(Error::shape(format!(
            "sae d_in {} vs model dim {}",
            sae.d_in, model.dim
        )));
    }
    if sae.d_sae > model.num_features {
        return Err(Error::shape("more latents than dictionary features"));
    }
    let abs_cos = decoder_feature_abs_cosines(sae, model);
    let d_sae = sae.d_sae;
    let f = model.num_features;
    let mut cost = vec![0.0f64; d_sae * f];
    for j in 0..d_sae {
        for i in 0..f {
            cost[j * f + i] = 1.0 - abs_cos[j * f + i];
        }
    }
    let assignment = hungarian(&cost, d_sae, f)?;
    let mut total = 0.0f64;
    for (j, &i) in assignment.iter().enumerate() {
        total += abs_cos[j * f + i];
    }
    Ok(MccResult { score: total / d_sae as f64, matching: assignment })
}

/// |cos| between every decoder row and every dictionary direction,
/// accumulated in f64 so the oracle's self-matches are exact.
fn decoder_feature_abs_cosines(sae: &SaeModel, model: &FeatureModel) -> Vec<f64> {
    let d_sae = sae.d_sae;
    let f = model.num_features;
    let dim = sae.d_in;
    let mut dec_norm = vec![0.0f64; d_sae];
    for j in 0..d_sae {
        let row = sae.w_dec.row(j);
        dec_norm[j] = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    }
    let mut feat_norm = vec![0.0f64; f];
    for i in 0..f {
        let row = model.directions.row(i);
        feat_norm[i] = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    }
    let mut out = vec![0.0f64; d_sae * f];
    for j in 0..d_sae {
        if dec_norm[j] == 0.0 {
            continue;
        }
        let dec_row = sae.w_dec.row(j);
        for i in 0..f {
            if feat_norm[i] == 0.0 {
                continue;
            }
            let feat_row = model.directions.row(i);
            let mut dot = 0.0f64;
            for d in 0..dim {
                dot += dec_row[d] as f64 * feat_row[d] as f64;
            }
            out[j * f + i] = (dot / (dec_norm[j] * feat_norm[i])).abs();
        }
    }
    out
}

pub struct F1Result {
    pub score: f64,
    /// Matched feature per latent; None for latents that never fire.
    pub matching: Vec<Option<usize>>,
    /// Per-latent F1 (0 for never-firing latents).
    pub per_latent: Vec<f64>,
}

/// GT-F1: each latent is matched to the ground-truth feature whose firing
/// indicator best correlates with the latent's firing on the eval batch
/// (Pearson on binaries, ties to the lower feature index); the score is the
/// mean per-latent F1, counting never-firing latents as 0.
///
/// A feature counts as firing when its sampled magnitude is positive: a
/// rectified draw that clips to zero leaves no trace in the activation, so
/// no encoder can be penalized for missing it.
pub fn gt_f1(sae: &SaeModel, model: &FeatureModel, eval: &ActivationBatch) -> Result<f64> {
    Ok(gt_f1_with_matching(sae, model, eval)?.score)
}

pub fn gt_f1_with_matching(
    sae: &SaeModel,
    model: &FeatureModel,
    eval: &ActivationBatch,
) -> Result<F1Result> {
    if eval.is_empty() {
        return Err(Error::input("gt_f1 needs a nonempty eval batch"));
    }
    let n = eval.len();
    let d_sae = sae.d_sae;
    let f = model.num_features;
    let z = sae.encode(eval)?;

    // Latent firing counts and per-(latent, feature) co-firing counts.
    let mut latent_count = vec![0u32; d_sae];
    let mut feat_count = vec![0u32; f];
    let mut co = vec![0u32; d_sae * f];
    let mut firing_feats: Vec<u32> = Vec::new();
    for i in 0..n {
        firing_feats.clear();
        let (feats, mags) = eval.actives(i);
        for (&ff, &m) in feats.iter().zip(mags) {
            if m > 0.0 {
                firing_feats.push(ff);
                feat_count[ff as usize] += 1;
            }
        }
        let zrow = z.row(i);
        for (j, &v) in zrow.iter().enumerate() {
            if v > 0.0 {
                latent_count[j] += 1;
                let base = j * f;
                for &ff in &firing_feats {
                    co[base + ff as usize] += 1;
                }
            }
        }
    }

    let nf = n as f64;
    let mut per_latent = vec![0.0f64; d_sae];
    let mut matching = vec![None; d_sae];
    for j in 0..d_sae {
        let n1 = latent_count[j] as f64;
        if n1 == 0.0 {
            continue; // never fires: F1 = 0
        }
        let mut best_r = f64::NEG_INFINITY;
        let mut best_i = None;
        for i in 0..f {
            let m1 = feat_count[i] as f64;
            if m1 == 0.0 || m1 == nf {
                continue; // zero-variance feature indicator
            }
            let n11 = co[j * f + i] as f64;
            // Pearson on binary indicators.
            let num = nf * n11 - n1 * m1;
            let den = (n1 * (nf - n1) * m1 * (nf - m1)).sqrt();
            if den == 0.0 {
                continue;
            }
            let r = num / den;
            if r > best_r {
                best_r = r;
                best_i = Some(i);
            }
        }
        if best_i.is_none() {
            // Correlation is undefined for a latent that fires on every
            // sample; fall back to the best-F1 feature (ties to lower index).
            let mut best_f1 = f64::NEG_INFINITY;
            for i in 0..f {
                let m1 = feat_count[i] as f64;
                if m1 == 0.0 {
                    continue;
                }
                let n11 = co[j * f + i] as f64;
                let f1 = 2.0 * n11 / (n1 + m1);
                if f1 > best_f1 {
                    best_f1 = f1;
                    best_i = Some(i);
                }
            }
        }
        if let Some(i) = best_i {
            matching[j] = Some(i);
            let n11 = co[j * f + i] as f64;
            let m1 = feat_count[i] as f64;
            per_latent[j] = if n1 + m1 > 0.0 { 2.0 * n11 / (n1 + m1) } else { 0.0 };
        }
    }

    let score = per_latent.iter().sum::<f64>() / d_sae as f64;
    Ok(F1Result { score, matching, per_latent })
}
