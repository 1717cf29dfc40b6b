//! Degraded control SAEs and the perfect oracle.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;
use crate::synthgen::{ActivationBatch, FeatureModel};

use super::train::normalize_rows;
use super::{ActivationRule, ControlTag, Provenance, SaeModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlKind {
    RandomInit,
    RandomL0Matched,
    PermutedDecoder,
}

impl ControlKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random_init" => Ok(ControlKind::RandomInit),
            "random_l0_matched" => Ok(ControlKind::RandomL0Matched),
            "permuted_decoder" => Ok(ControlKind::PermutedDecoder),
            other => Err(Error::config(format!("unknown control kind `{other}`"))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ControlKind::RandomInit => "random_init",
            ControlKind::RandomL0Matched => "random_l0_matched",
            ControlKind::PermutedDecoder => "permuted_decoder",
        }
    }

    fn tag(&self) -> ControlTag {
        match self {
            ControlKind::RandomInit => ControlTag::RandomInit,
            ControlKind::RandomL0Matched => ControlTag::RandomL0Matched,
            ControlKind::PermutedDecoder => ControlTag::PermutedDecoder,
        }
    }
}

fn random_weights(d_sae: usize, d_in: usize, seed_label: &str, seed: u64) -> (Array2<f32>, Array2<f32>) {
    let mut g = rng::stream(seed_label, seed, &[]);
    let scale = 1.0 / (d_in as f64).sqrt();
    let mut w_enc = Array2::<f32>::zeros((d_sae, d_in));
    for v in w_enc.iter_mut() {
        let n: f64 = StandardNormal.sample(&mut g);
        *v = (n * scale) as f32;
    }
    let mut w_dec = w_enc.clone();
    normalize_rows(&mut w_dec);
    (w_enc, w_dec)
}

/// Build a degraded control from a source SAE. Deterministic: randomness is
/// derived from the source's training seed and the control kind.
pub fn make_control(
    sae: &SaeModel,
    kind: ControlKind,
    calib: &ActivationBatch,
) -> Result<SaeModel> {
    let seed = sae.provenance.train_seed;
    match kind {
        ControlKind::RandomInit => {
            let (w_enc, w_dec) = random_weights(sae.d_sae, sae.d_in, "control-random-init", seed);
            let rule = match &sae.rule {
                ActivationRule::JumpRelu { thresholds } => ActivationRule::JumpRelu {
                    thresholds: vec![super::train::JUMPRELU_THRESHOLD_INIT; thresholds.len()],
                },
                other => other.clone(),
            };
            Ok(SaeModel {
                d_in: sae.d_in,
                d_sae: sae.d_sae,
                w_enc,
                b_enc: Array1::zeros(sae.d_sae),
                w_dec,
                b_dec: Array1::zeros(sae.d_in),
                rule,
                provenance: Provenance {
                    arch: sae.provenance.arch.clone(),
                    train_seed: seed,
                    samples_seen: 0,
                    control: kind.tag(),
                },
            })
        }
        ControlKind::RandomL0Matched => {
            if calib.is_empty() {
                return Err(Error::Control("random_l0_matched needs a calibration batch".into()));
            }
            let target_l0 = super::core_metrics(sae, calib)?.mean_l0;
            let (w_enc, w_dec) =
                random_weights(sae.d_sae, sae.d_in, "control-random-l0", seed);
            let probe = SaeModel {
                d_in: sae.d_in,
                d_sae: sae.d_sae,
                w_enc,
                b_enc: Array1::zeros(sae.d_sae),
                w_dec,
                b_dec: Array1::zeros(sae.d_in),
                rule: ActivationRule::ReluL1 { l1_coeff: 0.0 },
                provenance: Provenance {
                    arch: sae.provenance.arch.clone(),
                    train_seed: seed,
                    samples_seen: 0,
                    control: kind.tag(),
                },
            };
            // Single uniform threshold; mean L0 is monotone decreasing in it.
            let pre = probe.preactivations(calib.x.view())?;
            let n = calib.len() as f64;
            let l0_at = |t: f32| -> f64 {
                pre.iter().filter(|&&v| v > t).count() as f64 / n
            };
            let mut lo = 0.0f32;
            let mut hi = pre.iter().fold(0.0f32, |m, &v| m.max(v));
            if l0_at(lo) < target_l0 - 0.5 {
                return Err(Error::Control(format!(
                    "threshold search cannot bracket target L0 {target_l0:.2}: max {:.2}",
                    l0_at(lo)
                )));
            }
            let mut mid = 0.0f32;
            let mut matched = false;
            for _ in 0..80 {
                mid = 0.5 * (lo + hi);
                let l0 = l0_at(mid);
                if (l0 - target_l0).abs() <= 0.5 {
                    matched = true;
                    break;
                }
                if l0 > target_l0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            if !matched {
                return Err(Error::Control(format!(
                    "threshold search did not reach target L0 {target_l0:.2} within 0.5"
                )));
            }
            let mut out = probe;
            out.rule = ActivationRule::JumpRelu { thresholds: vec![mid; out.d_sae] };
            Ok(out)
        }
        ControlKind::PermutedDecoder => {
            let mut g = rng::stream("control-permute", seed, &[]);
            let mut perm: Vec<usize> = (0..sae.d_in).collect();
            perm.shuffle(&mut g);
            Ok(permute_decoder_coords(sae, &perm))
        }
    }
}

/// Apply a permutation to the decoder's activation-space coordinates
/// (the rows of the mathematical d_in x d_sae decoder matrix). The encoder
/// is untouched, so encode outputs stay bit-identical; every latent's
/// decoder direction is scrambled, so dictionary-matching scores crater.
pub fn permute_decoder_coords(sae: &SaeModel, perm: &[usize]) -> SaeModel {
    assert_eq!(perm.len(), sae.d_in, "permutation must cover d_in coordinates");
    let mut out = sae.clone();
    for (dst, &src) in perm.iter().enumerate() {
        for j in 0..sae.d_sae {
            out.w_dec[(j, dst)] = sae.w_dec[(j, src)];
        }
    }
    out.provenance.control = ControlTag::PermutedDecoder;
    out.provenance.arch = sae.provenance.arch.clone();
    out
}

/// The perfect oracle: decoder rows are the first `width` dictionary
/// directions; encoding returns exact ground-truth magnitudes.
pub fn make_oracle(model: &FeatureModel, width: usize) -> Result<SaeModel> {
    if width > model.num_features {
        return Err(Error::config(format!(
            "oracle width {width} exceeds {} features",
            model.num_features
        )));
    }
    let mut w_dec = Array2::<f32>::zeros((width, model.dim));
    for j in 0..width {
        w_dec.row_mut(j).assign(&model.directions.row(j));
    }
    Ok(SaeModel {
        d_in: model.dim,
        d_sae: width,
        w_enc: Array2::zeros((width, model.dim)),
        b_enc: Array1::zeros(width),
        w_dec,
        b_dec: Array1::zeros(model.dim),
        // Rule is irrelevant: encode() dispatches on the oracle tag.
        rule: ActivationRule::ReluL1 { l1_coeff: 0.0 },
        provenance: Provenance {
            arch: "oracle".into(),
            train_seed: model.seed,
            samples_seen: 0,
            control: ControlTag::Oracle,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sae::{core_metrics, train, ArchSpec, TrainConfig};
    use crate::synthgen::{build_model, sample_batch, GeneratorParams, HierarchySpec};

    fn trained_pair() -> (FeatureModel, SaeModel, ActivationBatch) {
        let spec = HierarchySpec { num_trees: 2, branching: 2, depth: 2, num_nonhier: 10 };
        let model = build_model(
            spec,
            16,
            3,
            GeneratorParams { zipf_p_max: 0.5, zipf_alpha: 0.2, ..Default::default() },
        )
        .unwrap();
        let cfg = TrainConfig {
            d_sae: 16,
            total_samples: 30_000,
            batch_size: 256,
            lr: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lr_decay_fraction: 0.2,
            snapshot_schedule: vec![30_000],
            seed: 5,
        };
        let snaps = train(&model, &ArchSpec::BatchTopK { k: 4 }, &cfg).unwrap();
        let sae = snaps.into_iter().last().unwrap().1;
        let calib = sample_batch(&model, 2048, 123).unwrap();
        (model, sae, calib)
    }

    #[test]
    fn permuted_decoder_keeps_encoder_bit_identical() {
        let (_, sae, calib) = trained_pair();
        let control = make_control(&sae, ControlKind::PermutedDecoder, &calib).unwrap();
        assert_eq!(sae.w_enc, control.w_enc);
        assert_eq!(sae.b_enc, control.b_enc);
        let za = sae.encode(&calib).unwrap();
        let zb = control.encode(&calib).unwrap();
        assert_eq!(za, zb);
        assert_ne!(sae.w_dec, control.w_dec);
    }

    #[test]
    fn identity_permutation_is_exactly_source() {
        let (_, sae, _) = trained_pair();
        let perm: Vec<usize> = (0..sae.d_in).collect();
        let control = permute_decoder_coords(&sae, &perm);
        assert_eq!(sae.w_dec, control.w_dec);
        assert_eq!(sae.w_enc, control.w_enc);
    }

    #[test]
    fn random_l0_matched_hits_target() {
        let (_, sae, calib) = trained_pair();
        let control = make_control(&sae, ControlKind::RandomL0Matched, &calib).unwrap();
        let target = core_metrics(&sae, &calib).unwrap().mean_l0;
        let got = core_metrics(&control, &calib).unwrap().mean_l0;
        assert!(
            (got - target).abs() <= 0.5,
            "control L0 {got:.2} vs source {target:.2}"
        );
        assert_eq!(control.provenance.control, ControlTag::RandomL0Matched);
    }

    #[test]
    fn oracle_scores_perfectly_by_construction() {
        let (model, _, _) = trained_pair();
        let oracle = make_oracle(&model, 8).unwrap();
        assert!(oracle.is_oracle());
        for j in 0..8 {
            assert_eq!(oracle.w_dec.row(j), model.directions.row(j));
        }
        assert!(make_oracle(&model, model.num_features + 1).is_err());
    }

    #[test]
    fn full_width_oracle_reconstructs_exactly() {
        let (model, _, _) = trained_pair();
        let oracle = make_oracle(&model, model.num_features).unwrap();
        let batch = sample_batch(&model, 256, 77).unwrap();
        let m = core_metrics(&oracle, &batch).unwrap();
        assert!(m.mse < 1e-10, "oracle mse {}", m.mse);
        assert!(m.explained_variance > 1.0 - 1e-9);
    }

    #[test]
    fn narrow_oracle_mse_equals_out_of_sae_residual() {
        let (model, _, _) = trained_pair();
        let width = 8;
        let oracle = make_oracle(&model, width).unwrap();
        let batch = sample_batch(&model, 512, 78).unwrap();
        let m = core_metrics(&oracle, &batch).unwrap();
        // Residual is exactly the contribution of features >= width.
        let mut expect = 0.0f64;
        for i in 0..batch.len() {
            let (feats, mags) = batch.actives(i);
            let mut r = vec![0.0f64; model.dim];
            for (&f, &c) in feats.iter().zip(mags) {
                if f as usize >= width {
                    for (d, rv) in r.iter_mut().enumerate() {
                        *rv += c as f64 * model.directions[(f as usize, d)] as f64;
                    }
                }
            }
            expect += r.iter().map(|v| v * v).sum::<f64>();
        }
        let expect = expect / (batch.len() as f64 * model.dim as f64);
        assert!(
            (m.mse - expect).abs() <= 1e-9 * expect.max(1.0),
            "oracle mse {} vs residual {expect}",
            m.mse
        );
    }
}
