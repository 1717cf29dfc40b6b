//! SAE architectures: encode/decode, training, degraded controls, oracle.

mod control;
mod train;

pub use control::{make_control, make_oracle, permute_decoder_coords, ControlKind};
pub use train::{default_snapshot_schedule, train, ArchSpec, TrainConfig};

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{ArrayData, Container};
use crate::synthgen::ActivationBatch;

/// Prefix selection for Matryoshka training losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PrefixMode {
    /// Strictly increasing widths ending at d_sae.
    Fixed(Vec<usize>),
    /// Per-step sample of `n` log-uniform widths in [w_min, d_sae].
    LogUniform { n: usize, w_min: usize },
}

/// The sparsifying activation; the only thing that differs across
/// architectures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ActivationRule {
    ReluL1 { l1_coeff: f64 },
    JumpRelu { thresholds: Vec<f32> },
    BatchTopK { k: usize },
    MatryoshkaBatchTopK { k: usize, prefix_mode: PrefixMode },
}

impl ActivationRule {
    pub fn validate(&self, d_sae: usize) -> Result<()> {
        match self {
            ActivationRule::ReluL1 { l1_coeff } => {
                if *l1_coeff < 0.0 {
                    return Err(Error::config("l1_coeff must be >= 0"));
                }
            }
            ActivationRule::JumpRelu { thresholds } => {
                if thresholds.len() != d_sae {
                    return Err(Error::shape("thresholds length must equal d_sae"));
                }
                if thresholds.iter().any(|t| *t < 0.0) {
                    return Err(Error::config("thresholds must be >= 0"));
                }
            }
            ActivationRule::BatchTopK { k } => {
                if *k > d_sae {
                    return Err(Error::config("k must be <= d_sae"));
                }
            }
            ActivationRule::MatryoshkaBatchTopK { k, prefix_mode } => {
                if *k > d_sae {
                    return Err(Error::config("k must be <= d_sae"));
                }
                match prefix_mode {
                    PrefixMode::Fixed(widths) => {
                        if widths.is_empty()
                            || widths.windows(2).any(|w| w[0] >= w[1])
                            || *widths.last().unwrap() != d_sae
                        {
                            return Err(Error::config(
                                "fixed prefixes must be strictly increasing and end at d_sae",
                            ));
                        }
                    }
                    PrefixMode::LogUniform { n, w_min } => {
                        if *w_min < 1 || *n < 1 {
                            return Err(Error::config("log-uniform needs n >= 1 and w_min >= 1"));
                        }
                        if *w_min > d_sae {
                            return Err(Error::config("w_min must be <= d_sae"));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn variant_label(&self) -> &'static str {
        match self {
            ActivationRule::ReluL1 { .. } => "relu_l1",
            ActivationRule::JumpRelu { .. } => "jumprelu",
            ActivationRule::BatchTopK { .. } => "batchtopk",
            ActivationRule::MatryoshkaBatchTopK { .. } => "matryoshka_batchtopk",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControlTag {
    None,
    RandomInit,
    RandomL0Matched,
    PermutedDecoder,
    Oracle,
}

impl ControlTag {
    pub fn label(&self) -> &'static str {
        match self {
            ControlTag::None => "none",
            ControlTag::RandomInit => "random_init",
            ControlTag::RandomL0Matched => "random_l0_matched",
            ControlTag::PermutedDecoder => "permuted_decoder",
            ControlTag::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub arch: String,
    pub train_seed: u64,
    pub samples_seen: u64,
    pub control: ControlTag,
}

/// Encoder/decoder pair plus activation rule. `w_enc` and `w_dec` are both
/// stored d_sae x d_in; row `j` of `w_dec` is latent j's direction in
/// activation space.
#[derive(Debug, Clone)]
pub struct SaeModel {
    pub d_in: usize,
    pub d_sae: usize,
    pub w_enc: Array2<f32>,
    pub b_enc: Array1<f32>,
    pub w_dec: Array2<f32>,
    pub b_dec: Array1<f32>,
    pub rule: ActivationRule,
    pub provenance: Provenance,
}

impl SaeModel {
    pub fn is_oracle(&self) -> bool {
        self.provenance.control == ControlTag::Oracle
    }

    /// Pre-activations `x W_enc^T + b_enc`.
    pub(crate) fn preactivations(&self, x: ArrayView2<f32>) -> Result<Array2<f32>> {
        if x.ncols() != self.d_in {
            return Err(Error::shape(format!(
                "input has {} columns, encoder expects {}",
                x.ncols(),
                self.d_in
            )));
        }
        let mut a = x.dot(&self.w_enc.t());
        a += &self.b_enc;
        Ok(a)
    }

    /// Encode raw activations. Errors for the oracle, which has no weight
    /// encoder and needs ground truth from the batch.
    pub fn encode_x(&self, x: ArrayView2<f32>) -> Result<Array2<f32>> {
        if self.is_oracle() {
            return Err(Error::input(
                "oracle encoder needs a ground-truth batch; use encode()",
            ));
        }
        let mut a = self.preactivations(x)?;
        match &self.rule {
            ActivationRule::ReluL1 { .. } => {
                a.mapv_inplace(|v| v.max(0.0));
            }
            ActivationRule::JumpRelu { thresholds } => {
                for mut row in a.rows_mut() {
                    for (v, &t) in row.iter_mut().zip(thresholds.iter()) {
                        if *v <= t {
                            *v = 0.0;
                        }
                    }
                }
            }
            ActivationRule::BatchTopK { k }
            | ActivationRule::MatryoshkaBatchTopK { k, .. } => {
                a.mapv_inplace(|v| v.max(0.0));
                batch_topk_inplace(&mut a, *k);
            }
        }
        Ok(a)
    }

    /// Encode a ground-truth batch. The oracle returns the exact magnitudes
    /// of the first d_sae features; every other rule reads only `batch.x`.
    pub fn encode(&self, batch: &ActivationBatch) -> Result<Array2<f32>> {
        if self.is_oracle() {
            Ok(batch.magnitudes_dense(self.d_sae))
        } else {
            self.encode_x(batch.x.view())
        }
    }

    /// Reconstruct `z W_dec + b_dec`.
    pub fn decode(&self, z: ArrayView2<f32>) -> Result<Array2<f32>> {
        if z.ncols() != self.d_sae {
            return Err(Error::shape(format!(
                "latents have {} columns, decoder expects {}",
                z.ncols(),
                self.d_sae
            )));
        }
        let mut out = z.dot(&self.w_dec);
        out += &self.b_dec;
        Ok(out)
    }
}

/// Keep the k*N largest positive entries of the batch, zeroing the rest.
/// Ties at the cut are resolved in row-major order so the result is
/// deterministic; with tie-free inputs exactly k*N entries survive (or all
/// positives, when fewer exist).
pub fn batch_topk_inplace(a: &mut Array2<f32>, k: usize) {
    let keep_target = k.saturating_mul(a.nrows());
    let mut positives: Vec<f32> = a.iter().copied().filter(|&v| v > 0.0).collect();
    if positives.len() <= keep_target {
        return;
    }
    let cut_idx = positives.len() - keep_target;
    let (_, &mut threshold, _) = positives
        .select_nth_unstable_by(cut_idx, |x, y| x.partial_cmp(y).unwrap());
    let above = positives[cut_idx..].iter().filter(|&&v| v > threshold).count();
    let mut eq_budget = keep_target - above;
    for v in a.iter_mut() {
        if *v <= 0.0 {
            *v = 0.0;
        } else if *v < threshold {
            *v = 0.0;
        } else if *v == threshold {
            if eq_budget > 0 {
                eq_budget -= 1;
            } else {
                *v = 0.0;
            }
        }
    }
}

/// Core reconstruction statistics on one batch.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CoreMetrics {
    pub mse: f64,
    pub explained_variance: f64,
    pub mean_l0: f64,
    pub frac_alive: f64,
    pub mean_cossim: f64,
}

pub fn core_metrics(sae: &SaeModel, batch: &ActivationBatch) -> Result<CoreMetrics> {
    if batch.is_empty() {
        return Err(Error::input("core_metrics needs a nonempty batch"));
    }
    let z = sae.encode(batch)?;
    let xhat = sae.decode(z.view())?;
    let x = &batch.x;
    let n = x.nrows();
    let d = x.ncols();

    let mut sq_err = 0.0f64;
    let mut cos_sum = 0.0f64;
    for i in 0..n {
        let xr = x.row(i);
        let hr = xhat.row(i);
        let mut err = 0.0f64;
        let mut dot = 0.0f64;
        let mut nx = 0.0f64;
        let mut nh = 0.0f64;
        for (&a, &b) in xr.iter().zip(hr.iter()) {
            let (a, b) = (a as f64, b as f64);
            err += (a - b) * (a - b);
            dot += a * b;
            nx += a * a;
            nh += b * b;
        }
        sq_err += err;
        if nx > 0.0 && nh > 0.0 {
            cos_sum += dot / (nx.sqrt() * nh.sqrt());
        }
    }

    let mean = x.mean_axis(Axis(0)).unwrap();
    let mut total_var = 0.0f64;
    for i in 0..n {
        for (j, &v) in x.row(i).iter().enumerate() {
            let dvc = v as f64 - mean[j] as f64;
            total_var += dvc * dvc;
        }
    }

    let nonzeros = z.iter().filter(|&&v| v > 0.0).count();
    let mut alive = vec![false; sae.d_sae];
    for row in z.rows() {
        for (j, &v) in row.iter().enumerate() {
            if v > 0.0 {
                alive[j] = true;
            }
        }
    }

    Ok(CoreMetrics {
        mse: sq_err / (n as f64 * d as f64),
        explained_variance: if total_var > 0.0 { 1.0 - sq_err / total_var } else { f64::NAN },
        mean_l0: nonzeros as f64 / n as f64,
        frac_alive: alive.iter().filter(|&&b| b).count() as f64 / sae.d_sae as f64,
        mean_cossim: cos_sum / n as f64,
    })
}

#[derive(Serialize, Deserialize)]
struct SaeManifest {
    d_in: usize,
    d_sae: usize,
    rule: ActivationRule,
    provenance: Provenance,
}

pub fn save_sae(sae: &SaeModel, path: &Path) -> Result<()> {
    // Thresholds ride in the binary payload for bit-exactness; the manifest
    // copy of the rule carries an empty placeholder.
    let mut manifest_rule = sae.rule.clone();
    if let ActivationRule::JumpRelu { thresholds } = &mut manifest_rule {
        thresholds.clear();
    }
    let manifest = serde_json::to_value(SaeManifest {
        d_in: sae.d_in,
        d_sae: sae.d_sae,
        rule: manifest_rule,
        provenance: sae.provenance.clone(),
    })
    .unwrap();
    let mut c = Container::new("sae_model", manifest);
    c.push(
        "w_enc",
        vec![sae.d_sae, sae.d_in],
        ArrayData::F32(sae.w_enc.iter().copied().collect()),
    );
    c.push("b_enc", vec![sae.d_sae], ArrayData::F32(sae.b_enc.to_vec()));
    c.push(
        "w_dec",
        vec![sae.d_sae, sae.d_in],
        ArrayData::F32(sae.w_dec.iter().copied().collect()),
    );
    c.push("b_dec", vec![sae.d_in], ArrayData::F32(sae.b_dec.to_vec()));
    if let ActivationRule::JumpRelu { thresholds } = &sae.rule {
        c.push("thresholds", vec![thresholds.len()], ArrayData::F32(thresholds.clone()));
    }
    c.write(path)
}

pub fn load_sae(path: &Path) -> Result<SaeModel> {
    let c = Container::read(path, "sae_model")?;
    let manifest: SaeManifest = serde_json::from_value(c.manifest.clone())
        .map_err(|e| Error::format(format!("sae manifest: {e}")))?;
    let mut rule = manifest.rule;
    if let ActivationRule::JumpRelu { thresholds } = &mut rule {
        *thresholds = c.array("thresholds")?.as_f32()?.to_vec();
    }
    Ok(SaeModel {
        d_in: manifest.d_in,
        d_sae: manifest.d_sae,
        w_enc: Array2::from_shape_vec(
            (manifest.d_sae, manifest.d_in),
            c.array("w_enc")?.as_f32()?.to_vec(),
        )
        .map_err(|e| Error::format(format!("w_enc shape: {e}")))?,
        b_enc: Array1::from_vec(c.array("b_enc")?.as_f32()?.to_vec()),
        w_dec: Array2::from_shape_vec(
            (manifest.d_sae, manifest.d_in),
            c.array("w_dec")?.as_f32()?.to_vec(),
        )
        .map_err(|e| Error::format(format!("w_dec shape: {e}")))?,
        b_dec: Array1::from_vec(c.array("b_dec")?.as_f32()?.to_vec()),
        rule,
        provenance: manifest.provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{build_model, sample_batch, GeneratorParams, HierarchySpec};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn toy_sae(rule: ActivationRule, d_in: usize, d_sae: usize) -> SaeModel {
        SaeModel {
            d_in,
            d_sae,
            w_enc: Array2::from_shape_fn((d_sae, d_in), |(j, i)| {
                ((j * 31 + i * 17) % 13) as f32 / 13.0 - 0.4
            }),
            b_enc: Array1::zeros(d_sae),
            w_dec: Array2::from_shape_fn((d_sae, d_in), |(j, i)| {
                ((j * 7 + i * 3) % 11) as f32 / 11.0 - 0.5
            }),
            b_dec: Array1::zeros(d_in),
            rule,
            provenance: Provenance {
                arch: "toy".into(),
                train_seed: 0,
                samples_seen: 0,
                control: ControlTag::None,
            },
        }
    }

    #[test]
    fn relu_encode_is_nonnegative() {
        let sae = toy_sae(ActivationRule::ReluL1 { l1_coeff: 0.0 }, 4, 6);
        let x = array![[1.0f32, -2.0, 0.5, 3.0], [0.0, 1.0, -1.0, 2.0]];
        let z = sae.encode_x(x.view()).unwrap();
        assert!(z.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn batchtopk_keeps_exactly_k_n_nonzeros() {
        let mut g = crate::rng::stream("test-topk", 1, &[]);
        use rand::Rng;
        let a = Array2::from_shape_fn((256, 64), |_| g.gen::<f32>() * 2.0 - 0.5);
        let sae_input = a.clone();
        let mut sae = toy_sae(ActivationRule::BatchTopK { k: 5 }, 64, 64);
        sae.w_enc = Array2::eye(64);
        let z = sae.encode_x(sae_input.view()).unwrap();
        let nonzeros = z.iter().filter(|&&v| v > 0.0).count();
        assert_eq!(nonzeros, 5 * 256);
    }

    #[test]
    fn batchtopk_with_full_k_equals_relu() {
        let sae_topk = toy_sae(ActivationRule::BatchTopK { k: 6 }, 4, 6);
        let sae_relu = toy_sae(ActivationRule::ReluL1 { l1_coeff: 0.0 }, 4, 6);
        let x = array![[1.0f32, -2.0, 0.5, 3.0], [0.2, 1.0, -1.0, 2.0]];
        assert_eq!(
            sae_topk.encode_x(x.view()).unwrap(),
            sae_relu.encode_x(x.view()).unwrap()
        );
    }

    #[test]
    fn jumprelu_threshold_gates() {
        let mut sae = toy_sae(ActivationRule::JumpRelu { thresholds: vec![0.5; 3] }, 3, 3);
        sae.w_enc = Array2::eye(3);
        let x = array![[0.4f32, 0.5, 0.6]];
        let z = sae.encode_x(x.view()).unwrap();
        assert_eq!(z, array![[0.0f32, 0.0, 0.6]]); // kept only when strictly above
    }

    #[test]
    fn decode_zero_gives_bias() {
        let mut sae = toy_sae(ActivationRule::ReluL1 { l1_coeff: 0.0 }, 4, 6);
        sae.b_dec = array![1.0f32, 2.0, 3.0, 4.0];
        let z = Array2::zeros((3, 6));
        let out = sae.decode(z.view()).unwrap();
        for row in out.rows() {
            assert_eq!(row.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn decode_one_hot_is_scaled_row() {
        let sae = toy_sae(ActivationRule::ReluL1 { l1_coeff: 0.0 }, 4, 6);
        let mut z = Array2::zeros((1, 6));
        z[(0, 2)] = 2.5f32;
        let out = sae.decode(z.view()).unwrap();
        for (i, (o, &w)) in out.row(0).iter().zip(sae.w_dec.row(2).iter()).enumerate() {
            assert_abs_diff_eq!(*o, 2.5 * w + sae.b_dec[i], epsilon = 1e-6);
        }
    }

    #[test]
    fn shape_mismatch_is_error() {
        let sae = toy_sae(ActivationRule::ReluL1 { l1_coeff: 0.0 }, 4, 6);
        let x = Array2::<f32>::zeros((2, 5));
        assert!(sae.encode_x(x.view()).is_err());
        let z = Array2::<f32>::zeros((2, 5));
        assert!(sae.decode(z.view()).is_err());
    }

    #[test]
    fn oracle_encode_returns_ground_truth_magnitudes() {
        let spec = HierarchySpec { num_trees: 2, branching: 2, depth: 2, num_nonhier: 4 };
        let model = build_model(spec, 16, 3, GeneratorParams::default()).unwrap();
        let oracle = make_oracle(&model, 8).unwrap();
        let batch = sample_batch(&model, 64, 5).unwrap();
        let z = oracle.encode(&batch).unwrap();
        for i in 0..batch.len() {
            for f in 0..8 {
                assert_eq!(z[(i, f)], batch.magnitude(i, f));
            }
        }
    }

    #[test]
    fn mean_predictor_has_zero_explained_variance() {
        let spec = HierarchySpec { num_trees: 2, branching: 2, depth: 2, num_nonhier: 4 };
        let model = build_model(spec, 16, 3, GeneratorParams::default()).unwrap();
        let batch = sample_batch(&model, 128, 5).unwrap();
        let mut sae = toy_sae(ActivationRule::ReluL1 { l1_coeff: 0.0 }, 16, 8);
        sae.w_enc = Array2::zeros((8, 16));
        sae.w_dec = Array2::zeros((8, 16));
        sae.b_dec = batch.x.mean_axis(Axis(0)).unwrap();
        let m = core_metrics(&sae, &batch).unwrap();
        assert_abs_diff_eq!(m.explained_variance, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn core_metrics_deterministic() {
        let spec = HierarchySpec { num_trees: 2, branching: 2, depth: 2, num_nonhier: 4 };
        let model = build_model(spec, 16, 3, GeneratorParams::default()).unwrap();
        let batch = sample_batch(&model, 64, 5).unwrap();
        let sae = toy_sae(ActivationRule::BatchTopK { k: 3 }, 16, 8);
        let a = core_metrics(&sae, &batch).unwrap();
        let b = core_metrics(&sae, &batch).unwrap();
        assert_eq!(a.frac_alive, b.frac_alive);
        assert_eq!(a.mse, b.mse);
    }

    #[test]
    fn sae_roundtrip_bit_exact() {
        let sae = toy_sae(ActivationRule::JumpRelu { thresholds: vec![0.1, 0.2, 0.3] }, 4, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sae.bin");
        save_sae(&sae, &path).unwrap();
        let sae2 = load_sae(&path).unwrap();
        assert_eq!(sae.w_enc, sae2.w_enc);
        assert_eq!(sae.w_dec, sae2.w_dec);
        assert_eq!(sae.rule, sae2.rule);
    }
}
