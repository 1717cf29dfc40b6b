//! Proxy-metric evaluation against a pre-encoded pool. The pool is encoded
//! once per (SAE, task seed); tasks slice rows out of it, so BatchTopK-style
//! rules see one consistent batch.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::probekit::{
    probe_accuracy, select_topk_latents, train_logistic_selected, LabeledSplit, Probe,
    ProbeConfig,
};
use crate::sae::SaeModel;

use super::{ProbingTask, ScrPair, TaskPool, TppGroup};

/// Latents of the whole pool under one SAE.
pub struct EncodedPool {
    pub latents: Array2<f32>,
}

pub fn encode_pool(sae: &SaeModel, pool: &TaskPool) -> Result<EncodedPool> {
    Ok(EncodedPool { latents: sae.encode(&pool.batch)? })
}

fn gather_rows(latents: ArrayView2<f32>, idx: &[u32]) -> Array2<f32> {
    let mut out = Array2::zeros((idx.len(), latents.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&latents.row(i as usize));
    }
    out
}

/// Sparse probing: select the k most label-informative latents on the train
/// split, fit a logistic probe on them, report test accuracy.
pub fn eval_sparse_probing(
    enc: &EncodedPool,
    task: &ProbingTask,
    k: usize,
    cfg: &ProbeConfig,
) -> Result<f64> {
    let train_x = gather_rows(enc.latents.view(), &task.train_idx);
    let test_x = gather_rows(enc.latents.view(), &task.test_idx);
    let selected = select_topk_latents(train_x.view(), &task.train_labels, k)?;
    let split = LabeledSplit {
        train_x,
        train_y: task.train_labels.clone(),
        test_x,
        test_y: task.test_labels.clone(),
    };
    let probe = train_logistic_selected(&split, &selected, cfg)?;
    Ok(probe_accuracy(&probe, split.test_x.view(), &split.test_y))
}

/// Accuracy of a one-vs-rest probe from precomputed logits.
fn accuracy_from_logits(logits: &[f64], labels: &[bool]) -> f64 {
    let correct = logits
        .iter()
        .zip(labels)
        .filter(|(&f, &y)| (f > 0.0) == y)
        .count();
    correct as f64 / labels.len().max(1) as f64
}

fn probe_logits(probe: &Probe, x: ArrayView2<f32>) -> Vec<f64> {
    x.rows().into_iter().map(|r| probe.logit(r.as_slice().unwrap())).collect()
}

/// TPP: train four one-vs-rest probes on the full latents; for each focal
/// class, ablate the N latents whose single-latent zeroing most damages the
/// focal probe's test accuracy, and score the focal-vs-non-focal damage gap.
/// Returns one score per requested top-N.
pub fn eval_tpp_sweep(
    enc: &EncodedPool,
    group: &TppGroup,
    topns: &[usize],
    base_cfg: &ProbeConfig,
) -> Result<Vec<f64>> {
    let d_sae = enc.latents.ncols();
    let train_x = gather_rows(enc.latents.view(), &group.train_idx);
    let test_x = gather_rows(enc.latents.view(), &group.test_idx);

    for class in 0..4u8 {
        if !group.train_class.contains(&class) || !group.test_class.contains(&class) {
            return Err(Error::Task(format!("sibling class {class} has no samples")));
        }
    }

    let all_latents: Vec<usize> = (0..d_sae).collect();
    let mut probes = Vec::with_capacity(4);
    for class in 0..4u8 {
        let train_y: Vec<bool> = group.train_class.iter().map(|&c| c == class).collect();
        let test_y: Vec<bool> = group.test_class.iter().map(|&c| c == class).collect();
        let split = LabeledSplit {
            train_x: train_x.clone(),
            train_y,
            test_x: test_x.clone(),
            test_y,
        };
        let cfg = ProbeConfig {
            seed: crate::rng::derive_seed("tpp-probe", base_cfg.seed, &[class as u64]),
            ..*base_cfg
        };
        let probe = train_logistic_selected(&split, &all_latents, &cfg)?;
        probes.push((probe, split.test_y));
    }

    // Nonzero test entries per latent, for cheap single-latent adjustments.
    let n_test = test_x.nrows();
    let mut latent_rows: Vec<Vec<(u32, f32)>> = vec![Vec::new(); d_sae];
    for (i, row) in test_x.rows().into_iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v != 0.0 {
                latent_rows[j].push((i as u32, v));
            }
        }
    }

    let base_logits: Vec<Vec<f64>> =
        probes.iter().map(|(p, _)| probe_logits(p, test_x.view())).collect();
    let base_acc: Vec<f64> = probes
        .iter()
        .zip(&base_logits)
        .map(|((_, y), l)| accuracy_from_logits(l, y))
        .collect();

    let mut scores = vec![0.0f64; topns.len()];
    for focal in 0..4usize {
        let (fp, fy) = &probes[focal];
        // Damage of zeroing each single latent, exact through the linear probe.
        let base_correct: usize = base_logits[focal]
            .iter()
            .zip(fy)
            .filter(|(&f, &y)| (f > 0.0) == y)
            .count();
        let mut damage: Vec<(f64, usize)> = (0..d_sae)
            .map(|j| {
                let w = fp.weights[j];
                let mut correct = base_correct as isize;
                for &(i, v) in &latent_rows[j] {
                    let before = base_logits[focal][i as usize];
                    let after = before - w * v as f64;
                    let y = fy[i as usize];
                    let was = (before > 0.0) == y;
                    let now = (after > 0.0) == y;
                    correct += now as isize - was as isize;
                }
                let acc_j = correct as f64 / n_test as f64;
                (base_acc[focal] - acc_j, j)
            })
            .collect();
        damage.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

        for (ti, &topn) in topns.iter().enumerate() {
            let n_abl = topn.min(d_sae);
            if n_abl == 0 {
                continue; // zero ablation contributes exactly 0
            }
            let ablated: Vec<usize> = damage[..n_abl].iter().map(|&(_, j)| j).collect();
            let mut drops = [0.0f64; 4];
            for (p_idx, (probe, test_y)) in probes.iter().enumerate() {
                let mut adj = base_logits[p_idx].clone();
                for &j in &ablated {
                    let w = probe.weights[j];
                    if w == 0.0 {
                        continue;
                    }
                    for &(i, v) in &latent_rows[j] {
                        adj[i as usize] -= w * v as f64;
                    }
                }
                drops[p_idx] = base_acc[p_idx] - accuracy_from_logits(&adj, test_y);
            }
            let others: f64 = (0..4).filter(|&p| p != focal).map(|p| drops[p]).sum::<f64>() / 3.0;
            scores[ti] += (drops[focal] - others) / 4.0;
        }
    }
    Ok(scores)
}

pub fn eval_tpp(
    enc: &EncodedPool,
    group: &TppGroup,
    topn: usize,
    cfg: &ProbeConfig,
) -> Result<f64> {
    Ok(eval_tpp_sweep(enc, group, &[topn], cfg)?[0])
}

/// SCR: how much of the biased probe's accuracy gap to the oracle probe is
/// closed by ablating the N latents most associated with the spurious
/// attribute. Not clamped; negative scores are meaningful. Returns one
/// score per requested top-N, or a Task error when the oracle-minus-biased
/// gap is degenerate.
pub fn eval_scr_sweep(
    enc: &EncodedPool,
    pair: &ScrPair,
    topns: &[usize],
    base_cfg: &ProbeConfig,
    min_gap: f64,
) -> Result<Vec<f64>> {
    let d_sae = enc.latents.ncols();
    let all_latents: Vec<usize> = (0..d_sae).collect();

    // Cells in fixed order: TS, TnS, nTS, nTnS.
    let cell_train: Vec<Array2<f32>> = pair
        .cells_train
        .iter()
        .map(|idx| gather_rows(enc.latents.view(), idx))
        .collect();

    let mut test_idx_all = Vec::new();
    let mut test_t = Vec::new();
    for (cell, idx) in pair.cells_test.iter().enumerate() {
        test_idx_all.extend_from_slice(idx);
        let is_t = cell < 2;
        test_t.extend(std::iter::repeat(is_t).take(idx.len()));
    }
    let test_x = gather_rows(enc.latents.view(), &test_idx_all);

    // Biased probe: T on the confounded subset {T&S, !T&!S}.
    let biased_split = {
        let mut train_x =
            Array2::zeros((cell_train[0].nrows() + cell_train[3].nrows(), d_sae));
        let mut train_y = Vec::new();
        for (r, row) in cell_train[0].rows().into_iter().enumerate() {
            train_x.row_mut(r).assign(&row);
            train_y.push(true);
        }
        let off = cell_train[0].nrows();
        for (r, row) in cell_train[3].rows().into_iter().enumerate() {
            train_x.row_mut(off + r).assign(&row);
            train_y.push(false);
        }
        LabeledSplit { train_x, train_y, test_x: test_x.clone(), test_y: test_t.clone() }
    };
    let biased_cfg = ProbeConfig {
        seed: crate::rng::derive_seed("scr-probe", base_cfg.seed, &[0]),
        ..*base_cfg
    };
    let biased = train_logistic_selected(&biased_split, &all_latents, &biased_cfg)?;

    // Oracle probe: T on the un-confounded balanced split (all four cells).
    let oracle_split = {
        let rows: usize = cell_train.iter().map(|c| c.nrows()).sum();
        let mut train_x = Array2::zeros((rows, d_sae));
        let mut train_y = Vec::new();
        let mut r = 0;
        for (cell, x) in cell_train.iter().enumerate() {
            for row in x.rows() {
                train_x.row_mut(r).assign(&row);
                train_y.push(cell < 2);
                r += 1;
            }
        }
        LabeledSplit { train_x, train_y, test_x: test_x.clone(), test_y: test_t.clone() }
    };
    let oracle_cfg = ProbeConfig {
        seed: crate::rng::derive_seed("scr-probe", base_cfg.seed, &[1]),
        ..*base_cfg
    };
    let oracle = train_logistic_selected(&oracle_split, &all_latents, &oracle_cfg)?;

    let biased_logits = probe_logits(&biased, test_x.view());
    let acc_biased = accuracy_from_logits(&biased_logits, &test_t);
    let acc_oracle =
        accuracy_from_logits(&probe_logits(&oracle, test_x.view()), &test_t);
    let gap = acc_oracle - acc_biased;
    if gap < min_gap {
        return Err(Error::Task(format!(
            "degenerate oracle-biased gap {gap:.4} (oracle {acc_oracle:.4}, biased {acc_biased:.4})"
        )));
    }

    // Rank latents by the S=1 vs S=0 mean-activation difference on train.
    let mut mean_s1 = vec![0.0f64; d_sae];
    let mut mean_s0 = vec![0.0f64; d_sae];
    let (mut n1, mut n0) = (0usize, 0usize);
    for (cell, x) in cell_train.iter().enumerate() {
        let s_is_one = cell == 0 || cell == 2;
        for row in x.rows() {
            if s_is_one {
                n1 += 1;
            } else {
                n0 += 1;
            }
            for (j, &v) in row.iter().enumerate() {
                if s_is_one {
                    mean_s1[j] += v as f64;
                } else {
                    mean_s0[j] += v as f64;
                }
            }
        }
    }
    let mut assoc: Vec<(f64, usize)> = (0..d_sae)
        .map(|j| (mean_s1[j] / n1.max(1) as f64 - mean_s0[j] / n0.max(1) as f64, j))
        .collect();
    assoc.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

    let mut scores = Vec::with_capacity(topns.len());
    for &topn in topns {
        let n_abl = topn.min(d_sae);
        if n_abl == 0 {
            scores.push(0.0);
            continue;
        }
        let mut adj = biased_logits.clone();
        for &(_, j) in &assoc[..n_abl] {
            let w = biased.weights[j];
            if w == 0.0 {
                continue;
            }
            for (i, row) in test_x.rows().into_iter().enumerate() {
                let v = row[j];
                if v != 0.0 {
                    adj[i] -= w * v as f64;
                }
            }
        }
        let acc_after = accuracy_from_logits(&adj, &test_t);
        scores.push((acc_after - acc_biased) / gap);
    }
    Ok(scores)
}

pub fn eval_scr(
    enc: &EncodedPool,
    pair: &ScrPair,
    topn: usize,
    cfg: &ProbeConfig,
    min_gap: f64,
) -> Result<f64> {
    Ok(eval_scr_sweep(enc, pair, &[topn], cfg, min_gap)?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proxymetrics::{generate_suite, BoolExpr, ExprShape, ProbingCategory, TaskGenParams};
    use crate::sae::{make_oracle, permute_decoder_coords};
    use crate::synthgen::{build_model, GeneratorParams, HierarchySpec};
    use ndarray::Array2;

    struct Fixture {
        model: crate::synthgen::FeatureModel,
        suite: crate::proxymetrics::TaskSuite,
        pool: TaskPool,
    }

    fn fixture() -> &'static Fixture {
        use std::sync::OnceLock;
        static FIX: OnceLock<Fixture> = OnceLock::new();
        FIX.get_or_init(|| {
            let model = build_model(
                HierarchySpec::default(),
                128,
                0,
                GeneratorParams::default(),
            )
            .unwrap();
            let suite = generate_suite(&model, 512, 1234, &TaskGenParams::default()).unwrap();
            let pool =
                crate::proxymetrics::draw_pool(&model, suite.seed, suite.pool_size).unwrap();
            Fixture { model, suite, pool }
        })
    }

    #[test]
    fn oracle_single_in_probing_is_perfect_at_k1() {
        let fx = fixture();
        let oracle = make_oracle(&fx.model, 512).unwrap();
        let enc = encode_pool(&oracle, &fx.pool).unwrap();
        for task in fx
            .suite
            .probing
            .iter()
            .filter(|t| t.category == ProbingCategory::SingleIn)
            .take(6)
        {
            let feat = task.expr.leaves()[0];
            // Top-1 selection picks the target feature's own latent, and
            // thresholding it at zero reproduces the labels exactly.
            let train_x = gather_rows(enc.latents.view(), &task.train_idx);
            let sel = select_topk_latents(train_x.view(), &task.train_labels, 1).unwrap();
            assert_eq!(sel, vec![feat]);
            for (&i, &y) in task.test_idx.iter().zip(&task.test_labels) {
                assert_eq!(enc.latents[(i as usize, feat)] > 0.0, y);
            }
            let acc =
                eval_sparse_probing(&enc, task, 1, &ProbeConfig::sparse_probing(42)).unwrap();
            assert!(
                (acc - 1.0).abs() < 1e-12,
                "oracle accuracy {acc} on {}",
                task.expr.to_text()
            );
        }
    }

    #[test]
    fn permuted_decoder_probing_is_bit_identical() {
        let fx = fixture();
        let oracle = make_oracle(&fx.model, 512).unwrap();
        // Use a weight-encoder SAE so encode_x is exercised; build a random one.
        let mut g = crate::rng::stream("perm-test", 0, &[]);
        use rand::Rng;
        let mut sae = oracle.clone();
        sae.provenance.control = crate::sae::ControlTag::None;
        sae.w_enc = Array2::from_shape_fn((512, 128), |_| g.gen::<f32>() - 0.5);
        sae.rule = crate::sae::ActivationRule::BatchTopK { k: 16 };
        let perm: Vec<usize> = (1..128).chain(std::iter::once(0)).collect();
        let permuted = permute_decoder_coords(&sae, &perm);
        let enc_a = encode_pool(&sae, &fx.pool).unwrap();
        let enc_b = encode_pool(&permuted, &fx.pool).unwrap();
        assert_eq!(enc_a.latents, enc_b.latents);
        for task in fx.suite.probing.iter().take(4) {
            for k in [1usize, 4, 16] {
                let a =
                    eval_sparse_probing(&enc_a, task, k, &ProbeConfig::sparse_probing(7)).unwrap();
                let b =
                    eval_sparse_probing(&enc_b, task, k, &ProbeConfig::sparse_probing(7)).unwrap();
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn tpp_zero_point_is_exact() {
        let fx = fixture();
        let oracle = make_oracle(&fx.model, 512).unwrap();
        let enc = encode_pool(&oracle, &fx.pool).unwrap();
        let group = &fx.suite.tpp[0];
        let score = eval_tpp(&enc, group, 0, &ProbeConfig::internal(3)).unwrap();
        assert_eq!(score, 0.0);
    }

    #[test]
    fn oracle_tpp_in_sae_separates_focal_from_siblings() {
        let fx = fixture();
        let oracle = make_oracle(&fx.model, 512).unwrap();
        let enc = encode_pool(&oracle, &fx.pool).unwrap();
        let group = fx
            .suite
            .tpp
            .iter()
            .find(|g| g.scope == super::super::TppScope::In)
            .unwrap();
        let score = eval_tpp(&enc, group, 1, &ProbeConfig::internal(5)).unwrap();
        assert!(score > 0.0, "oracle top-1 TPP score {score}");
    }

    #[test]
    fn scr_zero_point_is_exact_and_recount_matches() {
        let fx = fixture();
        let oracle = make_oracle(&fx.model, 512).unwrap();
        let enc = encode_pool(&oracle, &fx.pool).unwrap();
        let pair = &fx.suite.scr[0];
        let scores =
            eval_scr_sweep(&enc, pair, &[0, 5], &ProbeConfig::internal(9), 0.02).unwrap();
        assert_eq!(scores[0], 0.0);
        assert!(scores[1].is_finite());
    }

    #[test]
    fn scr_pipeline_matches_from_scratch_recount_on_constructed_instance() {
        // Hand-built instance: latent 0 is an exact indicator of S, the rest
        // carry T. Ablating top-1 must remove the S signal, and the pipeline's
        // three accuracies must match a from-scratch recount.
        let fx = fixture();
        let pair = fx
            .suite
            .scr
            .iter()
            .find(|p| p.structure == (ExprShape::Single, ExprShape::Single))
            .unwrap();
        let t_leaf = match pair.t_expr {
            BoolExpr::Leaf(f) => f,
            _ => unreachable!(),
        };
        let s_leaf = match pair.s_expr {
            BoolExpr::Leaf(f) => f,
            _ => unreachable!(),
        };
        // Build a 4-latent synthetic encoding: latent 0 = S indicator,
        // latent 1 = T indicator (noisy-free), latents 2-3 junk.
        let n = fx.pool.batch.len();
        let mut latents = Array2::<f32>::zeros((n, 4));
        for i in 0..n {
            latents[(i, 0)] = fx.pool.batch.fires(i, s_leaf) as u8 as f32;
            latents[(i, 1)] = fx.pool.batch.fires(i, t_leaf) as u8 as f32;
            latents[(i, 2)] = ((i * 31 + 7) % 13) as f32 / 13.0;
            latents[(i, 3)] = ((i * 17 + 3) % 7) as f32 / 7.0;
        }
        let enc = EncodedPool { latents };
        let cfg = ProbeConfig::internal(21);
        let scores = eval_scr_sweep(&enc, pair, &[1], &cfg, 0.0).unwrap();

        // From-scratch recount of the same three accuracies.
        let all: Vec<usize> = (0..4).collect();
        let gather = |idx: &[u32]| gather_rows(enc.latents.view(), idx);
        let mut test_idx = Vec::new();
        let mut test_y = Vec::new();
        for (cell, idx) in pair.cells_test.iter().enumerate() {
            test_idx.extend_from_slice(idx);
            test_y.extend(std::iter::repeat(cell < 2).take(idx.len()));
        }
        let test_x = gather(&test_idx);
        let biased_split = {
            let ts = gather(&pair.cells_train[0]);
            let ntns = gather(&pair.cells_train[3]);
            let mut train_x = Array2::zeros((ts.nrows() + ntns.nrows(), 4));
            let mut train_y = Vec::new();
            for (r, row) in ts.rows().into_iter().enumerate() {
                train_x.row_mut(r).assign(&row);
                train_y.push(true);
            }
            for (r, row) in ntns.rows().into_iter().enumerate() {
                train_x.row_mut(ts.nrows() + r).assign(&row);
                train_y.push(false);
            }
            LabeledSplit { train_x, train_y, test_x: test_x.clone(), test_y: test_y.clone() }
        };
        let biased_cfg = ProbeConfig {
            seed: crate::rng::derive_seed("scr-probe", cfg.seed, &[0]),
            ..cfg
        };
        let biased = train_logistic_selected(&biased_split, &all, &biased_cfg).unwrap();
        let acc_biased = probe_accuracy(&biased, test_x.view(), &test_y);

        let oracle_cfg = ProbeConfig {
            seed: crate::rng::derive_seed("scr-probe", cfg.seed, &[1]),
            ..cfg
        };
        let oracle_split = {
            let rows: usize = pair.cells_train.iter().map(|c| c.len()).sum();
            let mut train_x = Array2::zeros((rows, 4));
            let mut train_y = Vec::new();
            let mut r = 0;
            for (cell, idx) in pair.cells_train.iter().enumerate() {
                for &i in idx {
                    train_x.row_mut(r).assign(&enc.latents.row(i as usize));
                    train_y.push(cell < 2);
                    r += 1;
                }
            }
            LabeledSplit { train_x, train_y, test_x: test_x.clone(), test_y: test_y.clone() }
        };
        let oracle_probe = train_logistic_selected(&oracle_split, &all, &oracle_cfg).unwrap();
        let acc_oracle = probe_accuracy(&oracle_probe, test_x.view(), &test_y);

        // Latent 0 has the largest S=1 vs S=0 mean difference by construction;
        // recount the after-ablation accuracy by zeroing column 0.
        let ablated = crate::probekit::ablate_latents(test_x.view(), &[0]).unwrap();
        let acc_after = probe_accuracy(&biased, ablated.view(), &test_y);
        let expect = (acc_after - acc_biased) / (acc_oracle - acc_biased);
        assert!(
            (scores[0] - expect).abs() < 1e-12,
            "pipeline {} vs recount {expect}",
            scores[0]
        );
    }

    #[test]
    fn ablating_everything_keeps_formula_finite() {
        let fx = fixture();
        let oracle = make_oracle(&fx.model, 512).unwrap();
        let enc = encode_pool(&oracle, &fx.pool).unwrap();
        let pair = &fx.suite.scr[0];
        let scores = eval_scr_sweep(&enc, pair, &[512], &ProbeConfig::internal(4), 0.02).unwrap();
        assert!(scores[0].is_finite());
        let group = &fx.suite.tpp[0];
        let tpp = eval_tpp(&enc, group, 512, &ProbeConfig::internal(4)).unwrap();
        assert!(tpp.abs() <= 0.1 + 1.0, "symmetric destruction score {tpp}");
    }
}
