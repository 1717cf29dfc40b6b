//! Task-suite generation: probing tasks, TPP sibling groups, SCR pairs.
//! All draws for one seed consume a single labelled stream, so suites are
//! byte-deterministic in (model, d_sae, seed, params).

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::synthgen::FeatureModel;

use super::{
    draw_pool, BoolExpr, ExprShape, ProbingCategory, ProbingTask, ScrPair, TaskGenParams,
    TaskPool, TaskSuite, TppGroup, TppScope, SCR_CELLS,
};

/// Generate the full per-seed suite.
pub fn generate_suite(
    model: &FeatureModel,
    d_sae: usize,
    seed: u64,
    params: &TaskGenParams,
) -> Result<TaskSuite> {
    let pool = draw_pool(model, seed, params.pool_size)?;
    let probing = gen_probing_tasks(model, d_sae, &pool, seed, params)?;
    let tpp = gen_tpp_groups(model, d_sae, &pool, seed, params)?;
    let scr = gen_scr_pairs(model, d_sae, &pool, seed, params)?;
    Ok(TaskSuite {
        model_fingerprint: model.fingerprint(),
        d_sae,
        seed,
        pool_seed: pool.pool_seed,
        pool_size: params.pool_size,
        params: *params,
        probing,
        tpp,
        scr,
    })
}

fn firing_rows(pool: &TaskPool, label: impl Fn(usize) -> bool) -> (Vec<u32>, Vec<u32>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..pool.batch.len() {
        if label(i) {
            pos.push(i as u32);
        } else {
            neg.push(i as u32);
        }
    }
    (pos, neg)
}

struct Split {
    train_idx: Vec<u32>,
    train_labels: Vec<bool>,
    test_idx: Vec<u32>,
    test_labels: Vec<bool>,
}

/// Class-balanced split under per-class caps with an 80/20 discipline over
/// the available balanced count; train and test index sets are disjoint.
fn build_split(
    mut pos: Vec<u32>,
    mut neg: Vec<u32>,
    g: &mut ChaCha8Rng,
    params: &TaskGenParams,
) -> Option<Split> {
    pos.shuffle(g);
    neg.shuffle(g);
    let c = pos.len().min(neg.len());
    if c < 10 {
        return None;
    }
    let train_per = params.train_cap_per_class.min(c * 4 / 5);
    let test_per = params.test_cap_per_class.min(c - train_per);
    if train_per == 0 || test_per == 0 {
        return None;
    }
    let mut train_idx = Vec::with_capacity(2 * train_per);
    let mut train_labels = Vec::with_capacity(2 * train_per);
    let mut test_idx = Vec::with_capacity(2 * test_per);
    let mut test_labels = Vec::with_capacity(2 * test_per);
    train_idx.extend_from_slice(&pos[..train_per]);
    train_labels.extend(std::iter::repeat(true).take(train_per));
    train_idx.extend_from_slice(&neg[..train_per]);
    train_labels.extend(std::iter::repeat(false).take(train_per));
    test_idx.extend_from_slice(&pos[train_per..train_per + test_per]);
    test_labels.extend(std::iter::repeat(true).take(test_per));
    test_idx.extend_from_slice(&neg[train_per..train_per + test_per]);
    test_labels.extend(std::iter::repeat(false).take(test_per));
    Some(Split { train_idx, train_labels, test_idx, test_labels })
}

fn eval_expr_on_pool(pool: &TaskPool, expr: &BoolExpr) -> Vec<bool> {
    (0..pool.batch.len())
        .map(|i| expr.eval(&|f| pool.batch.fires(i, f)))
        .collect()
}

/// Generate the binary probing tasks with the configured per-category
/// counts (defaults 20/20/20/16/16 = 92).
pub fn gen_probing_tasks(
    model: &FeatureModel,
    d_sae: usize,
    pool: &TaskPool,
    seed: u64,
    params: &TaskGenParams,
) -> Result<Vec<ProbingTask>> {
    let counts = pool.batch.firing_counts(model.num_features);
    let eligible_in: Vec<usize> = (0..d_sae.min(model.num_features))
        .filter(|&f| counts[f] as usize >= params.leaf_min_positives)
        .collect();
    let eligible_out: Vec<usize> = (d_sae..model.num_features)
        .filter(|&f| counts[f] as usize >= params.leaf_min_positives)
        .collect();

    let mut g = rng::stream("tasks-probing", seed, &[]);
    let mut tasks = Vec::new();

    for (cat_pos, category) in ProbingCategory::ALL.into_iter().enumerate() {
        let want = params.probing_counts[cat_pos];
        if want == 0 {
            continue;
        }
        let needs_in = !matches!(category, ProbingCategory::SingleOut | ProbingCategory::BoolOut);
        let needs_out = matches!(
            category,
            ProbingCategory::SingleOut | ProbingCategory::BoolOut | ProbingCategory::BoolMixed
        );
        if needs_in && eligible_in.len() < 10 {
            return Err(Error::TaskGeneration {
                category: category.label().into(),
                reason: format!("{} eligible in-sae features (< 10)", eligible_in.len()),
            });
        }
        if needs_out && eligible_out.len() < 10 {
            return Err(Error::TaskGeneration {
                category: category.label().into(),
                reason: format!("{} eligible out-of-sae features (< 10)", eligible_out.len()),
            });
        }

        match category {
            ProbingCategory::SingleIn | ProbingCategory::SingleOut => {
                let mut pool_feats = if category == ProbingCategory::SingleIn {
                    eligible_in.clone()
                } else {
                    eligible_out.clone()
                };
                pool_feats.shuffle(&mut g);
                let mut made = 0;
                for &f in &pool_feats {
                    if made == want {
                        break;
                    }
                    let (pos, neg) = firing_rows(pool, |i| pool.batch.fires(i, f));
                    if let Some(split) = build_split(pos, neg, &mut g, params) {
                        tasks.push(ProbingTask {
                            category,
                            expr: BoolExpr::Leaf(f),
                            train_idx: split.train_idx,
                            train_labels: split.train_labels,
                            test_idx: split.test_idx,
                            test_labels: split.test_labels,
                        });
                        made += 1;
                    }
                }
                if made < want {
                    return Err(Error::TaskGeneration {
                        category: category.label().into(),
                        reason: format!("built {made} of {want} tasks"),
                    });
                }
            }
            ProbingCategory::BoolIn | ProbingCategory::BoolOut | ProbingCategory::BoolMixed => {
                let mut made = 0;
                let mut attempts = 0;
                while made < want && attempts < want * 60 {
                    attempts += 1;
                    let expr =
                        draw_bool_expr(&mut g, category, &eligible_in, &eligible_out, params);
                    let labels = eval_expr_on_pool(pool, &expr);
                    let n_pos = labels.iter().filter(|&&b| b).count();
                    let n_neg = labels.len() - n_pos;
                    if n_pos < params.leaf_min_positives || n_neg < params.leaf_min_positives {
                        continue;
                    }
                    let (pos, neg) = firing_rows(pool, |i| labels[i]);
                    if let Some(split) = build_split(pos, neg, &mut g, params) {
                        tasks.push(ProbingTask {
                            category,
                            expr,
                            train_idx: split.train_idx,
                            train_labels: split.train_labels,
                            test_idx: split.test_idx,
                            test_labels: split.test_labels,
                        });
                        made += 1;
                    }
                }
                if made < want {
                    return Err(Error::TaskGeneration {
                        category: category.label().into(),
                        reason: format!("built {made} of {want} tasks in {attempts} attempts"),
                    });
                }
            }
        }
    }
    Ok(tasks)
}

fn pick_distinct(g: &mut ChaCha8Rng, from: &[usize], exclude: &[usize]) -> usize {
    loop {
        let f = from[g.gen_range(0..from.len())];
        if !exclude.contains(&f) {
            return f;
        }
    }
}

fn draw_bool_expr(
    g: &mut ChaCha8Rng,
    category: ProbingCategory,
    eligible_in: &[usize],
    eligible_out: &[usize],
    params: &TaskGenParams,
) -> BoolExpr {
    let three = g.gen::<f64>() < params.three_leaf_prob;
    let n_leaves = if three { 3 } else { 2 };
    // Leaf sides: all-in, all-out, or mixed with at least one of each.
    let mut sides: Vec<bool> = match category {
        ProbingCategory::BoolIn => vec![true; n_leaves],
        ProbingCategory::BoolOut => vec![false; n_leaves],
        _ => {
            let mut s = vec![true, false];
            if three {
                s.push(g.gen::<bool>());
            }
            s.shuffle(g);
            s
        }
    };
    let mut leaves = Vec::with_capacity(n_leaves);
    for side in sides.drain(..) {
        let from = if side { eligible_in } else { eligible_out };
        leaves.push(pick_distinct(g, from, &leaves));
    }
    if three {
        // ((A op B) op2 C) with independent AND/OR draws.
        let inner = if g.gen::<bool>() {
            BoolExpr::and(BoolExpr::Leaf(leaves[0]), BoolExpr::Leaf(leaves[1]))
        } else {
            BoolExpr::or(BoolExpr::Leaf(leaves[0]), BoolExpr::Leaf(leaves[1]))
        };
        if g.gen::<bool>() {
            BoolExpr::and(inner, BoolExpr::Leaf(leaves[2]))
        } else {
            BoolExpr::or(inner, BoolExpr::Leaf(leaves[2]))
        }
    } else if g.gen::<bool>() {
        BoolExpr::and(BoolExpr::Leaf(leaves[0]), BoolExpr::Leaf(leaves[1]))
    } else {
        BoolExpr::or(BoolExpr::Leaf(leaves[0]), BoolExpr::Leaf(leaves[1]))
    }
}

/// Generate the four-sibling TPP groups (default 30 in-sae + 30 out-of-sae).
pub fn gen_tpp_groups(
    model: &FeatureModel,
    d_sae: usize,
    pool: &TaskPool,
    seed: u64,
    params: &TaskGenParams,
) -> Result<Vec<TppGroup>> {
    if model.spec.depth < 3 {
        return Err(Error::config("TPP groups need hierarchy depth >= 3"));
    }
    let mut g = rng::stream("tasks-tpp", seed, &[]);

    // Candidate quads: first four children of each depth-2 node.
    let mut in_candidates = Vec::new();
    let mut out_candidates = Vec::new();
    for f in 0..model.num_features {
        if model.depth_of(f) != 2 || model.children[f].len() < 4 {
            continue;
        }
        let quad = [
            model.children[f][0] as usize,
            model.children[f][1] as usize,
            model.children[f][2] as usize,
            model.children[f][3] as usize,
        ];
        if quad.iter().all(|&s| s < d_sae) {
            in_candidates.push(quad);
        } else if quad.iter().all(|&s| s >= d_sae) {
            out_candidates.push(quad);
        }
    }
    in_candidates.shuffle(&mut g);
    out_candidates.shuffle(&mut g);

    let mut groups = Vec::new();
    for (scope, candidates) in
        [(TppScope::In, in_candidates), (TppScope::Out, out_candidates)]
    {
        let mut made = 0;
        for quad in candidates {
            if made == params.tpp_groups_per_scope {
                break;
            }
            if let Some(group) = build_tpp_group(pool, scope, quad, &mut g, params) {
                groups.push(group);
                made += 1;
            }
        }
        if made < params.tpp_groups_per_scope {
            return Err(Error::TaskGeneration {
                category: format!("tpp_{}", scope.label()),
                reason: format!("built {made} of {} groups", params.tpp_groups_per_scope),
            });
        }
    }
    Ok(groups)
}

fn build_tpp_group(
    pool: &TaskPool,
    scope: TppScope,
    siblings: [usize; 4],
    g: &mut ChaCha8Rng,
    params: &TaskGenParams,
) -> Option<TppGroup> {
    // Sibling classes are disjoint by mutual exclusion.
    let mut class_rows: [Vec<u32>; 4] = Default::default();
    for i in 0..pool.batch.len() {
        for (s, &feat) in siblings.iter().enumerate() {
            if pool.batch.fires(i, feat) {
                class_rows[s].push(i as u32);
                break;
            }
        }
    }
    let m = class_rows
        .iter()
        .map(|r| r.len())
        .min()
        .unwrap()
        .min(params.tpp_per_sibling_cap);
    if m < params.tpp_min_per_sibling {
        return None;
    }
    let train_per = (m * 4 / 5).max(1);
    let test_per = m - train_per;
    if test_per == 0 {
        return None;
    }
    let mut train_idx = Vec::new();
    let mut train_class = Vec::new();
    let mut test_idx = Vec::new();
    let mut test_class = Vec::new();
    for (s, rows) in class_rows.iter_mut().enumerate() {
        rows.shuffle(g);
        train_idx.extend_from_slice(&rows[..train_per]);
        train_class.extend(std::iter::repeat(s as u8).take(train_per));
        test_idx.extend_from_slice(&rows[train_per..m]);
        test_class.extend(std::iter::repeat(s as u8).take(m - train_per));
    }
    Some(TppGroup {
        scope,
        siblings,
        per_sibling: m,
        train_idx,
        train_class,
        test_idx,
        test_class,
    })
}

/// Generate SCR (T, S) pairs: up to 3 per structure combination, abandoning
/// a combination after the configured number of draws.
pub fn gen_scr_pairs(
    model: &FeatureModel,
    d_sae: usize,
    pool: &TaskPool,
    seed: u64,
    params: &TaskGenParams,
) -> Result<Vec<ScrPair>> {
    let counts = pool.batch.firing_counts(model.num_features);
    let eligible: Vec<usize> = (0..d_sae.min(model.num_features))
        .filter(|&f| counts[f] as usize >= params.scr_leaf_min_positives)
        .collect();
    let mut g = rng::stream("tasks-scr", seed, &[]);
    let structures = [
        (ExprShape::Single, ExprShape::Single),
        (ExprShape::Single, ExprShape::Or),
        (ExprShape::Or, ExprShape::Single),
        (ExprShape::Or, ExprShape::Or),
    ];
    let mut pairs = Vec::new();
    if eligible.len() < 4 {
        return Err(Error::TaskGeneration {
            category: "scr".into(),
            reason: format!("{} eligible in-sae leaves (< 4)", eligible.len()),
        });
    }

    for structure in structures {
        let mut kept = 0;
        for _attempt in 0..params.scr_attempts {
            if kept == params.scr_per_structure {
                break;
            }
            let t_expr = draw_scr_expr(&mut g, &eligible, structure.0, &[]);
            let t_leaves = t_expr.leaves();
            let s_expr = draw_scr_expr(&mut g, &eligible, structure.1, &t_leaves);
            // Filter (i): all T roots differ from all S roots.
            let t_roots: Vec<u32> = t_leaves.iter().map(|&f| model.root_of[f]).collect();
            let s_roots: Vec<u32> = s_expr.leaves().iter().map(|&f| model.root_of[f]).collect();
            if t_roots.iter().any(|r| s_roots.contains(r)) {
                continue;
            }
            // Filter (ii): all four contingency cells populated.
            let t_lab = eval_expr_on_pool(pool, &t_expr);
            let s_lab = eval_expr_on_pool(pool, &s_expr);
            let mut cells: [Vec<u32>; SCR_CELLS] = Default::default();
            for i in 0..pool.batch.len() {
                let cell = match (t_lab[i], s_lab[i]) {
                    (true, true) => 0,
                    (true, false) => 1,
                    (false, true) => 2,
                    (false, false) => 3,
                };
                cells[cell].push(i as u32);
            }
            let min_cell = cells.iter().map(|c| c.len()).min().unwrap();
            if min_cell < params.scr_cell_min {
                continue;
            }
            let m = min_cell.min(params.scr_cell_cap);
            let train_per = (m * 4 / 5).max(1);
            let mut cells_train: [Vec<u32>; SCR_CELLS] = Default::default();
            let mut cells_test: [Vec<u32>; SCR_CELLS] = Default::default();
            for (cell, rows) in cells.iter_mut().enumerate() {
                rows.shuffle(&mut g);
                cells_train[cell] = rows[..train_per].to_vec();
                cells_test[cell] = rows[train_per..m].to_vec();
            }
            pairs.push(ScrPair { t_expr, s_expr, structure, cells_train, cells_test });
            kept += 1;
        }
    }
    if pairs.is_empty() {
        return Err(Error::TaskGeneration {
            category: "scr".into(),
            reason: "zero pairs across all structure combinations".into(),
        });
    }
    Ok(pairs)
}

fn draw_scr_expr(
    g: &mut ChaCha8Rng,
    eligible: &[usize],
    shape: ExprShape,
    exclude: &[usize],
) -> BoolExpr {
    match shape {
        ExprShape::Single => BoolExpr::Leaf(pick_distinct(g, eligible, exclude)),
        ExprShape::Or => {
            let a = pick_distinct(g, eligible, exclude);
            let mut excl = exclude.to_vec();
            excl.push(a);
            let b = pick_distinct(g, eligible, &excl);
            BoolExpr::or(BoolExpr::Leaf(a), BoolExpr::Leaf(b))
        }
    }
}
