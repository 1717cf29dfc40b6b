//! The three audits: validity (ground-truth correlation on a trained
//! panel), noise (reseed CV on a pinned SAE), and discriminability
//! (statistics over snapshot trajectories). Work is split into cells; each
//! cell persists its artifact and is never re-executed once done, so a
//! killed run resumes to the same final table.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gtmetrics::{gt_f1, gt_mcc};
use crate::probekit::ProbeConfig;
use crate::proxymetrics::{
    encode_pool, eval_scr_sweep, eval_sparse_probing, eval_tpp_sweep, generate_suite,
    load_suite, save_suite, EncodedPool, TaskPool, TaskSuite, TppScope,
};
use crate::reliability::{
    correlate_with_gt, cross_seed_rank_agreement, mc_null, metric_label, metric_rank_agreement,
    min_reliable_delta, reseed_cv, snr, trajectory_slope, variance_decomposition, Scope,
};
use crate::rng;
use crate::sae::{
    load_sae, make_control, make_oracle, save_sae, train, ControlKind, SaeModel,
};
use crate::score::{ScoreRecord, ScoreTable};
use crate::synthgen::{apply_variation, build_model, sample_batch, FeatureModel};

use super::config::AuditConfig;
use super::manifest::RunManifest;
use super::report::{GtVsL0Row, NoiseRow, ReportBundle, ScatterRow, TrajectoryRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuditExit {
    /// Every cell completed.
    Clean,
    /// Some cells failed or the run was interrupted; see the manifest.
    Partial,
}

impl AuditExit {
    pub fn code(&self) -> i32 {
        match self {
            AuditExit::Clean => 0,
            AuditExit::Partial => 2,
        }
    }
}

#[derive(Debug)]
pub struct AuditOutcome {
    pub exit: AuditExit,
    pub failed: Vec<(String, String)>,
    pub interrupted: bool,
    pub scores_path: PathBuf,
    pub report_dir: PathBuf,
}

/// Optional cap on the number of cells executed this invocation; used to
/// exercise crash-resume behaviour.
pub struct RunLimits {
    budget: Option<AtomicUsize>,
}

impl RunLimits {
    pub fn unlimited() -> Self {
        RunLimits { budget: None }
    }

    pub fn max_cells(n: usize) -> Self {
        RunLimits { budget: Some(AtomicUsize::new(n)) }
    }

    fn try_consume(&self) -> bool {
        match &self.budget {
            None => true,
            Some(counter) => loop {
                let cur = counter.load(Ordering::SeqCst);
                if cur == 0 {
                    return false;
                }
                if counter
                    .compare_exchange(cur, cur - 1, Ordering::SeqCst, Ordering::SeqCst)
                    .is_ok()
                {
                    return true;
                }
            },
        }
    }
}

struct Ctx<'a> {
    cfg: &'a AuditConfig,
    manifest: RunManifest,
    limits: &'a RunLimits,
    interrupted: AtomicUsize,
}

impl<'a> Ctx<'a> {
    fn open(cfg: &'a AuditConfig, limits: &'a RunLimits) -> Result<Self> {
        let manifest = RunManifest::open(&cfg.out_dir, &cfg.config_hash())?;
        Ok(Ctx { cfg, manifest, limits, interrupted: AtomicUsize::new(0) })
    }

    /// Run one cell unless it is already done (artifact present) or the
    /// budget ran out. Failures are recorded and swallowed.
    fn cell(&self, name: &str, artifact: &Path, f: impl FnOnce() -> Result<()>) -> bool {
        if self.manifest.is_done(name) && artifact.exists() {
            return true;
        }
        if !self.limits.try_consume() {
            self.interrupted.fetch_add(1, Ordering::SeqCst);
            return false;
        }
        match f() {
            Ok(()) => {
                let _ = self.manifest.mark_done(name);
                true
            }
            Err(e) => {
                let _ = self.manifest.mark_failed(name, &e.to_string());
                false
            }
        }
    }

    fn was_interrupted(&self) -> bool {
        self.interrupted.load(Ordering::SeqCst) > 0
    }
}

fn model_path(cfg: &AuditConfig) -> PathBuf {
    cfg.out_dir.join("model.bin")
}

fn sae_dir(cfg: &AuditConfig, sae_id: &str) -> PathBuf {
    cfg.out_dir.join("saes").join(sae_id)
}

fn snapshot_path(cfg: &AuditConfig, sae_id: &str, samples: u64) -> PathBuf {
    sae_dir(cfg, sae_id).join(format!("snap{samples:012}.sae"))
}

fn cells_dir(cfg: &AuditConfig) -> PathBuf {
    cfg.out_dir.join("cells")
}

fn suite_dir(cfg: &AuditConfig, task_seed: u64) -> PathBuf {
    cfg.out_dir.join("tasks").join(format!("t{task_seed}"))
}

fn write_fragment(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    let mut table = ScoreTable::new();
    table.extend(records.iter().cloned())?;
    table.save_jsonl(&tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn ensure_model(ctx: &Ctx) -> Result<Option<FeatureModel>> {
    let path = model_path(ctx.cfg);
    let ok = ctx.cell("model", &path, || {
        let mut model = build_model(
            ctx.cfg.model_spec,
            ctx.cfg.model_dim,
            ctx.cfg.model_seed,
            ctx.cfg.gen_params,
        )?;
        if let Some(kind) = ctx.cfg.model_variation {
            model = apply_variation(&model, kind);
        }
        crate::io::save_model(&model, &path)
    });
    if !ok {
        return Ok(None);
    }
    Ok(Some(crate::io::load_model(&path)?))
}

/// Identity of one panel member for score records.
#[derive(Debug, Clone)]
struct SaeIdentity {
    sae_id: String,
    variant: String,
    train_seed: u64,
}

/// Train every (arch, seed) cell; returns (identity, snapshot paths).
fn ensure_panel(
    ctx: &Ctx,
    model: &FeatureModel,
    train_seeds: &[u64],
) -> Result<Vec<(SaeIdentity, Vec<(u64, PathBuf)>)>> {
    let archs = ctx.cfg.panel_arch_specs()?;
    let jobs: Vec<(crate::sae::ArchSpec, u64)> = archs
        .iter()
        .flat_map(|a| train_seeds.iter().map(move |&s| (a.clone(), s)))
        .collect();
    let results: Vec<Option<(SaeIdentity, Vec<(u64, PathBuf)>)>> = jobs
        .par_iter()
        .map(|(arch, seed)| {
            let variant = arch.label();
            let sae_id = format!("{variant}-s{seed}");
            let cfg = ctx.cfg.train_config(*seed);
            let schedule = {
                let mut s = cfg.snapshot_schedule.clone();
                s.sort_unstable();
                s.dedup();
                s
            };
            let last = *schedule.last().unwrap();
            let cell = format!("train/{sae_id}");
            let done = ctx.cell(&cell, &snapshot_path(ctx.cfg, &sae_id, last), || {
                let snaps = train(model, arch, &cfg)?;
                for (samples, sae) in &snaps {
                    save_sae(sae, &snapshot_path(ctx.cfg, &sae_id, *samples))?;
                }
                Ok(())
            });
            if !done {
                return None;
            }
            let paths: Vec<(u64, PathBuf)> = schedule
                .iter()
                .map(|&s| (s, snapshot_path(ctx.cfg, &sae_id, s)))
                .filter(|(_, p)| p.exists())
                .collect();
            Some((
                SaeIdentity { sae_id, variant, train_seed: *seed },
                paths,
            ))
        })
        .collect();
    Ok(results.into_iter().flatten().collect())
}

/// Controls and the oracle, derived from the canonical SAE's final snapshot.
fn ensure_controls(
    ctx: &Ctx,
    model: &FeatureModel,
    canonical_final: &Path,
    canonical_seed: u64,
) -> Result<Vec<(SaeIdentity, PathBuf)>> {
    let mut out = Vec::new();
    let calib_seed = rng::derive_seed("calib", ctx.cfg.master_seed, &[]);
    for kind_label in &ctx.cfg.panel_controls {
        let kind = ControlKind::parse(kind_label)?;
        let sae_id = kind.label().to_string();
        let path = sae_dir(ctx.cfg, &sae_id).join("final.sae");
        let cell = format!("control/{sae_id}");
        let done = ctx.cell(&cell, &path, || {
            let source = load_sae(canonical_final)?;
            let calib = sample_batch(model, ctx.cfg.calib_size, calib_seed)?;
            let control = make_control(&source, kind, &calib)?;
            save_sae(&control, &path)
        });
        if done {
            out.push((
                SaeIdentity {
                    sae_id: sae_id.clone(),
                    variant: sae_id,
                    train_seed: canonical_seed,
                },
                path,
            ));
        }
    }
    if ctx.cfg.panel_oracle {
        let path = sae_dir(ctx.cfg, "oracle").join("final.sae");
        let done = ctx.cell("control/oracle", &path, || {
            let oracle = make_oracle(model, ctx.cfg.d_sae)?;
            save_sae(&oracle, &path)
        });
        if done {
            out.push((
                SaeIdentity {
                    sae_id: "oracle".into(),
                    variant: "oracle".into(),
                    train_seed: canonical_seed,
                },
                path,
            ));
        }
    }
    Ok(out)
}

fn ensure_suites(ctx: &Ctx, model: &FeatureModel, task_seeds: &[u64]) -> Vec<u64> {
    task_seeds
        .iter()
        .filter(|&&seed| {
            let dir = suite_dir(ctx.cfg, seed);
            ctx.cell(
                &format!("tasks/t{seed}"),
                &dir.join("manifest.json"),
                || {
                    let suite =
                        generate_suite(model, ctx.cfg.d_sae, seed, &ctx.cfg.task_params)?;
                    save_suite(&suite, &dir)
                },
            )
        })
        .copied()
        .collect()
}

/// Ground-truth metric records for one SAE snapshot.
fn gt_records(
    sae: &SaeModel,
    id: &SaeIdentity,
    snapshot: u64,
    model: &FeatureModel,
    f1_eval: &crate::synthgen::ActivationBatch,
) -> Result<Vec<ScoreRecord>> {
    let mcc = gt_mcc(sae, model)?;
    let f1 = gt_f1(sae, model, f1_eval)?;
    let mk = |metric: &str, value: f64| ScoreRecord {
        sae_id: id.sae_id.clone(),
        variant: id.variant.clone(),
        train_seed: id.train_seed,
        snapshot_samples: snapshot,
        metric_id: metric.into(),
        hparam: None,
        task_seed: 0,
        value,
        higher_is_better: true,
    };
    Ok(vec![mk("gt_mcc", mcc), mk("gt_f1", f1)])
}

/// Evaluate an SAE against a pinned suite, restricted to the named metric
/// families (`sparse_probing`, `tpp`, `scr`, `core`; `None` = all). The SAE
/// identity for the records comes from its provenance.
pub fn evaluate_sae_on_suite(
    sae: &SaeModel,
    suite: &TaskSuite,
    pool: &TaskPool,
    cfg: &AuditConfig,
    task_seed: u64,
    families: Option<&[String]>,
) -> Result<(Vec<ScoreRecord>, Vec<String>)> {
    let variant = if sae.provenance.control == crate::sae::ControlTag::None {
        sae.provenance.arch.clone()
    } else {
        sae.provenance.control.label().to_string()
    };
    let id = SaeIdentity {
        sae_id: format!("{variant}-s{}", sae.provenance.train_seed),
        variant,
        train_seed: sae.provenance.train_seed,
    };
    evaluate_snapshot_filtered(
        sae,
        &id,
        sae.provenance.samples_seen,
        suite,
        pool,
        cfg,
        task_seed,
        families,
    )
}

/// Evaluate one SAE snapshot against one task suite: sparse probing across
/// the k sweep (per category), TPP across the top-N sweep (per scope), SCR
/// across the top-N sweep, and the core reconstruction metrics.
#[allow(clippy::too_many_arguments)]
fn evaluate_snapshot(
    sae: &SaeModel,
    id: &SaeIdentity,
    snapshot: u64,
    suite: &TaskSuite,
    pool: &TaskPool,
    cfg: &AuditConfig,
    task_seed: u64,
) -> Result<(Vec<ScoreRecord>, Vec<String>)> {
    evaluate_snapshot_filtered(sae, id, snapshot, suite, pool, cfg, task_seed, None)
}

#[allow(clippy::too_many_arguments)]
fn evaluate_snapshot_filtered(
    sae: &SaeModel,
    id: &SaeIdentity,
    snapshot: u64,
    suite: &TaskSuite,
    pool: &TaskPool,
    cfg: &AuditConfig,
    task_seed: u64,
    families: Option<&[String]>,
) -> Result<(Vec<ScoreRecord>, Vec<String>)> {
    let want = |family: &str| -> bool {
        families.map(|fs| fs.iter().any(|f| f == family)).unwrap_or(true)
    };
    let enc: EncodedPool = encode_pool(sae, pool)?;
    let mut records = Vec::new();
    let mut skips = Vec::new();
    let mk = |metric: String, hparam: Option<i64>, value: f64, hib: bool| ScoreRecord {
        sae_id: id.sae_id.clone(),
        variant: id.variant.clone(),
        train_seed: id.train_seed,
        snapshot_samples: snapshot,
        metric_id: metric,
        hparam,
        task_seed,
        value,
        higher_is_better: hib,
    };

    // Sparse probing, aggregated per category.
    if want("sparse_probing") {
    for &k in &cfg.sweep_k {
        let mut sums: std::collections::BTreeMap<&'static str, (f64, usize)> =
            std::collections::BTreeMap::new();
        for (ti, task) in suite.probing.iter().enumerate() {
            let probe_cfg = ProbeConfig {
                seed: rng::derive_seed("probe-final", task_seed, &[ti as u64, k as u64]),
                ..cfg.probe_final
            };
            match eval_sparse_probing(&enc, task, k, &probe_cfg) {
                Ok(acc) => {
                    let e = sums.entry(task.category.label()).or_insert((0.0, 0));
                    e.0 += acc;
                    e.1 += 1;
                }
                Err(e) => skips.push(format!("probing task {ti} k={k}: {e}")),
            }
        }
        for (category, (sum, n)) in sums {
            records.push(mk(
                format!("sparse_probing.{category}"),
                Some(k as i64),
                sum / n as f64,
                true,
            ));
        }
    }
    }

    // TPP, aggregated per scope.
    let topns = &cfg.sweep_topn;
    if want("tpp") {
    let mut tpp_sums: std::collections::BTreeMap<&'static str, Vec<(f64, usize)>> =
        std::collections::BTreeMap::new();
    for (gi, group) in suite.tpp.iter().enumerate() {
        let base_cfg = ProbeConfig {
            seed: rng::derive_seed("probe-tpp", task_seed, &[gi as u64]),
            ..cfg.probe_internal
        };
        match eval_tpp_sweep(&enc, group, topns, &base_cfg) {
            Ok(scores) => {
                let label = match group.scope {
                    TppScope::In => "in",
                    TppScope::Out => "out",
                };
                let entry =
                    tpp_sums.entry(label).or_insert_with(|| vec![(0.0, 0); topns.len()]);
                for (i, s) in scores.iter().enumerate() {
                    entry[i].0 += s;
                    entry[i].1 += 1;
                }
            }
            Err(e) => skips.push(format!("tpp group {gi}: {e}")),
        }
    }
    for (scope, per_topn) in tpp_sums {
        for (i, &(sum, n)) in per_topn.iter().enumerate() {
            if n > 0 {
                records.push(mk(
                    format!("tpp.{scope}"),
                    Some(topns[i] as i64),
                    sum / n as f64,
                    true,
                ));
            }
        }
    }
    }

    // SCR, aggregated over kept pairs.
    if want("scr") {
    let mut scr_sums = vec![(0.0, 0usize); topns.len()];
    for (pi, pair) in suite.scr.iter().enumerate() {
        let base_cfg = ProbeConfig {
            seed: rng::derive_seed("probe-scr", task_seed, &[pi as u64]),
            ..cfg.probe_internal
        };
        match eval_scr_sweep(&enc, pair, topns, &base_cfg, cfg.task_params.scr_min_gap) {
            Ok(scores) => {
                for (i, s) in scores.iter().enumerate() {
                    scr_sums[i].0 += s;
                    scr_sums[i].1 += 1;
                }
            }
            Err(e) => skips.push(format!("scr pair {pi}: {e}")),
        }
    }
    for (i, &(sum, n)) in scr_sums.iter().enumerate() {
        if n > 0 {
            records.push(mk("scr".into(), Some(topns[i] as i64), sum / n as f64, true));
        }
    }
    }

    // Core reconstruction metrics on the pool.
    if want("core") {
    let core = crate::sae::core_metrics(sae, &pool.batch)?;
    records.push(mk("core.mse".into(), None, core.mse, false));
    if core.explained_variance.is_finite() {
        records.push(mk("core.explained_variance".into(), None, core.explained_variance, true));
    }
    records.push(mk("core.mean_l0".into(), None, core.mean_l0, true));
    records.push(mk("core.frac_alive".into(), None, core.frac_alive, true));
    records.push(mk("core.mean_cossim".into(), None, core.mean_cossim, true));
    }

    Ok((records, skips))
}

fn collect_scores(cfg: &AuditConfig) -> Result<ScoreTable> {
    let dir = cells_dir(cfg);
    let mut table = ScoreTable::new();
    if !dir.exists() {
        return Ok(table);
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|e| e == "jsonl").unwrap_or(false))
        .collect();
    paths.sort();
    for p in paths {
        let fragment = ScoreTable::load_jsonl(&p)?;
        table.extend(fragment.records().iter().cloned())?;
    }
    Ok(table)
}

fn proxy_only(table: &ScoreTable) -> Result<ScoreTable> {
    let mut out = ScoreTable::new();
    out.extend(
        table
            .records()
            .iter()
            .filter(|r| !r.metric_id.starts_with("gt_"))
            .cloned(),
    )?;
    Ok(out)
}

fn gt_only(table: &ScoreTable) -> Result<ScoreTable> {
    let mut out = ScoreTable::new();
    out.extend(
        table
            .records()
            .iter()
            .filter(|r| r.metric_id.starts_with("gt_"))
            .cloned(),
    )?;
    Ok(out)
}

fn finish(
    ctx: &Ctx,
    mut table: ScoreTable,
    bundle: &ReportBundle,
) -> Result<AuditOutcome> {
    let scores_path = ctx.cfg.out_dir.join("scores.jsonl");
    table.save_jsonl(&scores_path)?;
    let report_dir = ctx.cfg.out_dir.join("report");
    bundle.write(&report_dir, ctx.cfg.emit_svg)?;
    let failed = ctx.manifest.failed_cells();
    let interrupted = ctx.was_interrupted();
    let exit = if failed.is_empty() && !interrupted {
        AuditExit::Clean
    } else {
        AuditExit::Partial
    };
    Ok(AuditOutcome { exit, failed, interrupted, scores_path, report_dir })
}

fn in_pool<T: Send>(cfg: &AuditConfig, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.effective_workers())
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Evaluate a set of SAE snapshots against the per-seed suites, one cell per
/// (snapshot, task seed).
fn run_eval_cells(
    ctx: &Ctx,
    model: &FeatureModel,
    members: &[(SaeIdentity, u64, PathBuf)],
    task_seeds: &[u64],
) -> Result<()> {
    for &task_seed in task_seeds {
        let (suite, pool) = match load_suite(&suite_dir(ctx.cfg, task_seed), model) {
            Ok(v) => v,
            Err(e) => {
                let _ = ctx
                    .manifest
                    .mark_failed(&format!("tasks/t{task_seed}/load"), &e.to_string());
                continue;
            }
        };
        members.par_iter().for_each(|(id, snapshot, path)| {
            let cell = format!("eval/{}-snap{snapshot}-t{task_seed}", id.sae_id);
            let fragment = cells_dir(ctx.cfg)
                .join(format!("eval-{}-snap{snapshot:012}-t{task_seed}.jsonl", id.sae_id));
            ctx.cell(&cell, &fragment, || {
                let sae = load_sae(path)?;
                let (records, skips) =
                    evaluate_snapshot(&sae, id, *snapshot, &suite, &pool, ctx.cfg, task_seed)?;
                if !skips.is_empty() {
                    let _ = ctx
                        .manifest
                        .note(&format!("skips/{cell}"), &skips.join("; "));
                }
                write_fragment(&fragment, &records)
            });
        });
    }
    Ok(())
}

/// Scatter + GT-vs-L0 rows for the validity report.
fn validity_rows(table: &ScoreTable) -> (Vec<ScatterRow>, Vec<GtVsL0Row>) {
    use std::collections::BTreeMap;
    let mut gt_mcc: BTreeMap<String, f64> = BTreeMap::new();
    let mut gt_f1: BTreeMap<String, f64> = BTreeMap::new();
    let mut variant: BTreeMap<String, String> = BTreeMap::new();
    for r in table.records() {
        variant.insert(r.sae_id.clone(), r.variant.clone());
        match r.metric_id.as_str() {
            "gt_mcc" => {
                gt_mcc.insert(r.sae_id.clone(), r.value);
            }
            "gt_f1" => {
                gt_f1.insert(r.sae_id.clone(), r.value);
            }
            _ => {}
        }
    }
    // Mean over task seeds per (sae, metric, hparam).
    let mut acc: BTreeMap<(String, String, Option<i64>), (f64, usize)> = BTreeMap::new();
    for r in table.records() {
        if r.metric_id.starts_with("gt_") {
            continue;
        }
        let e = acc
            .entry((r.sae_id.clone(), r.metric_id.clone(), r.hparam))
            .or_insert((0.0, 0));
        e.0 += r.value;
        e.1 += 1;
    }
    let mut scatter = Vec::new();
    let mut l0: BTreeMap<String, f64> = BTreeMap::new();
    for ((sae_id, metric_id, hparam), (sum, n)) in acc {
        let score = sum / n as f64;
        if metric_id == "core.mean_l0" {
            l0.insert(sae_id.clone(), score);
        }
        let var = variant.get(&sae_id).cloned().unwrap_or_default();
        let control = if crate::score::is_control_variant(&var) { var.clone() } else { "none".into() };
        scatter.push(ScatterRow {
            sae_id: sae_id.clone(),
            variant: var,
            control,
            gt_mcc: gt_mcc.get(&sae_id).copied(),
            gt_f1: gt_f1.get(&sae_id).copied(),
            metric: metric_label(&(metric_id, hparam)),
            score,
        });
    }
    let gt_vs_l0 = l0
        .into_iter()
        .map(|(sae_id, mean_l0)| GtVsL0Row {
            variant: variant.get(&sae_id).cloned().unwrap_or_default(),
            gt_mcc: gt_mcc.get(&sae_id).copied(),
            gt_f1: gt_f1.get(&sae_id).copied(),
            sae_id,
            mean_l0,
        })
        .collect();
    (scatter, gt_vs_l0)
}

/// Validity audit: train the panel (one seed), add controls and the oracle,
/// score ground-truth metrics once per SAE and proxy metrics per task seed,
/// correlate in both scopes.
pub fn run_validity_audit(cfg: &AuditConfig, limits: &RunLimits) -> Result<AuditOutcome> {
    // Validity scores final models only, unless the config pins a schedule.
    let effective = if cfg.train_snapshots.is_empty() && !cfg.train_final_only {
        AuditConfig { train_final_only: true, ..cfg.clone() }
    } else {
        cfg.clone()
    };
    let ctx = Ctx::open(&effective, limits)?;
    in_pool(&effective, || run_validity_inner(&ctx))?
}

fn run_validity_inner(ctx: &Ctx) -> Result<AuditOutcome> {
    let cfg = ctx.cfg;
    let Some(model) = ensure_model(ctx)? else {
        return finish(ctx, ScoreTable::new(), &ReportBundle::default());
    };

    // Panel: architectures x L0 targets at one training seed.
    let seed = cfg.train_seeds[0];
    let panel = ensure_panel(ctx, &model, &[seed])?;

    // Controls derive from the canonical member.
    let canonical = cfg.canonical_arch()?.label();
    let mut members: Vec<(SaeIdentity, u64, PathBuf)> = Vec::new();
    for (id, snaps) in &panel {
        if let Some((s, p)) = snaps.last() {
            members.push((id.clone(), *s, p.clone()));
        }
    }
    let canonical_final = members
        .iter()
        .find(|(id, _, _)| id.variant == canonical)
        .map(|(_, _, p)| p.clone());
    if let Some(canonical_final) = canonical_final {
        for (id, path) in ensure_controls(ctx, &model, &canonical_final, seed)? {
            members.push((id, 0, path));
        }
    } else {
        let _ = ctx
            .manifest
            .note("controls", &format!("canonical SAE `{canonical}` unavailable"));
    }

    // Ground-truth metrics once per SAE.
    let f1_seed = rng::derive_seed("gtf1", cfg.master_seed, &[]);
    let f1_eval = sample_batch(&model, cfg.gtf1_pool_size, f1_seed)?;
    members.par_iter().for_each(|(id, snapshot, path)| {
        let cell = format!("gt/{}", id.sae_id);
        let fragment = cells_dir(cfg).join(format!("gt-{}.jsonl", id.sae_id));
        ctx.cell(&cell, &fragment, || {
            let sae = load_sae(path)?;
            let records = gt_records(&sae, id, *snapshot, &model, &f1_eval)?;
            write_fragment(&fragment, &records)
        });
    });

    // Task suites and proxy evaluation per task seed.
    let ready_seeds = ensure_suites(ctx, &model, &cfg.task_seeds);
    run_eval_cells(ctx, &model, &members, &ready_seeds)?;

    // Assemble and correlate.
    let table = collect_scores(cfg)?;
    let proxy = proxy_only(&table)?;
    let gt = gt_only(&table)?;
    let mut correlations = Vec::new();
    if !gt.is_empty() && !proxy.is_empty() {
        correlations.extend(correlate_with_gt(&proxy, &gt, Scope::FullPanel)?);
        correlations.extend(correlate_with_gt(&proxy, &gt, Scope::WithinTrained)?);
    }
    let (scatter, gt_vs_l0) = validity_rows(&table);
    let bundle = ReportBundle { correlations, scatter, gt_vs_l0, ..Default::default() };
    finish(ctx, table, &bundle)
}

/// Noise audit: evaluate every metric at each task seed on one pinned SAE
/// (the canonical arch trained fresh), then summarize reseed CV and the
/// minimum-reliable-difference column.
pub fn run_noise_audit(cfg: &AuditConfig, limits: &RunLimits) -> Result<AuditOutcome> {
    if cfg.task_seeds.len() < 5 {
        return Err(Error::config("noise audit needs >= 5 task seeds"));
    }
    let ctx = Ctx::open(cfg, limits)?;
    in_pool(cfg, || run_noise_inner(&ctx))?
}

fn run_noise_inner(ctx: &Ctx) -> Result<AuditOutcome> {
    let cfg = ctx.cfg;
    let Some(model) = ensure_model(ctx)? else {
        return finish(ctx, ScoreTable::new(), &ReportBundle::default());
    };

    let arch = cfg.canonical_arch()?;
    let seed = cfg.train_seeds[0];
    let variant = arch.label();
    let sae_id = format!("{variant}-s{seed}");
    let train_cfg = crate::sae::TrainConfig {
        snapshot_schedule: vec![cfg.train_total_samples],
        ..cfg.train_config(seed)
    };
    let final_path = snapshot_path(cfg, &sae_id, cfg.train_total_samples);
    let trained = ctx.cell(&format!("train/{sae_id}"), &final_path, || {
        let snaps = train(&model, &arch, &train_cfg)?;
        for (samples, sae) in &snaps {
            save_sae(sae, &snapshot_path(cfg, &sae_id, *samples))?;
        }
        Ok(())
    });
    if !trained {
        return finish(ctx, collect_scores(cfg)?, &ReportBundle::default());
    }
    let id = SaeIdentity { sae_id, variant, train_seed: seed };
    let members = vec![(id, cfg.train_total_samples, final_path)];
    let ready_seeds = ensure_suites(ctx, &model, &cfg.task_seeds);
    run_eval_cells(ctx, &model, &members, &ready_seeds)?;

    let table = collect_scores(cfg)?;
    // Per (metric, hparam): reseed CV across task seeds plus the
    // single-seed minimum reliable difference.
    let mut by_metric: std::collections::BTreeMap<(String, Option<i64>), Vec<f64>> =
        std::collections::BTreeMap::new();
    for r in table.records() {
        by_metric
            .entry((r.metric_id.clone(), r.hparam))
            .or_default()
            .push(r.value);
    }
    let mut noise = Vec::new();
    for (key, values) in by_metric {
        if values.len() < 2 {
            continue;
        }
        let summary = reseed_cv(&values)?;
        noise.push(NoiseRow {
            metric: metric_label(&key),
            mean: summary.mean,
            std: summary.std,
            cv: summary.cv,
            delta_star: min_reliable_delta(summary.std, summary.n_seeds, 1),
        });
    }
    let bundle = ReportBundle { noise, ..Default::default() };
    finish(ctx, table, &bundle)
}

/// Discriminability audit: train each (variant, seed) with snapshots,
/// evaluate every snapshot, and run the trajectory statistics; the
/// seed-decomposition statistics additionally require >= 3 training seeds.
pub fn run_discriminability_audit(
    cfg: &AuditConfig,
    limits: &RunLimits,
) -> Result<AuditOutcome> {
    if cfg.panel_arch_specs()?.len() < 2 {
        return Err(Error::config("discriminability audit needs >= 2 variants"));
    }
    let ctx = Ctx::open(cfg, limits)?;
    in_pool(cfg, || run_discriminability_inner(&ctx))?
}

fn run_discriminability_inner(ctx: &Ctx) -> Result<AuditOutcome> {
    let cfg = ctx.cfg;
    let Some(model) = ensure_model(ctx)? else {
        return finish(ctx, ScoreTable::new(), &ReportBundle::default());
    };

    let panel = ensure_panel(ctx, &model, &cfg.train_seeds)?;
    let mut members: Vec<(SaeIdentity, u64, PathBuf)> = Vec::new();
    for (id, snaps) in &panel {
        for (s, p) in snaps {
            members.push((id.clone(), *s, p.clone()));
        }
    }
    let ready_seeds = ensure_suites(ctx, &model, &cfg.task_seeds);
    run_eval_cells(ctx, &model, &members, &ready_seeds)?;

    let table = collect_scores(cfg)?;
    let warmup = cfg.warmup_samples();
    let mut bundle = ReportBundle::default();

    if !table.is_empty() {
        match snr(&table, warmup) {
            Ok(s) => bundle.snr = s.into_iter().collect(),
            Err(e) => {
                let _ = ctx.manifest.note("snr", &e.to_string());
            }
        }
        match trajectory_slope(&table, warmup) {
            Ok(s) => bundle.slopes = s.into_iter().collect(),
            Err(e) => {
                let _ = ctx.manifest.note("slopes", &e.to_string());
            }
        }
        match metric_rank_agreement(&table, warmup, cfg.stats_snr_floor, cfg.stats_rank_by_final)
        {
            Ok(m) => bundle.rank_matrix = Some(m),
            Err(e) => {
                let _ = ctx.manifest.note("rank_agreement", &e.to_string());
            }
        }
        if cfg.train_seeds.len() >= 3 {
            match variance_decomposition(&table, warmup) {
                Ok(shares) => bundle.shares = shares.into_iter().collect(),
                Err(e) => {
                    let _ = ctx.manifest.note("variance_decomposition", &e.to_string());
                }
            }
            // Null design mirrors the panel: variants x seeds x post-warmup snapshots.
            let n_variants = cfg.panel_arch_specs()?.len();
            let n_seeds = cfg.train_seeds.len();
            let n_snaps = cfg
                .train_config(cfg.train_seeds[0])
                .snapshot_schedule
                .iter()
                .filter(|&&s| s >= warmup)
                .count();
            match mc_null((n_variants, n_seeds, n_snaps), cfg.stats_mc_trials, cfg.master_seed)
            {
                Ok(mc) => bundle.mc = Some(mc),
                Err(e) => {
                    let _ = ctx.manifest.note("mc_null", &e.to_string());
                }
            }
            match crate::reliability::winner_stability(&table, warmup) {
                Ok(w) => bundle.winners = w.into_iter().collect(),
                Err(e) => {
                    let _ = ctx.manifest.note("winner_stability", &e.to_string());
                }
            }
            match cross_seed_rank_agreement(&table, warmup) {
                Ok(c) => bundle.cross_seed = c.into_iter().collect(),
                Err(e) => {
                    let _ = ctx.manifest.note("cross_seed_rank_agreement", &e.to_string());
                }
            }
        } else {
            let _ = ctx.manifest.note(
                "variance_decomposition",
                &format!(
                    "skipped: {} training seed(s); needs >= 3",
                    cfg.train_seeds.len()
                ),
            );
        }
        bundle.trajectories = table
            .records()
            .iter()
            .map(|r| TrajectoryRow {
                metric: metric_label(&(r.metric_id.clone(), r.hparam)),
                variant: r.variant.clone(),
                train_seed: r.train_seed,
                snapshot_samples: r.snapshot_samples,
                task_seed: r.task_seed,
                value: r.value,
            })
            .collect();
    }
    finish(ctx, table, &bundle)
}

/// Recompute every report section the score table supports; used by the
/// standalone `report` command.
pub fn render_from_scores(
    scores_path: &Path,
    out_dir: &Path,
    warmup: u64,
    snr_floor: f64,
    svg: bool,
) -> Result<Vec<PathBuf>> {
    let table = ScoreTable::load_jsonl(scores_path)?;
    let mut bundle = ReportBundle::default();
    let proxy = proxy_only(&table)?;
    let gt = gt_only(&table)?;
    if !gt.is_empty() && !proxy.is_empty() {
        let mut corr = correlate_with_gt(&proxy, &gt, Scope::FullPanel)?;
        corr.extend(correlate_with_gt(&proxy, &gt, Scope::WithinTrained)?);
        bundle.correlations = corr;
        let (scatter, gt_vs_l0) = validity_rows(&table);
        bundle.scatter = scatter;
        bundle.gt_vs_l0 = gt_vs_l0;
    }
    if let Ok(s) = snr(&proxy, warmup) {
        bundle.snr = s.into_iter().collect();
    }
    if let Ok(s) = trajectory_slope(&proxy, warmup) {
        bundle.slopes = s.into_iter().collect();
    }
    if let Ok(m) = metric_rank_agreement(&proxy, warmup, snr_floor, false) {
        bundle.rank_matrix = Some(m);
    }
    if let Ok(s) = variance_decomposition(&proxy, warmup) {
        bundle.shares = s.into_iter().collect();
    }
    if let Ok(w) = crate::reliability::winner_stability(&proxy, warmup) {
        bundle.winners = w.into_iter().collect();
    }
    if let Ok(c) = cross_seed_rank_agreement(&proxy, warmup) {
        bundle.cross_seed = c.into_iter().collect();
    }
    bundle.write(out_dir, svg)
}
