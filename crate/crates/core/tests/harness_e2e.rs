//! End-to-end audit pipeline tests on a small synthetic model: cell
//! completeness, byte-exact determinism, crash-resume equivalence, seed
//! stream isolation, and the per-audit report shapes.

use std::path::Path;

use metricaudit_core::harness::{
    run_discriminability_audit, run_noise_audit, run_validity_audit, AuditConfig, AuditExit,
    RunLimits,
};
use metricaudit_core::score::ScoreTable;

const BASE_CONFIG: &str = "
master_seed = 9
model.dim = 32
model.trees = 4
model.branching = 4
model.depth = 3
model.nonhier = 60
model.seed = 3
gen.zipf_p_max = 0.35
gen.zipf_alpha = 0.3
panel.d_sae = 192
panel.archs = batchtopk
panel.l0_targets = 4,8
train.total_samples = 60000
train.batch_size = 512
seeds.train = 0
seeds.task = 101,202
sweep.k = 1,4
sweep.topn = 2,10
tasks.pool_size = 12000
tasks.counts = 3,3,3,2,2
tasks.tpp_groups = 4
tasks.tpp_min = 10
tasks.scr_per_structure = 1
tasks.scr_leaf_min = 250
gt.f1_pool_size = 8000
gt.calib_size = 2048
";

fn cfg_with(dir: &Path, extra: &str) -> AuditConfig {
    let text = format!("{BASE_CONFIG}\n{extra}\n");
    let mut cfg = AuditConfig::parse(&text).unwrap();
    cfg.out_dir = dir.to_path_buf();
    cfg
}

fn read_scores(dir: &Path) -> Vec<u8> {
    std::fs::read(dir.join("scores.jsonl")).unwrap()
}

#[test]
fn validity_audit_is_complete_and_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir_a = tmp.path().join("a");
    let dir_b = tmp.path().join("b");

    let outcome = run_validity_audit(&cfg_with(&dir_a, ""), &RunLimits::unlimited()).unwrap();
    assert_eq!(outcome.exit, AuditExit::Clean, "failed cells: {:?}", outcome.failed);

    // Completeness: every member has ground-truth rows and every
    // guaranteed proxy cell at both task seeds.
    let table = ScoreTable::load_jsonl(&dir_a.join("scores.jsonl")).unwrap();
    let members = [
        "batchtopk-k4-s0",
        "batchtopk-k8-s0",
        "random_init",
        "random_l0_matched",
        "permuted_decoder",
        "oracle",
    ];
    for member in members {
        for metric in ["gt_mcc", "gt_f1"] {
            assert!(
                table
                    .records()
                    .iter()
                    .any(|r| r.sae_id == member && r.metric_id == metric),
                "{member} missing {metric}"
            );
        }
        for task_seed in [101u64, 202] {
            for metric in ["sparse_probing.single_in", "tpp.in", "core.mse"] {
                assert!(
                    table.records().iter().any(|r| r.sae_id == member
                        && r.metric_id == metric
                        && r.task_seed == task_seed),
                    "{member} missing {metric} at task seed {task_seed}"
                );
            }
        }
    }
    // Correlation report emitted.
    assert!(dir_a.join("report/correlations.csv").exists());
    assert!(dir_a.join("report/validity_scatter.csv").exists());
    assert!(dir_a.join("report/gt_vs_l0.csv").exists());

    // Byte-identical across runs.
    run_validity_audit(&cfg_with(&dir_b, ""), &RunLimits::unlimited()).unwrap();
    assert_eq!(read_scores(&dir_a), read_scores(&dir_b), "score tables differ across runs");

    // Rerunning in place re-executes nothing and leaves bytes unchanged.
    let before = read_scores(&dir_a);
    let again = run_validity_audit(&cfg_with(&dir_a, ""), &RunLimits::unlimited()).unwrap();
    assert_eq!(again.exit, AuditExit::Clean);
    assert_eq!(before, read_scores(&dir_a));
}

#[test]
fn crash_resume_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let dir_full = tmp.path().join("full");
    let dir_crash = tmp.path().join("crash");

    run_validity_audit(&cfg_with(&dir_full, ""), &RunLimits::unlimited()).unwrap();

    // Kill the run mid-panel (only 3 cells allowed), then resume.
    let first =
        run_validity_audit(&cfg_with(&dir_crash, ""), &RunLimits::max_cells(3)).unwrap();
    assert!(first.interrupted);
    assert_eq!(first.exit, AuditExit::Partial);
    let resumed =
        run_validity_audit(&cfg_with(&dir_crash, ""), &RunLimits::unlimited()).unwrap();
    assert_eq!(resumed.exit, AuditExit::Clean);
    assert_eq!(
        read_scores(&dir_full),
        read_scores(&dir_crash),
        "resumed run differs from uninterrupted run"
    );
}

#[test]
fn task_seed_list_does_not_perturb_training() {
    let tmp = tempfile::tempdir().unwrap();
    let dir_a = tmp.path().join("a");
    let dir_b = tmp.path().join("b");

    run_validity_audit(&cfg_with(&dir_a, "seeds.task = 101"), &RunLimits::unlimited()).unwrap();
    run_validity_audit(&cfg_with(&dir_b, "seeds.task = 202,303"), &RunLimits::unlimited())
        .unwrap();

    for sae in ["batchtopk-k4-s0", "batchtopk-k8-s0"] {
        let rel = format!("saes/{sae}/snap000000060000.sae");
        let a = std::fs::read(dir_a.join(&rel)).unwrap();
        let b = std::fs::read(dir_b.join(&rel)).unwrap();
        assert_eq!(a, b, "{sae} weights changed with the task-seed list");
    }
}

#[test]
fn noise_audit_reports_table_one_shape() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("noise");
    let cfg = cfg_with(&dir, "seeds.task = 11,22,33,44,55");
    let outcome = run_noise_audit(&cfg, &RunLimits::unlimited()).unwrap();
    assert_eq!(outcome.exit, AuditExit::Clean, "failed: {:?}", outcome.failed);

    let csv = std::fs::read_to_string(dir.join("report/noise.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "metric,mean,std,cv,delta_star");
    let mut checked = 0;
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        let std: f64 = fields[2].parse().unwrap();
        let delta: f64 = fields[4].parse().unwrap();
        // Five reseeds: the threshold column is t_{0.025,4} * sqrt(2) * std.
        let expect = 3.9265 * std;
        assert!(
            (delta - expect).abs() <= 1e-3 * expect.max(1e-12) + 1e-12,
            "{line}: delta {delta} vs 3.93*std {expect}"
        );
        checked += 1;
    }
    assert!(checked > 5, "only {checked} noise rows");

    // The text table mirrors the pinned column order.
    let text = std::fs::read_to_string(dir.join("report/report.txt")).unwrap();
    assert!(text.contains("|delta|*"));
}

#[test]
fn noise_audit_requires_five_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = cfg_with(&tmp.path().join("x"), "seeds.task = 1,2,3");
    assert!(run_noise_audit(&cfg, &RunLimits::unlimited()).is_err());
}

#[test]
fn discriminability_audit_emits_all_statistics_with_three_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("disc");
    let cfg = cfg_with(
        &dir,
        "seeds.train = 0,1,2\nseeds.task = 101\ntrain.snapshot_count = 6\nstats.mc_trials = 1000",
    );
    let outcome = run_discriminability_audit(&cfg, &RunLimits::unlimited()).unwrap();
    assert_eq!(outcome.exit, AuditExit::Clean, "failed: {:?}", outcome.failed);

    for name in [
        "snr.csv",
        "slopes.csv",
        "rank_agreement.csv",
        "variance_shares.csv",
        "mc_null.csv",
        "winner_stability.csv",
        "cross_seed_rho.csv",
        "trajectories.csv",
    ] {
        assert!(dir.join("report").join(name).exists(), "missing {name}");
    }

    // Shares sum to 1 on every defined row.
    let shares = std::fs::read_to_string(dir.join("report/variance_shares.csv")).unwrap();
    let mut defined = 0;
    for line in shares.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields[1].is_empty() {
            continue;
        }
        let sum: f64 = fields[1].parse::<f64>().unwrap()
            + fields[2].parse::<f64>().unwrap()
            + fields[3].parse::<f64>().unwrap();
        assert!((sum - 1.0).abs() < 1e-9, "shares sum {sum} on {line}");
        defined += 1;
    }
    assert!(defined > 5, "only {defined} defined share rows");
}

#[test]
fn discriminability_with_one_seed_gates_decomposition() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("disc1");
    let cfg = cfg_with(&dir, "seeds.train = 0\nseeds.task = 101\ntrain.snapshot_count = 6");
    let outcome = run_discriminability_audit(&cfg, &RunLimits::unlimited()).unwrap();
    assert_eq!(outcome.exit, AuditExit::Clean, "failed: {:?}", outcome.failed);
    assert!(dir.join("report/snr.csv").exists());
    assert!(!dir.join("report/variance_shares.csv").exists());
    let manifest = std::fs::read_to_string(dir.join("manifest.json")).unwrap();
    assert!(
        manifest.contains("variance_decomposition"),
        "manifest should note why the decomposition is absent"
    );
}
