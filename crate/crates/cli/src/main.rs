//! `metricaudit`: build synthetic models, train and degrade SAEs, generate
//! task suites, evaluate metrics, and run full reliability audits.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use metricaudit_core::harness::{
    evaluate_sae_on_suite, render_from_scores, run_discriminability_audit, run_noise_audit,
    run_validity_audit, AuditConfig, RunLimits,
};
use metricaudit_core::io::{load_batch, load_model, save_batch, save_model};
use metricaudit_core::proxymetrics::{generate_suite, load_suite, save_suite};
use metricaudit_core::sae::{
    load_sae, make_control, save_sae, train, ArchSpec, ControlKind, TrainConfig,
};
use metricaudit_core::score::ScoreTable;
use metricaudit_core::synthgen::sample_batch;
use metricaudit_core::{gtmetrics, rng};

#[derive(Parser)]
#[command(name = "metricaudit", version, about = "SAE quality-metric audit harness on synthetic ground truth")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic feature models.
    #[command(subcommand)]
    Model(ModelCmd),
    /// SAE training and degraded controls.
    #[command(subcommand)]
    Sae(SaeCmd),
    /// Task-suite generation.
    #[command(subcommand)]
    Tasks(TasksCmd),
    /// Evaluate an SAE against a pinned task suite.
    Eval(EvalArgs),
    /// Ground-truth metrics.
    #[command(subcommand)]
    Gt(GtCmd),
    /// Full audits driven by a config file.
    #[command(subcommand)]
    Audit(AuditCmd),
    /// Re-render reports from a score table.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum ModelCmd {
    /// Build a feature model from a config file.
    Build {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample a ground-truth-labelled activation batch.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum SaeCmd {
    /// Train an SAE on a synthetic model, writing every snapshot.
    Train(SaeTrainArgs),
    /// Build a degraded control from a trained SAE.
    Control {
        #[arg(long)]
        sae: PathBuf,
        #[arg(long)]
        kind: String,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SaeTrainArgs {
    #[arg(long)]
    model: PathBuf,
    /// Architecture spec, e.g. `batchtopk:k=32`, `jumprelu:l0=25`,
    /// `relu_l1:c=0.0005`, `matryoshka:k=32,loguniform,n=4,wmin=64`.
    #[arg(long)]
    arch: String,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 512)]
    d_sae: usize,
    #[arg(long, default_value_t = 2_000_000)]
    total_samples: u64,
    #[arg(long, default_value_t = 1024)]
    batch_size: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    /// Comma-separated snapshot sample counts; default is 0 plus 10 evenly
    /// spaced points after a 10% warmup.
    #[arg(long)]
    snapshots: Option<String>,
}

#[derive(Subcommand)]
enum TasksCmd {
    /// Generate the per-seed task suite (probing, TPP, SCR).
    Gen {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        d_sae: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    sae: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    tasks: PathBuf,
    /// Metric families to run: sparse_probing, tpp, scr, core.
    #[arg(long, default_value = "sparse_probing,tpp,scr,core")]
    metrics: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum GtCmd {
    /// Score GT-MCC and GT-F1 against the known dictionary.
    Score {
        #[arg(long)]
        sae: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Seed of the GT-F1 evaluation pool.
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 50_000)]
        eval_n: usize,
    },
}

#[derive(Subcommand)]
enum AuditCmd {
    /// Ground-truth correlation audit on a trained panel.
    Validity(AuditArgs),
    /// Reseed-noise audit on a pinned SAE.
    Noise(AuditArgs),
    /// Discriminability audit across training trajectories.
    Discriminability(AuditArgs),
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    config: PathBuf,
    /// Stop after this many cells (for testing resume behaviour).
    #[arg(long, hide = true)]
    max_cells: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    warmup: u64,
    #[arg(long, default_value_t = 1.0)]
    snr_floor: f64,
    #[arg(long)]
    svg: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Model(cmd) => match cmd {
            ModelCmd::Build { config, out } => {
                let cfg = AuditConfig::from_file(&config)?;
                let mut model = metricaudit_core::synthgen::build_model(
                    cfg.model_spec,
                    cfg.model_dim,
                    cfg.model_seed,
                    cfg.gen_params,
                )?;
                if let Some(kind) = cfg.model_variation {
                    model = metricaudit_core::synthgen::apply_variation(&model, kind);
                }
                save_model(&model, &out)?;
                println!(
                    "model: {} features, dim {}, expected L0 {:.1} -> {}",
                    model.num_features,
                    model.dim,
                    model.expected_l0(),
                    out.display()
                );
            }
            ModelCmd::Sample { model, n, seed, out } => {
                let model = load_model(&model)?;
                let batch = sample_batch(&model, n, seed)?;
                save_batch(&batch, &out)?;
                println!(
                    "batch: {} samples, mean L0 {:.1} -> {}",
                    batch.len(),
                    batch.mean_l0(),
                    out.display()
                );
            }
        },
        Command::Sae(cmd) => match cmd {
            SaeCmd::Train(args) => {
                let model = load_model(&args.model)?;
                let arch = ArchSpec::parse(&args.arch)?;
                let schedule = match &args.snapshots {
                    Some(list) => list
                        .split(',')
                        .map(|s| s.trim().parse::<u64>().context("bad snapshot entry"))
                        .collect::<Result<Vec<_>>>()?,
                    None => metricaudit_core::sae::default_snapshot_schedule(
                        args.total_samples,
                        10,
                    ),
                };
                let cfg = TrainConfig {
                    d_sae: args.d_sae,
                    total_samples: args.total_samples,
                    batch_size: args.batch_size,
                    lr: args.lr,
                    adam_beta1: 0.9,
                    adam_beta2: 0.999,
                    adam_eps: 1e-8,
                    lr_decay_fraction: 0.2,
                    snapshot_schedule: schedule,
                    seed: args.seed,
                };
                let snaps = train(&model, &arch, &cfg)?;
                std::fs::create_dir_all(&args.out_dir)?;
                for (samples, sae) in &snaps {
                    let path = args.out_dir.join(format!("snap{samples:012}.sae"));
                    save_sae(sae, &path)?;
                }
                println!(
                    "trained {}: {} snapshots -> {}",
                    arch.label(),
                    snaps.len(),
                    args.out_dir.display()
                );
            }
            SaeCmd::Control { sae, kind, calib, out } => {
                let source = load_sae(&sae)?;
                let kind = ControlKind::parse(&kind)?;
                let calib = load_batch(&calib)?;
                let control = make_control(&source, kind, &calib)?;
                save_sae(&control, &out)?;
                println!("control {} -> {}", kind.label(), out.display());
            }
        },
        Command::Tasks(cmd) => match cmd {
            TasksCmd::Gen { model, d_sae, seed, out } => {
                let model = load_model(&model)?;
                let suite = generate_suite(
                    &model,
                    d_sae,
                    seed,
                    &metricaudit_core::proxymetrics::TaskGenParams::default(),
                )?;
                save_suite(&suite, &out)?;
                println!(
                    "suite t{seed}: {} probing tasks, {} TPP groups, {} SCR pairs -> {}",
                    suite.probing.len(),
                    suite.tpp.len(),
                    suite.scr.len(),
                    out.display()
                );
            }
        },
        Command::Eval(args) => {
            let model = load_model(&args.model)?;
            let sae = load_sae(&args.sae)?;
            let (suite, pool) = load_suite(&args.tasks, &model)?;
            let families: Vec<String> =
                args.metrics.split(',').map(|s| s.trim().to_string()).collect();
            let cfg = AuditConfig::default();
            let (records, skips) =
                evaluate_sae_on_suite(&sae, &suite, &pool, &cfg, suite.seed, Some(&families))?;
            let mut table = ScoreTable::new();
            table.extend(records)?;
            table.save_jsonl(&args.out)?;
            for s in &skips {
                eprintln!("skipped: {s}");
            }
            println!("{} records -> {}", table.len(), args.out.display());
            if !skips.is_empty() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Gt(cmd) => match cmd {
            GtCmd::Score { sae, model, seed, eval_n } => {
                let model = load_model(&model)?;
                let sae = load_sae(&sae)?;
                let mcc = gtmetrics::gt_mcc(&sae, &model)?;
                let eval_seed = rng::derive_seed("gtf1", seed, &[]);
                let eval = sample_batch(&model, eval_n, eval_seed)?;
                let f1 = gtmetrics::gt_f1(&sae, &model, &eval)?;
                println!("gt_mcc  {mcc:.6}");
                println!("gt_f1   {f1:.6}");
            }
        },
        Command::Audit(cmd) => {
            let (args, which) = match &cmd {
                AuditCmd::Validity(a) => (a, "validity"),
                AuditCmd::Noise(a) => (a, "noise"),
                AuditCmd::Discriminability(a) => (a, "discriminability"),
            };
            let cfg = AuditConfig::from_file(&args.config)?;
            let limits = match args.max_cells {
                Some(n) => RunLimits::max_cells(n),
                None => RunLimits::unlimited(),
            };
            let outcome = match which {
                "validity" => run_validity_audit(&cfg, &limits)?,
                "noise" => run_noise_audit(&cfg, &limits)?,
                _ => run_discriminability_audit(&cfg, &limits)?,
            };
            println!(
                "scores: {}\nreport: {}",
                outcome.scores_path.display(),
                outcome.report_dir.display()
            );
            if outcome.interrupted {
                println!("interrupted: cell budget exhausted; rerun to resume");
            }
            for (cell, reason) in &outcome.failed {
                eprintln!("failed cell {cell}: {reason}");
            }
            return Ok(ExitCode::from(outcome.exit.code() as u8));
        }
        Command::Report(args) => {
            let written = render_from_scores(
                &args.scores,
                &args.out,
                args.warmup,
                args.snr_floor,
                args.svg,
            )?;
            for p in &written {
                println!("{}", p.display());
            }
            if written.is_empty() {
                bail!("score table supports no report section");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
