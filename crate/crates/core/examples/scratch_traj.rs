// Scratch: loss/MCC trajectory for one arch at a given budget and lr.
use metricaudit_core::gtmetrics::gt_mcc;
use metricaudit_core::sae::{core_metrics, train, ArchSpec, TrainConfig};
use metricaudit_core::synthgen::{build_model, sample_batch, GeneratorParams, HierarchySpec};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let total: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2_000_000);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3e-4);
    let arch_s = args.get(3).cloned().unwrap_or_else(|| "batchtopk:k=32".into());

    let alpha: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.35);
    let p_max: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.22);
    let dim: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(128);
    let gp = GeneratorParams { zipf_alpha: alpha, zipf_p_max: p_max, ..GeneratorParams::default() };
    let model = build_model(HierarchySpec::default(), dim, 0, gp).unwrap();
    println!("expected GT L0 = {:.1}", model.expected_l0());
    let eval = sample_batch(&model, 4096, 999).unwrap();
    let arch = ArchSpec::parse(&arch_s).unwrap();
    let snapshots: Vec<u64> = (0..=8).map(|i| i * total / 8).collect();
    let cfg = TrainConfig {
        d_sae: 512,
        total_samples: total,
        batch_size: 1024,
        lr,
        adam_beta1: 0.9,
        adam_beta2: 0.999,
        adam_eps: 1e-8,
        lr_decay_fraction: 0.2,
        snapshot_schedule: snapshots,
        seed: 0,
    };
    let t0 = std::time::Instant::now();
    let snaps = train(&model, &arch, &cfg).unwrap();
    println!("{arch_s} lr={lr} total={total} ({:.0}s)", t0.elapsed().as_secs_f64());
    for (samples, sae) in &snaps {
        let m = core_metrics(sae, &eval).unwrap();
        let mcc = gt_mcc(sae, &model).unwrap();
        println!(
            "  {samples:>9}: mse {:.4} ev {:+.3} l0 {:5.1} alive {:.2} mcc {:.3}",
            m.mse, m.explained_variance, m.mean_l0, m.frac_alive, mcc
        );
    }
}
