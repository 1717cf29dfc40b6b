// Scratch calibration run (not part of the deliverable test suite).
use std::time::Instant;

use metricaudit_core::gtmetrics::{gt_f1, gt_mcc};
use metricaudit_core::probekit::ProbeConfig;
use metricaudit_core::proxymetrics::{
    encode_pool, eval_scr_sweep, eval_sparse_probing, generate_suite, ProbingCategory,
    TaskGenParams,
};
use metricaudit_core::sae::{
    core_metrics, make_control, make_oracle, train, ArchSpec, ControlKind, TrainConfig,
};
use metricaudit_core::synthgen::{build_model, sample_batch, GeneratorParams, HierarchySpec};

fn main() {
    let total: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(400_000);
    let model = build_model(HierarchySpec::default(), 128, 0, GeneratorParams::default()).unwrap();
    println!("model: {} features, expected L0 {:.1}", model.num_features, model.expected_l0());

    let suite = generate_suite(&model, 512, 1234, &TaskGenParams::default()).unwrap();
    println!("suite: {} probing, {} tpp, {} scr", suite.probing.len(), suite.tpp.len(), suite.scr.len());
    let pool = metricaudit_core::proxymetrics::draw_pool(&model, 1234, 60_000).unwrap();
    let eval_f1 = sample_batch(&model, 50_000, 777).unwrap();
    let calib = sample_batch(&model, 4096, 888).unwrap();

    let mut results = vec![];
    for arch_s in ["batchtopk:k=8", "batchtopk:k=16", "batchtopk:k=32", "matryoshka:k=8", "matryoshka:k=16", "matryoshka:k=32"] {
        let arch = ArchSpec::parse(arch_s).unwrap();
        let cfg = TrainConfig {
            d_sae: 512,
            total_samples: total,
            batch_size: 1024,
            lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lr_decay_fraction: 0.2,
            snapshot_schedule: vec![total],
            seed: 0,
        };
        let t0 = Instant::now();
        let snaps = train(&model, &arch, &cfg).unwrap();
        let sae = &snaps.last().unwrap().1;
        let train_time = t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let mcc = gt_mcc(sae, &model).unwrap();
        let f1 = gt_f1(sae, &model, &eval_f1).unwrap();
        let gt_time = t1.elapsed().as_secs_f64();

        let t2 = Instant::now();
        let enc = encode_pool(sae, &pool).unwrap();
        let mut acc_sum = 0.0;
        let mut n = 0;
        for (ti, task) in suite.probing.iter().enumerate() {
            if task.category != ProbingCategory::SingleIn { continue; }
            let pc = ProbeConfig { seed: ti as u64, ..ProbeConfig::sparse_probing(0) };
            acc_sum += eval_sparse_probing(&enc, task, 16, &pc).unwrap();
            n += 1;
        }
        let probing = acc_sum / n as f64;
        let mut scr10 = (0.0, 0);
        let mut scr500 = (0.0, 0);
        for (pi, pair) in suite.scr.iter().enumerate() {
            let pc = ProbeConfig { seed: 1000 + pi as u64, ..ProbeConfig::internal(0) };
            if let Ok(s) = eval_scr_sweep(&enc, pair, &[10, 500], &pc, 0.02) {
                scr10.0 += s[0]; scr10.1 += 1;
                scr500.0 += s[1]; scr500.1 += 1;
            }
        }
        let eval_time = t2.elapsed().as_secs_f64();
        let core = core_metrics(sae, &calib).unwrap();
        println!(
            "{arch_s:<18} mcc {mcc:.3} f1 {f1:.3} probe16 {probing:.3} scr10 {:.3} scr500 {:+.3} l0 {:.1} ev {:.3} [train {train_time:.0}s gt {gt_time:.1}s eval {eval_time:.1}s]",
            scr10.0 / scr10.1.max(1) as f64,
            scr500.0 / scr500.1.max(1) as f64,
            core.mean_l0,
            core.explained_variance,
        );
        results.push((arch_s, mcc, probing));
    }

    // Controls from batchtopk-k16.
    let arch = ArchSpec::parse("batchtopk:k=16").unwrap();
    let cfg = TrainConfig {
        d_sae: 512,
        total_samples: total,
        batch_size: 1024,
        lr: 1e-3,
        adam_beta1: 0.9,
        adam_beta2: 0.999,
        adam_eps: 1e-8,
        lr_decay_fraction: 0.2,
        snapshot_schedule: vec![total],
        seed: 0,
    };
    let snaps = train(&model, &arch, &cfg).unwrap();
    let source = &snaps.last().unwrap().1;
    for kind in [ControlKind::RandomInit, ControlKind::RandomL0Matched, ControlKind::PermutedDecoder] {
        let control = make_control(source, kind, &calib).unwrap();
        let mcc = gt_mcc(&control, &model).unwrap();
        let enc = encode_pool(&control, &pool).unwrap();
        let mut acc_sum = 0.0;
        let mut n = 0;
        for (ti, task) in suite.probing.iter().enumerate() {
            if task.category != ProbingCategory::SingleIn { continue; }
            let pc = ProbeConfig { seed: ti as u64, ..ProbeConfig::sparse_probing(0) };
            acc_sum += eval_sparse_probing(&enc, task, 16, &pc).unwrap();
            n += 1;
        }
        println!("{:<18} mcc {mcc:.3} probe16 {:.3}", kind.label(), acc_sum / n as f64);
    }
    let oracle = make_oracle(&model, 512).unwrap();
    println!("oracle            mcc {:.6} f1 {:.6}", gt_mcc(&oracle, &model).unwrap(), gt_f1(&oracle, &model, &eval_f1).unwrap());
}
