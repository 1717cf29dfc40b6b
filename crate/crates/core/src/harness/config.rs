//! Flat key-value audit configuration. Every ledger parameter of every
//! module is addressable by a dotted key; unknown keys are errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::probekit::ProbeConfig;
use crate::proxymetrics::TaskGenParams;
use crate::sae::{ArchSpec, TrainConfig};
use crate::synthgen::{GeneratorParams, HierarchySpec, VariationKind};

#[derive(Debug, Clone)]
pub struct AuditConfig {
    pub master_seed: u64,
    pub out_dir: PathBuf,
    pub workers: usize,

    pub model_spec: HierarchySpec,
    pub model_dim: usize,
    pub model_seed: u64,
    pub model_variation: Option<VariationKind>,
    pub gen_params: GeneratorParams,

    pub d_sae: usize,
    /// Architecture families crossed with the L0 targets.
    pub panel_archs: Vec<String>,
    pub panel_l0_targets: Vec<usize>,
    /// Additional complete arch specs (";"-separated in the file).
    pub panel_extra_archs: Vec<String>,
    pub panel_controls: Vec<String>,
    pub panel_oracle: bool,
    /// Arch spec of the SAE the controls derive from; defaults to the first
    /// family at the middle L0 target.
    pub panel_canonical: Option<String>,

    pub train_total_samples: u64,
    pub train_batch_size: usize,
    pub train_lr: f64,
    pub train_beta1: f64,
    pub train_beta2: f64,
    pub train_eps: f64,
    pub train_lr_decay_fraction: f64,
    /// Explicit snapshot schedule; empty means derived.
    pub train_snapshots: Vec<u64>,
    /// Post-warmup snapshot count when the schedule is derived.
    pub train_snapshot_count: u64,
    /// Derived schedule collapses to [total] (validity audits).
    pub train_final_only: bool,

    pub train_seeds: Vec<u64>,
    pub task_seeds: Vec<u64>,

    pub sweep_k: Vec<usize>,
    pub sweep_topn: Vec<usize>,

    pub probe_internal: ProbeConfig,
    pub probe_final: ProbeConfig,

    pub task_params: TaskGenParams,

    pub gtf1_pool_size: usize,
    pub calib_size: usize,

    pub stats_warmup_frac: f64,
    pub stats_snr_floor: f64,
    pub stats_rank_by_final: bool,
    pub stats_mc_trials: usize,

    pub emit_svg: bool,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            master_seed: 0,
            out_dir: PathBuf::from("metricaudit-out"),
            workers: 0,
            model_spec: HierarchySpec::default(),
            model_dim: 128,
            model_seed: 0,
            model_variation: None,
            gen_params: GeneratorParams::default(),
            d_sae: 512,
            panel_archs: vec!["batchtopk".into(), "matryoshka".into()],
            panel_l0_targets: vec![8, 16, 32],
            panel_extra_archs: vec![],
            panel_controls: vec![
                "random_init".into(),
                "random_l0_matched".into(),
                "permuted_decoder".into(),
            ],
            panel_oracle: true,
            panel_canonical: None,
            train_total_samples: 500_000,
            train_batch_size: 1024,
            train_lr: 3e-4,
            train_beta1: 0.9,
            train_beta2: 0.999,
            train_eps: 1e-8,
            train_lr_decay_fraction: 0.2,
            train_snapshots: vec![],
            train_snapshot_count: 10,
            train_final_only: false,
            train_seeds: vec![0],
            task_seeds: vec![1234, 2222, 3333],
            sweep_k: vec![1, 4, 16],
            sweep_topn: vec![2, 5, 10, 20, 50, 100, 500],
            probe_internal: ProbeConfig::internal(0),
            probe_final: ProbeConfig::sparse_probing(0),
            task_params: TaskGenParams::default(),
            gtf1_pool_size: 50_000,
            calib_size: 4096,
            stats_warmup_frac: 0.1,
            stats_snr_floor: 1.0,
            stats_rank_by_final: false,
            stats_mc_trials: 5000,
            emit_svg: false,
        }
    }
}

fn parse_list<T: std::str::FromStr>(v: &str, key: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    if v.trim().is_empty() {
        return Ok(vec![]);
    }
    v.split(',')
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|e| Error::config(format!("bad `{key}` entry `{p}`: {e}")))
        })
        .collect()
}

impl AuditConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = AuditConfig::default();
        let mut pairs: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            pairs.insert(k.trim().to_string(), v.trim().to_string());
        }
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text)?;
        // Relative output dirs resolve against the config file location.
        if cfg.out_dir.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.out_dir = dir.join(&cfg.out_dir);
            }
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let pf = |v: &str, key: &str| -> Result<f64> {
            v.parse::<f64>().map_err(|e| Error::config(format!("bad `{key}`: {e}")))
        };
        let pu = |v: &str, key: &str| -> Result<u64> {
            v.parse::<u64>().map_err(|e| Error::config(format!("bad `{key}`: {e}")))
        };
        let pus = |v: &str, key: &str| -> Result<usize> {
            v.parse::<usize>().map_err(|e| Error::config(format!("bad `{key}`: {e}")))
        };
        let pb = |v: &str, key: &str| -> Result<bool> {
            v.parse::<bool>().map_err(|e| Error::config(format!("bad `{key}`: {e}")))
        };
        match key {
            "master_seed" => self.master_seed = pu(v, key)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "workers" => self.workers = pus(v, key)?,

            "model.dim" => self.model_dim = pus(v, key)?,
            "model.trees" => self.model_spec.num_trees = pus(v, key)?,
            "model.branching" => self.model_spec.branching = pus(v, key)?,
            "model.depth" => self.model_spec.depth = pus(v, key)?,
            "model.nonhier" => self.model_spec.num_nonhier = pus(v, key)?,
            "model.seed" => self.model_seed = pu(v, key)?,
            "model.variation" => {
                self.model_variation =
                    if v.is_empty() { None } else { Some(VariationKind::parse(v)?) }
            }

            "gen.zipf_alpha" => self.gen_params.zipf_alpha = pf(v, key)?,
            "gen.zipf_p_max" => self.gen_params.zipf_p_max = pf(v, key)?,
            "gen.q_child" => self.gen_params.q_child = pf(v, key)?,
            "gen.mag_mean" => self.gen_params.mag_mean = pf(v, key)?,
            "gen.mag_std" => self.gen_params.mag_std = pf(v, key)?,

            "panel.d_sae" => self.d_sae = pus(v, key)?,
            "panel.archs" => self.panel_archs = parse_list(v, key)?,
            "panel.l0_targets" => self.panel_l0_targets = parse_list(v, key)?,
            "panel.extra_archs" => {
                self.panel_extra_archs = if v.trim().is_empty() {
                    vec![]
                } else {
                    v.split(';').map(|s| s.trim().to_string()).collect()
                }
            }
            "panel.controls" => self.panel_controls = parse_list(v, key)?,
            "panel.oracle" => self.panel_oracle = pb(v, key)?,
            "panel.canonical" => {
                self.panel_canonical = if v.is_empty() { None } else { Some(v.to_string()) }
            }

            "train.total_samples" => self.train_total_samples = pu(v, key)?,
            "train.batch_size" => self.train_batch_size = pus(v, key)?,
            "train.lr" => self.train_lr = pf(v, key)?,
            "train.beta1" => self.train_beta1 = pf(v, key)?,
            "train.beta2" => self.train_beta2 = pf(v, key)?,
            "train.eps" => self.train_eps = pf(v, key)?,
            "train.lr_decay_fraction" => self.train_lr_decay_fraction = pf(v, key)?,
            "train.snapshots" => self.train_snapshots = parse_list(v, key)?,
            "train.snapshot_count" => self.train_snapshot_count = pu(v, key)?,
            "train.final_only" => self.train_final_only = pb(v, key)?,

            "seeds.train" => self.train_seeds = parse_list(v, key)?,
            "seeds.task" => self.task_seeds = parse_list(v, key)?,

            "sweep.k" => self.sweep_k = parse_list(v, key)?,
            "sweep.topn" => self.sweep_topn = parse_list(v, key)?,

            "probe.l1" => self.probe_internal.l1_penalty = pf(v, key)?,
            "probe.batch_size" => self.probe_internal.batch_size = pus(v, key)?,
            "probe.lr" => self.probe_internal.lr = pf(v, key)?,
            "probe.epochs" => self.probe_internal.epochs = pus(v, key)?,
            "probe.final_l1" => self.probe_final.l1_penalty = pf(v, key)?,
            "probe.final_batch_size" => self.probe_final.batch_size = pus(v, key)?,
            "probe.final_lr" => self.probe_final.lr = pf(v, key)?,
            "probe.final_epochs" => self.probe_final.epochs = pus(v, key)?,

            "tasks.pool_size" => self.task_params.pool_size = pus(v, key)?,
            "tasks.counts" => {
                let counts: Vec<usize> = parse_list(v, key)?;
                if counts.len() != 5 {
                    return Err(Error::config("tasks.counts needs 5 entries"));
                }
                self.task_params.probing_counts = [
                    counts[0], counts[1], counts[2], counts[3], counts[4],
                ];
            }
            "tasks.three_leaf_prob" => self.task_params.three_leaf_prob = pf(v, key)?,
            "tasks.leaf_min" => self.task_params.leaf_min_positives = pus(v, key)?,
            "tasks.train_cap" => self.task_params.train_cap_per_class = pus(v, key)?,
            "tasks.test_cap" => self.task_params.test_cap_per_class = pus(v, key)?,
            "tasks.tpp_groups" => self.task_params.tpp_groups_per_scope = pus(v, key)?,
            "tasks.tpp_cap" => self.task_params.tpp_per_sibling_cap = pus(v, key)?,
            "tasks.tpp_min" => self.task_params.tpp_min_per_sibling = pus(v, key)?,
            "tasks.scr_per_structure" => self.task_params.scr_per_structure = pus(v, key)?,
            "tasks.scr_attempts" => self.task_params.scr_attempts = pus(v, key)?,
            "tasks.scr_cell_min" => self.task_params.scr_cell_min = pus(v, key)?,
            "tasks.scr_cell_cap" => self.task_params.scr_cell_cap = pus(v, key)?,
            "tasks.scr_leaf_min" => self.task_params.scr_leaf_min_positives = pus(v, key)?,
            "tasks.scr_min_gap" => self.task_params.scr_min_gap = pf(v, key)?,

            "gt.f1_pool_size" => self.gtf1_pool_size = pus(v, key)?,
            "gt.calib_size" => self.calib_size = pus(v, key)?,

            "stats.warmup_frac" => self.stats_warmup_frac = pf(v, key)?,
            "stats.snr_floor" => self.stats_snr_floor = pf(v, key)?,
            "stats.rank_by_final" => self.stats_rank_by_final = pb(v, key)?,
            "stats.mc_trials" => self.stats_mc_trials = pus(v, key)?,

            "report.svg" => self.emit_svg = pb(v, key)?,

            other => return Err(Error::config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model_spec.validate()?;
        self.gen_params.validate()?;
        if self.sweep_k.is_empty() || self.sweep_topn.is_empty() {
            return Err(Error::config("sweep lists must be nonempty"));
        }
        if self.task_seeds.is_empty() || self.train_seeds.is_empty() {
            return Err(Error::config("seed lists must be nonempty"));
        }
        {
            let mut seen = std::collections::HashSet::new();
            for s in &self.task_seeds {
                if !seen.insert(*s) {
                    return Err(Error::config(format!("duplicate task seed {s}")));
                }
            }
            let mut seen = std::collections::HashSet::new();
            for s in &self.train_seeds {
                if !seen.insert(*s) {
                    return Err(Error::config(format!("duplicate train seed {s}")));
                }
            }
        }
        if !(self.stats_warmup_frac >= 0.0 && self.stats_warmup_frac < 1.0) {
            return Err(Error::config("stats.warmup_frac must lie in [0, 1)"));
        }
        for arch in self.panel_arch_specs()? {
            let _ = arch;
        }
        Ok(())
    }

    /// The panel's complete architecture list: families crossed with L0
    /// targets, plus any extra full specs.
    pub fn panel_arch_specs(&self) -> Result<Vec<ArchSpec>> {
        let mut out = Vec::new();
        for family in &self.panel_archs {
            if family.contains(':') {
                return Err(Error::config(format!(
                    "panel.archs entries are bare families (got `{family}`); \
                     use panel.extra_archs for full specs"
                )));
            }
            for &l0 in &self.panel_l0_targets {
                let spec = match family.as_str() {
                    "batchtopk" => format!("batchtopk:k={l0}"),
                    "matryoshka" => format!("matryoshka:k={l0}"),
                    "jumprelu" => format!("jumprelu:l0={l0}"),
                    other => {
                        return Err(Error::config(format!(
                            "family `{other}` has no L0 knob; use panel.extra_archs"
                        )))
                    }
                };
                out.push(ArchSpec::parse(&spec)?);
            }
        }
        for extra in &self.panel_extra_archs {
            out.push(ArchSpec::parse(extra)?);
        }
        if out.is_empty() {
            return Err(Error::config("empty SAE panel"));
        }
        Ok(out)
    }

    /// The SAE the degraded controls derive from.
    pub fn canonical_arch(&self) -> Result<ArchSpec> {
        if let Some(spec) = &self.panel_canonical {
            return ArchSpec::parse(spec);
        }
        let panel = self.panel_arch_specs()?;
        Ok(panel[panel.len() / 2].clone())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let schedule = if !self.train_snapshots.is_empty() {
            self.train_snapshots.clone()
        } else if self.train_final_only {
            vec![self.train_total_samples]
        } else {
            crate::sae::default_snapshot_schedule(
                self.train_total_samples,
                self.train_snapshot_count,
            )
        };
        TrainConfig {
            d_sae: self.d_sae,
            total_samples: self.train_total_samples,
            batch_size: self.train_batch_size,
            lr: self.train_lr,
            adam_beta1: self.train_beta1,
            adam_beta2: self.train_beta2,
            adam_eps: self.train_eps,
            lr_decay_fraction: self.train_lr_decay_fraction,
            snapshot_schedule: schedule,
            seed,
        }
    }

    /// Warmup expressed in samples seen.
    pub fn warmup_samples(&self) -> u64 {
        (self.train_total_samples as f64 * self.stats_warmup_frac) as u64
    }

    /// Hash of the resolved configuration, for resume safety.
    pub fn config_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_string().as_bytes());
        let bytes = hasher.finalize();
        bytes.iter().take(16).map(|b| format!("{b:02x}")).collect()
    }

    /// Canonical text form of every resolved field (out_dir excluded so a
    /// run can be relocated).
    pub fn canonical_string(&self) -> String {
        format!("{self:?}")
            .replace(&format!("out_dir: {:?}, ", self.out_dir), "")
    }

    pub fn effective_workers(&self) -> usize {
        if let Ok(env) = std::env::var("METRICAUDIT_WORKERS") {
            if let Ok(n) = env.parse::<usize>() {
                if n > 0 {
                    return n;
                }
            }
        }
        if self.workers > 0 {
            self.workers
        } else {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_roundtrip_keys() {
        let cfg = AuditConfig::parse("").unwrap();
        assert_eq!(cfg.d_sae, 512);
        assert_eq!(cfg.panel_arch_specs().unwrap().len(), 6);
    }

    #[test]
    fn parses_dotted_keys_and_comments() {
        let text = "
# comment
master_seed = 7
model.dim = 64          # trailing comment
panel.archs = batchtopk
panel.l0_targets = 4, 8
seeds.task = 1,2,3,4,5
tasks.counts = 2,2,2,2,2
panel.extra_archs = relu_l1:c=0.0005 ; matryoshka:k=8,loguniform,n=3,wmin=16
";
        let cfg = AuditConfig::parse(text).unwrap();
        assert_eq!(cfg.master_seed, 7);
        assert_eq!(cfg.model_dim, 64);
        assert_eq!(cfg.task_seeds, vec![1, 2, 3, 4, 5]);
        let archs = cfg.panel_arch_specs().unwrap();
        assert_eq!(archs.len(), 4);
        assert_eq!(cfg.task_params.probing_counts, [2, 2, 2, 2, 2]);
    }

    #[test]
    fn unknown_key_is_an_error() {
        assert!(AuditConfig::parse("bogus.key = 1").is_err());
    }

    #[test]
    fn duplicate_seeds_rejected() {
        assert!(AuditConfig::parse("seeds.task = 1,1").is_err());
    }

    #[test]
    fn hash_changes_with_content_not_out_dir() {
        let a = AuditConfig::parse("master_seed = 1").unwrap();
        let b = AuditConfig::parse("master_seed = 2").unwrap();
        assert_ne!(a.config_hash(), b.config_hash());
        let c = AuditConfig::parse("master_seed = 1\nout_dir = elsewhere").unwrap();
        assert_eq!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn canonical_arch_defaults_to_middle_of_panel() {
        let cfg = AuditConfig::parse("").unwrap();
        let canonical = cfg.canonical_arch().unwrap();
        assert_eq!(canonical.label(), "matryoshka-k8");
        let cfg2 = AuditConfig::parse("panel.canonical = batchtopk:k=16").unwrap();
        assert_eq!(cfg2.canonical_arch().unwrap().label(), "batchtopk-k16");
    }
}
