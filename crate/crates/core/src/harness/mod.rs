//! Audit orchestration: configuration, run manifests with resume, the three
//! audits, and report rendering.

mod audit;
mod config;
mod manifest;
mod report;

pub use audit::{
    evaluate_sae_on_suite, render_from_scores, run_discriminability_audit, run_noise_audit,
    run_validity_audit, AuditExit, AuditOutcome, RunLimits,
};
pub use config::AuditConfig;
pub use manifest::{CellStatus, RunManifest};
pub use report::{GtVsL0Row, NoiseRow, ReportBundle, ScatterRow, TrajectoryRow};
