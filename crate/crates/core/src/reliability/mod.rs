//! The audit-statistics suite: reseed noise, decision thresholds, validity
//! correlations, SNR, variance decomposition with its Monte-Carlo null,
//! winner stability, rank agreement, and trajectory slopes.

mod panel;
mod stats;

pub use panel::{
    correlate_with_gt, cross_seed_rank_agreement, decompose, mc_null, metric_label,
    metric_rank_agreement, panel_data, snr, trajectory_slope, variance_decomposition, winner_stability,
    CrossSeedAgreement, GtCorrelation, McNull, MetricKey, PanelData, RankAgreementMatrix, Scope,
    VarianceShares, WinnerStability,
};
pub use stats::{
    average_ranks, min_reliable_delta, reg_inc_beta, reseed_cv, spearman_rho, student_t_upper,
    NoiseSummary,
};
