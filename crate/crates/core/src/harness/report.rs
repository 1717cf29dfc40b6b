//! Report bundle rendering: fixed-width text tables mirroring the audit's
//! table shapes, CSV files (always emitted), and optional SVG charts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::reliability::{
    metric_label, CrossSeedAgreement, GtCorrelation, McNull, MetricKey, RankAgreementMatrix,
    VarianceShares, WinnerStability,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseRow {
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub cv: Option<f64>,
    pub delta_star: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScatterRow {
    pub sae_id: String,
    pub variant: String,
    pub control: String,
    pub gt_mcc: Option<f64>,
    pub gt_f1: Option<f64>,
    pub metric: String,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GtVsL0Row {
    pub sae_id: String,
    pub variant: String,
    pub mean_l0: f64,
    pub gt_mcc: Option<f64>,
    pub gt_f1: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub metric: String,
    pub variant: String,
    pub train_seed: u64,
    pub snapshot_samples: u64,
    pub task_seed: u64,
    pub value: f64,
}

#[derive(Debug, Default)]
pub struct ReportBundle {
    pub noise: Vec<NoiseRow>,
    pub correlations: Vec<GtCorrelation>,
    pub scatter: Vec<ScatterRow>,
    pub gt_vs_l0: Vec<GtVsL0Row>,
    pub shares: Vec<(MetricKey, Option<VarianceShares>)>,
    pub mc: Option<McNull>,
    pub winners: Vec<(MetricKey, WinnerStability)>,
    pub cross_seed: Vec<(MetricKey, CrossSeedAgreement)>,
    pub snr: Vec<(MetricKey, f64)>,
    pub slopes: Vec<((MetricKey, String), Option<f64>)>,
    pub rank_matrix: Option<RankAgreementMatrix>,
    pub trajectories: Vec<TrajectoryRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:+.4}"),
        None => "undef".into(),
    }
}

fn section(out: &mut String, title: &str, body: &str) {
    let _ = writeln!(out, "## {title}");
    if body.trim().is_empty() {
        let _ = writeln!(out, "(no data)");
    } else {
        out.push_str(body);
    }
    let _ = writeln!(out);
}

impl ReportBundle {
    pub fn is_empty(&self) -> bool {
        self.noise.is_empty()
            && self.correlations.is_empty()
            && self.scatter.is_empty()
            && self.gt_vs_l0.is_empty()
            && self.shares.is_empty()
            && self.mc.is_none()
            && self.winners.is_empty()
            && self.cross_seed.is_empty()
            && self.snr.is_empty()
            && self.slopes.is_empty()
            && self.rank_matrix.is_none()
            && self.trajectories.is_empty()
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# metricaudit report\n");

        {
            // Reseed-noise table: metric, mean, std, CV, minimum reliable
            // difference, in that column order.
            let mut body = String::new();
            if !self.noise.is_empty() {
                let _ = writeln!(
                    body,
                    "{:<36} {:>9} {:>9} {:>8} {:>9}",
                    "metric", "mean", "std", "CV", "|delta|*"
                );
                for r in &self.noise {
                    let cv = match r.cv {
                        Some(c) => format!("{:.1}%", c * 100.0),
                        None => "undef".into(),
                    };
                    let _ = writeln!(
                        body,
                        "{:<36} {:>9.4} {:>9.4} {:>8} {:>9.4}",
                        r.metric, r.mean, r.std, cv, r.delta_star
                    );
                }
            }
            section(&mut out, "Reseed noise", &body);
        }

        {
            let mut body = String::new();
            if !self.correlations.is_empty() {
                let _ = writeln!(
                    body,
                    "{:<36} {:>8} {:<14} {:>8} {:>6} {:>6}",
                    "metric", "vs", "scope", "rho", "seeds", "saes"
                );
                for c in &self.correlations {
                    let metric = metric_label(&(c.metric_id.clone(), c.hparam));
                    let rho = if c.insufficient && c.rho.is_none() {
                        "insuff".to_string()
                    } else {
                        fmt_opt(c.rho)
                    };
                    let _ = writeln!(
                        body,
                        "{:<36} {:>8} {:<14} {:>8} {:>6} {:>6}",
                        metric, c.vs, c.scope, rho, c.n_task_seeds, c.n_saes
                    );
                }
            }
            section(&mut out, "Validity correlations", &body);
        }

        {
            let mut body = String::new();
            if !self.shares.is_empty() {
                let _ = writeln!(
                    body,
                    "{:<36} {:>9} {:>9} {:>9}",
                    "metric", "variant", "seed", "snapshot"
                );
                let mut rows: Vec<_> = self.shares.clone();
                rows.sort_by(|a, b| {
                    let sa = a.1.map(|s| s.share_variant).unwrap_or(-1.0);
                    let sb = b.1.map(|s| s.share_variant).unwrap_or(-1.0);
                    sb.partial_cmp(&sa).unwrap()
                });
                for (key, shares) in rows {
                    match shares {
                        Some(s) => {
                            let _ = writeln!(
                                body,
                                "{:<36} {:>9.3} {:>9.3} {:>9.3}",
                                metric_label(&key),
                                s.share_variant,
                                s.share_seed,
                                s.share_snap
                            );
                        }
                        None => {
                            let _ = writeln!(
                                body,
                                "{:<36} {:>9} {:>9} {:>9}",
                                metric_label(&key),
                                "undef",
                                "undef",
                                "undef"
                            );
                        }
                    }
                }
            }
            section(&mut out, "Variance decomposition", &body);
        }

        if let Some(mc) = &self.mc {
            let mut body = String::new();
            let _ = writeln!(body, "{:>10} {:>12} {:>12}", "threshold", "Pr(share>)", "binom SE");
            for &(t, p, se) in &mc.exceedance {
                let _ = writeln!(body, "{t:>10.2} {p:>12.4} {se:>12.4}");
            }
            let _ = writeln!(body, "trials: {}", mc.trials);
            section(&mut out, "Monte-Carlo null (variance shares)", &body);
        }

        {
            let mut body = String::new();
            if !self.winners.is_empty() {
                let _ = writeln!(body, "{:<36} {:>9}  winners", "metric", "distinct");
                for (key, w) in &self.winners {
                    let winners: Vec<String> =
                        w.winners.iter().map(|(s, v)| format!("s{s}:{v}")).collect();
                    let _ = writeln!(
                        body,
                        "{:<36} {:>9}  {}",
                        metric_label(key),
                        w.distinct,
                        winners.join(" ")
                    );
                }
            }
            section(&mut out, "Winner stability", &body);
        }

        {
            let mut body = String::new();
            if !self.cross_seed.is_empty() {
                let _ = writeln!(body, "{:<36} {:>9}", "metric", "mean rho");
                let mut rows: Vec<_> = self.cross_seed.iter().collect();
                rows.sort_by(|a, b| {
                    let ra = a.1.mean_rho.unwrap_or(f64::NEG_INFINITY);
                    let rb = b.1.mean_rho.unwrap_or(f64::NEG_INFINITY);
                    rb.partial_cmp(&ra).unwrap()
                });
                for (key, agg) in rows {
                    let _ = writeln!(
                        body,
                        "{:<36} {:>9}",
                        metric_label(key),
                        fmt_opt(agg.mean_rho)
                    );
                }
            }
            section(&mut out, "Cross-seed rank agreement", &body);
        }

        {
            let mut body = String::new();
            if !self.snr.is_empty() {
                let _ = writeln!(body, "{:<36} {:>9}", "metric", "SNR");
                let mut rows: Vec<_> = self.snr.iter().collect();
                rows.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
                for (key, v) in rows {
                    let s = if v.is_infinite() { "inf".to_string() } else { format!("{v:.2}") };
                    let _ = writeln!(body, "{:<36} {:>9}", metric_label(key), s);
                }
            }
            section(&mut out, "Discriminability (SNR)", &body);
        }

        {
            let mut body = String::new();
            if !self.slopes.is_empty() {
                let _ = writeln!(
                    body,
                    "{:<36} {:<24} {:>14}",
                    "metric", "variant", "slope/1e6"
                );
                for ((key, variant), slope) in &self.slopes {
                    let _ = writeln!(
                        body,
                        "{:<36} {:<24} {:>14}",
                        metric_label(key),
                        variant,
                        fmt_opt(*slope)
                    );
                }
            }
            section(&mut out, "Trajectory slopes", &body);
        }

        if let Some(m) = &self.rank_matrix {
            let mut body = String::new();
            let _ = writeln!(
                body,
                "mean off-diagonal rho: {}",
                fmt_opt(m.mean_offdiag)
            );
            for (i, key) in m.metrics.iter().enumerate() {
                let row: Vec<String> = m.rho[i].iter().map(|r| fmt_opt(*r)).collect();
                let _ = writeln!(body, "{:<36} {}", metric_label(key), row.join(" "));
            }
            section(&mut out, "Cross-metric rank agreement", &body);
        }

        out
    }

    /// Write every section as CSV (always), the text report, and optional
    /// SVG charts. Returns the written paths.
    pub fn write(&self, dir: &Path, svg: bool) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let put = |name: &str, content: String| -> Result<PathBuf> {
            let path = dir.join(name);
            fs::write(&path, content)?;
            Ok(path)
        };

        written.push(put("report.txt", self.render_text())?);

        if !self.noise.is_empty() {
            let mut csv = String::from("metric,mean,std,cv,delta_star\n");
            for r in &self.noise {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{}",
                    r.metric,
                    r.mean,
                    r.std,
                    r.cv.map(|c| c.to_string()).unwrap_or_default(),
                    r.delta_star
                );
            }
            written.push(put("noise.csv", csv)?);
        }

        if !self.correlations.is_empty() {
            let mut csv = String::from("metric,hparam,vs,scope,rho,n_task_seeds,n_saes,insufficient\n");
            for c in &self.correlations {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{},{}",
                    c.metric_id,
                    c.hparam.map(|h| h.to_string()).unwrap_or_default(),
                    c.vs,
                    c.scope,
                    c.rho.map(|r| r.to_string()).unwrap_or_default(),
                    c.n_task_seeds,
                    c.n_saes,
                    c.insufficient
                );
            }
            written.push(put("correlations.csv", csv)?);
        }

        if !self.scatter.is_empty() {
            let mut csv = String::from("sae_id,variant,control,gt_mcc,gt_f1,metric,score\n");
            for r in &self.scatter {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{}",
                    r.sae_id,
                    r.variant,
                    r.control,
                    r.gt_mcc.map(|v| v.to_string()).unwrap_or_default(),
                    r.gt_f1.map(|v| v.to_string()).unwrap_or_default(),
                    r.metric,
                    r.score
                );
            }
            written.push(put("validity_scatter.csv", csv)?);
        }

        if !self.gt_vs_l0.is_empty() {
            let mut csv = String::from("sae_id,variant,mean_l0,gt_mcc,gt_f1\n");
            for r in &self.gt_vs_l0 {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{}",
                    r.sae_id,
                    r.variant,
                    r.mean_l0,
                    r.gt_mcc.map(|v| v.to_string()).unwrap_or_default(),
                    r.gt_f1.map(|v| v.to_string()).unwrap_or_default()
                );
            }
            written.push(put("gt_vs_l0.csv", csv)?);
        }

        if !self.shares.is_empty() {
            let mut csv = String::from("metric,share_variant,share_seed,share_snap\n");
            for (key, s) in &self.shares {
                match s {
                    Some(s) => {
                        let _ = writeln!(
                            csv,
                            "{},{},{},{}",
                            metric_label(key),
                            s.share_variant,
                            s.share_seed,
                            s.share_snap
                        );
                    }
                    None => {
                        let _ = writeln!(csv, "{},,,", metric_label(key));
                    }
                }
            }
            written.push(put("variance_shares.csv", csv)?);
        }

        if let Some(mc) = &self.mc {
            let mut csv = String::from("threshold,exceedance,se\n");
            for &(t, p, se) in &mc.exceedance {
                let _ = writeln!(csv, "{t},{p},{se}");
            }
            written.push(put("mc_null.csv", csv)?);
        }

        if !self.winners.is_empty() {
            let mut csv = String::from("metric,distinct,winners\n");
            for (key, w) in &self.winners {
                let winners: Vec<String> =
                    w.winners.iter().map(|(s, v)| format!("s{s}:{v}")).collect();
                let _ = writeln!(csv, "{},{},{}", metric_label(key), w.distinct, winners.join(" "));
            }
            written.push(put("winner_stability.csv", csv)?);
        }

        if !self.cross_seed.is_empty() {
            let mut csv = String::from("metric,mean_rho\n");
            for (key, agg) in &self.cross_seed {
                let _ = writeln!(
                    csv,
                    "{},{}",
                    metric_label(key),
                    agg.mean_rho.map(|r| r.to_string()).unwrap_or_default()
                );
            }
            written.push(put("cross_seed_rho.csv", csv)?);
        }

        if !self.snr.is_empty() {
            let mut csv = String::from("metric,snr\n");
            for (key, v) in &self.snr {
                let _ = writeln!(csv, "{},{}", metric_label(key), v);
            }
            written.push(put("snr.csv", csv)?);
        }

        if !self.slopes.is_empty() {
            let mut csv = String::from("metric,variant,slope_per_1e6\n");
            for ((key, variant), slope) in &self.slopes {
                let _ = writeln!(
                    csv,
                    "{},{},{}",
                    metric_label(key),
                    variant,
                    slope.map(|s| s.to_string()).unwrap_or_default()
                );
            }
            written.push(put("slopes.csv", csv)?);
        }

        if let Some(m) = &self.rank_matrix {
            let mut csv = String::from("metric");
            for key in &m.metrics {
                let _ = write!(csv, ",{}", metric_label(key));
            }
            csv.push('\n');
            for (i, key) in m.metrics.iter().enumerate() {
                let _ = write!(csv, "{}", metric_label(key));
                for r in &m.rho[i] {
                    let _ = write!(csv, ",{}", r.map(|v| v.to_string()).unwrap_or_default());
                }
                csv.push('\n');
            }
            written.push(put("rank_agreement.csv", csv)?);
        }

        if !self.trajectories.is_empty() {
            let mut csv =
                String::from("metric,variant,train_seed,snapshot_samples,task_seed,value\n");
            for r in &self.trajectories {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{}",
                    r.metric, r.variant, r.train_seed, r.snapshot_samples, r.task_seed, r.value
                );
            }
            written.push(put("trajectories.csv", csv)?);
        }

        if svg {
            if !self.scatter.is_empty() {
                written.push(put("validity_scatter.svg", self.scatter_svg())?);
            }
            if !self.trajectories.is_empty() {
                written.push(put("trajectories.svg", self.trajectory_svg())?);
            }
        }

        Ok(written)
    }

    fn scatter_svg(&self) -> String {
        let pts: Vec<(f64, f64)> = self
            .scatter
            .iter()
            .filter_map(|r| r.gt_mcc.map(|m| (m, r.score)))
            .collect();
        svg_chart(&[("scores", &pts)], "GT-MCC", "score", false)
    }

    fn trajectory_svg(&self) -> String {
        // One polyline per (metric, variant, seed) for the first metric.
        let Some(first_metric) = self.trajectories.first().map(|r| r.metric.clone()) else {
            return String::new();
        };
        let mut series: std::collections::BTreeMap<String, Vec<(f64, f64)>> =
            std::collections::BTreeMap::new();
        for r in self.trajectories.iter().filter(|r| r.metric == first_metric) {
            series
                .entry(format!("{}-s{}", r.variant, r.train_seed))
                .or_default()
                .push((r.snapshot_samples as f64, r.value));
        }
        let named: Vec<(&str, &Vec<(f64, f64)>)> =
            series.iter().map(|(k, v)| (k.as_str(), v)).collect();
        let borrowed: Vec<(&str, &[(f64, f64)])> =
            named.iter().map(|(k, v)| (*k, v.as_slice())).collect();
        svg_chart(&borrowed, "samples", &first_metric, true)
    }
}

/// Minimal SVG line/scatter chart.
fn svg_chart<S: AsRef<[(f64, f64)]>>(
    series: &[(&str, S)],
    x_label: &str,
    y_label: &str,
    lines: bool,
) -> String {
    let (w, h, pad) = (640.0, 420.0, 50.0);
    let mut all: Vec<(f64, f64)> = Vec::new();
    for (_, pts) in series {
        all.extend_from_slice(pts.as_ref());
    }
    if all.is_empty() {
        return String::from("<svg xmlns=\"http://www.w3.org/2000/svg\"/>");
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
    let colors = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    );
    let _ = writeln!(
        out,
        "<line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        h - pad,
        w - pad,
        h - pad
    );
    let _ = writeln!(
        out,
        "<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>",
        h - pad
    );
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" font-size=\"12\">{x_label}</text>",
        w / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        out,
        "<text x=\"6\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 12 {})\">{y_label}</text>",
        h / 2.0,
        h / 2.0
    );
    for (si, (name, pts)) in series.iter().enumerate() {
        let color = colors[si % colors.len()];
        let mut pts: Vec<(f64, f64)> = pts.as_ref().to_vec();
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        if lines && pts.len() > 1 {
            let path: Vec<String> =
                pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
            let _ = writeln!(
                out,
                "<polyline fill=\"none\" stroke=\"{color}\" points=\"{}\"/>",
                path.join(" ")
            );
        }
        for &(x, y) in &pts {
            let _ = writeln!(
                out,
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"2.5\" fill=\"{color}\"/>",
                sx(x),
                sy(y)
            );
        }
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{name}</text>",
            w - pad + 4.0,
            pad + 14.0 * si as f64
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_sections_render_no_data_markers() {
        let bundle = ReportBundle::default();
        let text = bundle.render_text();
        assert!(text.contains("## Reseed noise"));
        assert!(text.contains("(no data)"));
    }

    #[test]
    fn noise_table_has_pinned_column_order() {
        let bundle = ReportBundle {
            noise: vec![NoiseRow {
                metric: "scr@10".into(),
                mean: 0.174,
                std: 0.008,
                cv: Some(0.044),
                delta_star: 0.031,
            }],
            ..Default::default()
        };
        let text = bundle.render_text();
        let header = text
            .lines()
            .find(|l| l.contains("|delta|*"))
            .expect("noise header present");
        let cols: Vec<&str> = header.split_whitespace().collect();
        assert_eq!(cols, vec!["metric", "mean", "std", "CV", "|delta|*"]);
    }

    #[test]
    fn csv_round_trips_values_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = ReportBundle {
            noise: vec![NoiseRow {
                metric: "tpp@500".into(),
                mean: 0.345678901234567,
                std: 0.010000000000000002,
                cv: Some(0.028926551225),
                delta_star: 0.0393,
            }],
            ..Default::default()
        };
        bundle.write(dir.path(), false).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("noise.csv")).unwrap();
        let line = csv.lines().nth(1).unwrap();
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[0], "tpp@500");
        assert_eq!(fields[1].parse::<f64>().unwrap(), 0.345678901234567);
        assert_eq!(fields[2].parse::<f64>().unwrap(), 0.010000000000000002);
        assert_eq!(fields[3].parse::<f64>().unwrap(), 0.028926551225);
        assert_eq!(fields[4].parse::<f64>().unwrap(), 0.0393);
    }

    #[test]
    fn svg_emitted_on_request() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = ReportBundle {
            scatter: vec![ScatterRow {
                sae_id: "a".into(),
                variant: "a".into(),
                control: "none".into(),
                gt_mcc: Some(0.5),
                gt_f1: Some(0.4),
                metric: "sparse_probing.single_in@16".into(),
                score: 0.9,
            }],
            trajectories: vec![
                TrajectoryRow {
                    metric: "core.mse".into(),
                    variant: "a".into(),
                    train_seed: 0,
                    snapshot_samples: 100,
                    task_seed: 0,
                    value: 1.0,
                },
                TrajectoryRow {
                    metric: "core.mse".into(),
                    variant: "a".into(),
                    train_seed: 0,
                    snapshot_samples: 200,
                    task_seed: 0,
                    value: 0.5,
                },
            ],
            ..Default::default()
        };
        let written = bundle.write(dir.path(), true).unwrap();
        assert!(written.iter().any(|p| p.ends_with("validity_scatter.svg")));
        let svg = std::fs::read_to_string(dir.path().join("trajectories.svg")).unwrap();
        assert!(svg.contains("polyline"));
    }
}
