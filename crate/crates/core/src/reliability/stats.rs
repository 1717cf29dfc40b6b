//! Scalar reliability statistics: reseed noise summaries, minimum-reliable
//! -difference thresholds, Spearman rank correlation, and the Student-t
//! quantile they depend on (computed via incomplete-beta inversion, no
//! statistics dependency).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// ln Gamma via the Lanczos approximation (g=7, n=9), ~1e-13 accurate.
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 8] = [
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        return std::f64::consts::PI.ln()
            - (std::f64::consts::PI * x).sin().ln()
            - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = 0.999_999_999_999_809_9;
    let t = x + 7.5;
    for (i, &c) in COEFFS.iter().enumerate() {
        a += c / (x + (i + 1) as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized incomplete beta I_x(a, b) via the Lentz continued fraction.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // Use the symmetry that keeps the continued fraction convergent.
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - reg_inc_beta(b, a, 1.0 - x)
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Upper-tail Student-t quantile: the t >= 0 with P(T_df > t) = p,
/// p in (0, 0.5]. Bisection on the incomplete-beta tail, accurate to 1e-9.
pub fn student_t_upper(p: f64, df: f64) -> f64 {
    assert!(p > 0.0 && p <= 0.5, "upper-tail probability must lie in (0, 0.5]");
    assert!(df > 0.0);
    // P(T > t) = I_x(df/2, 1/2) / 2 with x = df / (df + t^2).
    let tail = |t: f64| 0.5 * reg_inc_beta(df / 2.0, 0.5, df / (df + t * t));
    let mut lo = 0.0f64;
    let mut hi = 2.0f64;
    while tail(hi) > p {
        hi *= 2.0;
        if hi > 1e12 {
            break;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if tail(mid) > p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 * (1.0 + hi) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Reseed noise summary of one metric cell across evaluation seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSummary {
    pub mean: f64,
    pub std: f64,
    /// Undefined when the mean is zero.
    pub cv: Option<f64>,
    pub n_seeds: usize,
}

/// Sample mean, sample std (n-1 denominator), and coefficient of variation.
pub fn reseed_cv(values: &[f64]) -> Result<NoiseSummary> {
    if values.len() < 2 {
        return Err(Error::Insufficient("reseed_cv needs at least 2 values".into()));
    }
    let n = values.len() as f64;
    // Identical values have exactly zero spread; the naive two-pass formula
    // would report rounding noise from the mean.
    if values.windows(2).all(|w| w[0] == w[1]) {
        let mean = values[0];
        let cv = if mean == 0.0 { None } else { Some(0.0) };
        return Ok(NoiseSummary { mean, std: 0.0, cv, n_seeds: values.len() });
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();
    let cv = if mean == 0.0 { None } else { Some(std / mean.abs()) };
    Ok(NoiseSummary { mean, std, cv, n_seeds: values.len() })
}

/// Minimum reliable difference for a 95% two-tailed comparison.
///
/// Single-seed comparisons (`s_count == 1`) use the t quantile at
/// `n_noise - 1` degrees of freedom times s*sqrt(2) (~= 3.93 s at five
/// reseeds). Averaging S seeds per side shrinks the threshold to
/// t_{0.025, 2S-2} * s / sqrt(S) (~= 1.6 s at S = 3, ~= 1.0 s at S = 5).
pub fn min_reliable_delta(s: f64, n_noise: usize, s_count: usize) -> f64 {
    assert!(s >= 0.0);
    assert!(n_noise >= 2);
    assert!(s_count >= 1);
    if s == 0.0 {
        return 0.0;
    }
    if s_count == 1 {
        student_t_upper(0.025, (n_noise - 1) as f64) * s * 2.0f64.sqrt()
    } else {
        let df = (2 * s_count - 2) as f64;
        student_t_upper(0.025, df) * s / (s_count as f64).sqrt()
    }
}

/// Average ranks (1-based; ties get the mean of their rank range).
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap());
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mean_rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average-rank tie handling; `None` when
/// either side has zero rank variance.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(Error::shape("spearman_rho needs equal-length vectors"));
    }
    if x.len() < 2 {
        return Err(Error::Insufficient("spearman_rho needs at least 2 points".into()));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some(sxy / (sxx * syy).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn t_quantiles_match_tables() {
        // Reference values from standard t tables.
        assert!((student_t_upper(0.025, 4.0) - 2.776_445).abs() < 1e-4);
        assert!((student_t_upper(0.025, 8.0) - 2.306_004).abs() < 1e-4);
        assert!((student_t_upper(0.025, 2.0) - 4.302_653).abs() < 1e-4);
        assert!((student_t_upper(0.025, 1000.0) - 1.962_339).abs() < 1e-3);
        assert!((student_t_upper(0.05, 10.0) - 1.812_461).abs() < 1e-4);
    }

    #[test]
    fn cv_of_constant_values_is_zero() {
        let s = reseed_cv(&[0.8, 0.8, 0.8]).unwrap();
        assert_eq!(s.std, 0.0);
        assert_eq!(s.cv, Some(0.0));
        assert_eq!(s.mean, 0.8);
    }

    #[test]
    fn cv_matches_published_row() {
        // Five values engineered to mean 0.345, std 0.010: CV ~= 2.9%.
        let vals = [0.335, 0.34, 0.345, 0.35, 0.355];
        let s = reseed_cv(&vals).unwrap();
        assert!((s.mean - 0.345).abs() < 1e-12);
        assert!((s.std - 0.00790569).abs() < 1e-6);
        let cv = s.cv.unwrap();
        assert!(cv > 0.02 && cv < 0.03, "cv {cv}");
    }

    #[test]
    fn zero_mean_cv_is_undefined_marker() {
        let s = reseed_cv(&[-0.1, 0.1]).unwrap();
        assert_eq!(s.cv, None);
        assert!(s.std > 0.0);
    }

    #[test]
    fn std_within_chi_squared_band() {
        // 5 draws from a known normal, repeated: the sample std estimate
        // stays within the 99% chi-squared band around the true sigma.
        let mut g = crate::rng::stream("cv-band", 0, &[]);
        let sigma = 0.25f64;
        let mut inside = 0;
        let trials = 200;
        for _ in 0..trials {
            let vals: Vec<f64> = (0..5)
                .map(|_| {
                    use rand_distr::{Distribution, StandardNormal};
                    let z: f64 = StandardNormal.sample(&mut g);
                    1.0 + sigma * z
                })
                .collect();
            let s = reseed_cv(&vals).unwrap();
            // chi2(4) 0.5% and 99.5% quantiles: 0.207, 14.86.
            let lo = sigma * (0.207f64 / 4.0).sqrt();
            let hi = sigma * (14.86f64 / 4.0).sqrt();
            if s.std >= lo && s.std <= hi {
                inside += 1;
            }
        }
        assert!(inside >= trials * 97 / 100, "only {inside}/{trials} inside 99% band");
    }

    #[test]
    fn delta_thresholds_match_pinned_constants() {
        let single = min_reliable_delta(1.0, 5, 1);
        assert!((single - 3.93).abs() < 0.005, "single-seed {single}");
        let s3 = min_reliable_delta(1.0, 5, 3);
        assert!((s3 - 1.6).abs() < 0.05, "S=3 {s3}");
        assert_eq!(min_reliable_delta(0.0, 5, 1), 0.0);
    }

    #[test]
    fn delta_monotone_in_s_count_and_scale() {
        let mut prev = f64::INFINITY;
        for s_count in 1..=6 {
            let d = min_reliable_delta(1.0, 5, s_count);
            assert!(d < prev, "not decreasing at S={s_count}: {d} vs {prev}");
            prev = d;
        }
        assert!(min_reliable_delta(2.0, 5, 1) > min_reliable_delta(1.0, 5, 1));
    }

    #[test]
    fn spearman_trivial_directions() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let up = [10.0, 20.0, 30.0, 40.0];
        let down = [40.0, 30.0, 20.0, 10.0];
        assert_eq!(spearman_rho(&x, &up).unwrap(), Some(1.0));
        assert_eq!(spearman_rho(&x, &down).unwrap(), Some(-1.0));
        assert_eq!(spearman_rho(&x, &[1.0, 1.0, 1.0, 1.0]).unwrap(), None);
    }

    #[test]
    fn spearman_matches_recount_with_ties() {
        let mut g = crate::rng::stream("spearman-recount", 0, &[]);
        for _ in 0..100 {
            // Quantized draws produce plenty of ties.
            let x: Vec<f64> = (0..20).map(|_| (g.gen::<f64>() * 8.0).floor()).collect();
            let y: Vec<f64> = (0..20).map(|_| (g.gen::<f64>() * 8.0).floor()).collect();
            let got = spearman_rho(&x, &y).unwrap();
            // Independent recount: ranks via counting, then textbook Pearson.
            let rank_of = |v: &[f64]| -> Vec<f64> {
                v.iter()
                    .map(|&a| {
                        let less = v.iter().filter(|&&b| b < a).count() as f64;
                        let equal = v.iter().filter(|&&b| b == a).count() as f64;
                        less + (equal + 1.0) / 2.0
                    })
                    .collect()
            };
            let rx = rank_of(&x);
            let ry = rank_of(&y);
            let n = 20.0;
            let mx = rx.iter().sum::<f64>() / n;
            let my = ry.iter().sum::<f64>() / n;
            let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
            let sxx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
            let syy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
            if sxx == 0.0 || syy == 0.0 {
                assert_eq!(got, None);
            } else {
                let expect = sxy / (sxx * syy).sqrt();
                assert!((got.unwrap() - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spearman_invariant_under_monotone_transform() {
        let mut g = crate::rng::stream("spearman-mono", 0, &[]);
        let x: Vec<f64> = (0..15).map(|_| g.gen::<f64>()).collect();
        let y: Vec<f64> = (0..15).map(|_| g.gen::<f64>()).collect();
        let base = spearman_rho(&x, &y).unwrap().unwrap();
        let x2: Vec<f64> = x.iter().map(|v| (v * 3.0).exp()).collect();
        let y2: Vec<f64> = y.iter().map(|v| v.powi(3) * 10.0 + 5.0).collect();
        let t = spearman_rho(&x2, &y2).unwrap().unwrap();
        assert!((base - t).abs() < 1e-12);
    }

    #[test]
    fn four_item_rankings_live_on_the_eleven_point_lattice() {
        // All permutations of 4 distinct values vs a fixed order.
        let x = [1.0, 2.0, 3.0, 4.0];
        let mut seen = std::collections::BTreeSet::new();
        let perms = [
            [0, 1, 2, 3], [0, 1, 3, 2], [0, 2, 1, 3], [0, 2, 3, 1], [0, 3, 1, 2], [0, 3, 2, 1],
            [1, 0, 2, 3], [1, 0, 3, 2], [1, 2, 0, 3], [1, 2, 3, 0], [1, 3, 0, 2], [1, 3, 2, 0],
            [2, 0, 1, 3], [2, 0, 3, 1], [2, 1, 0, 3], [2, 1, 3, 0], [2, 3, 0, 1], [2, 3, 1, 0],
            [3, 0, 1, 2], [3, 0, 2, 1], [3, 1, 0, 2], [3, 1, 2, 0], [3, 2, 0, 1], [3, 2, 1, 0],
        ];
        for p in perms {
            let y: Vec<f64> = p.iter().map(|&i| x[i]).collect();
            let rho = spearman_rho(&x, &y).unwrap().unwrap();
            let scaled = (rho * 10.0).round();
            assert!((rho * 10.0 - scaled).abs() < 1e-12, "off-lattice rho {rho}");
            seen.insert(scaled as i64);
        }
        for v in seen {
            assert!((-10..=10).contains(&v) && v % 2 == 0);
        }
    }
}
