//! Rank correlation, effect sizes and two-sample tests.
//!
//! Conventions:
//! - ranks are 1-based, ties receive the average of the ranks they span;
//! - Mann–Whitney U is reported for the first argument,
//!   U = #{aᵢ > bⱼ} + ½ #{aᵢ = bⱼ};
//! - t statistics are oriented second-minus-first, so a positive t means the
//!   second group has the larger mean.

use serde::{Deserialize, Serialize};

use crate::error::{KpeError, Result};
use crate::mathcore::special::{normal_two_sided, student_t_two_sided};
use crate::mathcore::{percentile_sorted, sorted_copy};

fn check_finite(name: &str, xs: &[f64]) -> Result<()> {
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(KpeError::validation(format!("{name} contains non-finite values")));
    }
    Ok(())
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator); 0 for fewer than 2 values.
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    percentile_sorted(&sorted_copy(xs), 50.0)
}

/// Average ranks, 1-based.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Σ (t³ - t) over tie groups.
fn tie_term(xs: &[f64]) -> f64 {
    let s = sorted_copy(xs);
    let mut total = 0.0;
    let mut i = 0;
    while i < s.len() {
        let mut j = i;
        while j + 1 < s.len() && s[j + 1] == s[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        total += t * t * t - t;
        i = j + 1;
    }
    total
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(KpeError::validation("pearson needs two aligned lists of length >= 2"));
    }
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(KpeError::Domain("correlation undefined for a constant input".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub rho: f64,
    pub p: f64,
    pub n: usize,
}

/// Two-sided p for a correlation coefficient via t = r√((n-2)/(1-r²)) on
/// n - 2 degrees of freedom.
pub fn correlation_p(rho: f64, n: usize) -> f64 {
    if rho.abs() >= 1.0 {
        return 0.0;
    }
    let dof = (n - 2) as f64;
    let t = rho * (dof / (1.0 - rho * rho)).sqrt();
    student_t_two_sided(t, dof)
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(KpeError::validation(format!(
            "spearman needs aligned lists, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(KpeError::validation("spearman needs at least 3 pairs"));
    }
    check_finite("spearman input", x)?;
    check_finite("spearman input", y)?;
    let rho = pearson(&ranks(x), &ranks(y))?;
    Ok(Correlation {
        rho,
        p: correlation_p(rho, x.len()),
        n: x.len(),
    })
}

/// (#{aᵢ > bⱼ}, #{aᵢ < bⱼ}, #{aᵢ = bⱼ}) in O((n + m) log m).
fn pair_counts(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let sb = sorted_copy(b);
    let (mut gt, mut lt, mut eq) = (0usize, 0usize, 0usize);
    for &x in a {
        let below = sb.partition_point(|&v| v < x);
        let not_above = sb.partition_point(|&v| v <= x);
        gt += below;
        eq += not_above - below;
        lt += sb.len() - not_above;
    }
    (gt as f64, lt as f64, eq as f64)
}

/// Cliff's δ = (#{a > b} - #{a < b}) / (|a|·|b|).
pub fn cliffs_delta(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(KpeError::validation("cliffs_delta needs two non-empty groups"));
    }
    check_finite("cliffs_delta input", a)?;
    check_finite("cliffs_delta input", b)?;
    let (gt, lt, _) = pair_counts(a, b);
    Ok((gt - lt) / (a.len() as f64 * b.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// U for the first group.
    pub u: f64,
    pub z: f64,
    pub p: f64,
}

/// Two-sided Mann–Whitney test, normal approximation with tie and
/// continuity corrections.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    if a.len() < 2 || b.len() < 2 {
        return Err(KpeError::validation("mann_whitney_u needs at least 2 values per group"));
    }
    check_finite("mann_whitney_u input", a)?;
    check_finite("mann_whitney_u input", b)?;
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let mut all = a.to_vec();
    all.extend_from_slice(b);
    let r = ranks(&all);
    let rank_sum: f64 = r[..a.len()].iter().sum();
    let u = rank_sum - n1 * (n1 + 1.0) / 2.0;
    let n = n1 + n2;
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term(&all) / (n * (n - 1.0)));
    if !(var > 0.0) {
        return Err(KpeError::Domain(
            "mann_whitney_u is degenerate: all values are identical".into(),
        ));
    }
    let diff = u - n1 * n2 / 2.0;
    let z = diff.signum() * (diff.abs() - 0.5).max(0.0) / var.sqrt();
    Ok(MannWhitney {
        u,
        z,
        p: normal_two_sided(z),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub dof: f64,
    pub p: f64,
}

fn welch_raw(mu1: f64, v1: f64, n1: f64, mu2: f64, v2: f64, n2: f64) -> TTest {
    let (a, b) = (v1 / n1, v2 / n2);
    let se = (a + b).sqrt();
    let diff = mu2 - mu1;
    let dof = if a + b > 0.0 {
        (a + b) * (a + b) / (a * a / (n1 - 1.0) + b * b / (n2 - 1.0))
    } else {
        n1 + n2 - 2.0
    };
    t_from(diff, se, dof)
}

fn t_from(diff: f64, se: f64, dof: f64) -> TTest {
    let t = if diff == 0.0 {
        0.0
    } else if se == 0.0 {
        diff.signum() * f64::INFINITY
    } else {
        diff / se
    };
    TTest {
        t,
        dof,
        p: student_t_two_sided(t, dof),
    }
}

fn check_summary(sd1: f64, n1: usize, sd2: f64, n2: usize) -> Result<()> {
    if n1 < 2 || n2 < 2 {
        return Err(KpeError::validation("t-test needs at least 2 observations per group"));
    }
    if !(sd1 > 0.0 && sd2 > 0.0) || !sd1.is_finite() || !sd2.is_finite() {
        return Err(KpeError::validation("standard deviations must be positive"));
    }
    Ok(())
}

/// Welch's unequal-variance t-test from group summaries.
pub fn welch_t_summary(mu1: f64, sd1: f64, n1: usize, mu2: f64, sd2: f64, n2: usize) -> Result<TTest> {
    check_summary(sd1, n1, sd2, n2)?;
    Ok(welch_raw(mu1, sd1 * sd1, n1 as f64, mu2, sd2 * sd2, n2 as f64))
}

/// Student's pooled-variance t-test from group summaries.
pub fn student_t_summary(mu1: f64, sd1: f64, n1: usize, mu2: f64, sd2: f64, n2: usize) -> Result<TTest> {
    check_summary(sd1, n1, sd2, n2)?;
    Ok(student_raw(mu1, sd1 * sd1, n1 as f64, mu2, sd2 * sd2, n2 as f64))
}

fn student_raw(mu1: f64, v1: f64, n1: f64, mu2: f64, v2: f64, n2: f64) -> TTest {
    let dof = n1 + n2 - 2.0;
    let pooled = ((n1 - 1.0) * v1 + (n2 - 1.0) * v2) / dof;
    t_from(mu2 - mu1, (pooled * (1.0 / n1 + 1.0 / n2)).sqrt(), dof)
}

/// Cohen's d from summaries, equal-n pooled form (μ₂ - μ₁)/√((s₁² + s₂²)/2).
pub fn cohens_d_summary(mu1: f64, sd1: f64, mu2: f64, sd2: f64) -> Result<f64> {
    if !(sd1 > 0.0 && sd2 > 0.0) {
        return Err(KpeError::validation("standard deviations must be positive"));
    }
    Ok((mu2 - mu1) / ((sd1 * sd1 + sd2 * sd2) / 2.0).sqrt())
}

/// Cohen's d from raw data with the (n - 1)-weighted pooled SD. Zero when
/// the means agree, even if both groups are constant.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(KpeError::validation("cohens_d needs at least 2 values per group"));
    }
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let (v1, v2) = (sample_sd(a).powi(2), sample_sd(b).powi(2));
    let pooled = (((n1 - 1.0) * v1 + (n2 - 1.0) * v2) / (n1 + n2 - 2.0)).sqrt();
    let diff = mean(b) - mean(a);
    Ok(if diff == 0.0 {
        0.0
    } else if pooled == 0.0 {
        diff.signum() * f64::INFINITY
    } else {
        diff / pooled
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub name: String,
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
}

impl GroupSummary {
    pub fn of(name: &str, xs: &[f64]) -> Self {
        GroupSummary {
            name: name.to_string(),
            n: xs.len(),
            mean: if xs.is_empty() { f64::NAN } else { mean(xs) },
            sd: sample_sd(xs),
            median: if xs.is_empty() { f64::NAN } else { median(xs) },
        }
    }
}

/// Statistics assembled by [`group_compare`] and [`correlation_report`].
/// Fields a given analysis does not produce are left empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub spearman_rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub spearman_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cliffs_delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mannwhitney_u: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mannwhitney_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_diff: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub welch: Option<TTest>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub student: Option<TTest>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cohens_d: Option<f64>,
    #[serde(default)]
    pub groups: Vec<GroupSummary>,
}

/// High-vs-low comparison: Δμ = mean(high) - mean(low), both t-test
/// variants, raw-data Cohen's d and per-group summaries.
pub fn group_compare(low: &[f64], high: &[f64]) -> Result<StatsReport> {
    if low.len() < 2 || high.len() < 2 {
        return Err(KpeError::validation(format!(
            "group comparison needs at least 2 values per group, got {} and {}",
            low.len(),
            high.len()
        )));
    }
    check_finite("group values", low)?;
    check_finite("group values", high)?;
    let (n1, n2) = (low.len() as f64, high.len() as f64);
    let (m1, m2) = (mean(low), mean(high));
    let (v1, v2) = (sample_sd(low).powi(2), sample_sd(high).powi(2));
    Ok(StatsReport {
        mean_diff: Some(m2 - m1),
        welch: Some(welch_raw(m1, v1, n1, m2, v2, n2)),
        student: Some(student_raw(m1, v1, n1, m2, v2, n2)),
        cohens_d: Some(cohens_d(low, high)?),
        groups: vec![GroupSummary::of("low", low), GroupSummary::of("high", high)],
        ..StatsReport::default()
    })
}

/// Indices of the bottom and top `frac` of `values`: bottom = values at or
/// below the frac percentile, top = values above the (1 - frac) percentile.
pub fn extreme_groups(values: &[f64], frac: f64) -> (Vec<usize>, Vec<usize>) {
    let sorted = sorted_copy(values);
    let lo_cut = percentile_sorted(&sorted, 100.0 * frac);
    let hi_cut = percentile_sorted(&sorted, 100.0 * (1.0 - frac));
    let low = (0..values.len()).filter(|&i| values[i] <= lo_cut).collect();
    let high = (0..values.len()).filter(|&i| values[i] > hi_cut).collect();
    (low, high)
}

/// Spearman over all pairs, plus Cliff's δ and Mann–Whitney U comparing the
/// densities of the top-20%-energy samples against the bottom-20%.
pub fn correlation_report(energies: &[f64], log_densities: &[f64]) -> Result<StatsReport> {
    if energies.len() != log_densities.len() {
        return Err(KpeError::validation("energies and densities are misaligned"));
    }
    if energies.len() < 10 {
        return Err(KpeError::validation(format!(
            "correlation report needs at least 10 samples, got {}",
            energies.len()
        )));
    }
    let sp = spearman(energies, log_densities)?;
    let (low, high) = extreme_groups(energies, 0.2);
    let pick = |idx: &[usize]| idx.iter().map(|&i| log_densities[i]).collect::<Vec<_>>();
    let (d_low, d_high) = (pick(&low), pick(&high));
    let mw = mann_whitney_u(&d_high, &d_low)?;
    Ok(StatsReport {
        spearman_rho: Some(sp.rho),
        spearman_p: Some(sp.p),
        cliffs_delta: Some(cliffs_delta(&d_high, &d_low)?),
        mannwhitney_u: Some(mw.u),
        mannwhitney_p: Some(mw.p),
        groups: vec![
            GroupSummary::of("low_energy_log_density", &d_low),
            GroupSummary::of("high_energy_log_density", &d_high),
        ],
        ..StatsReport::default()
    })
}
