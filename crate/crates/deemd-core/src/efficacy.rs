//! Dose-dependent efficacy scores from replicate infection probabilities.
//!
//! Replicate infection probabilities are skewed and asymmetric, so the
//! per-dose summary is nonparametric: an exact sign-test confidence interval
//! for the median, built from order statistics and the binomial(n, 1/2)
//! distribution. The dose efficacy is one minus the interval's upper
//! endpoint, which deliberately penalizes uncertain doses: wide intervals
//! mean low scores.

use std::collections::BTreeSet;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EfficacyError {
    #[error("empty input")]
    EmptyInput,
    #[error("confidence level {0} outside (0, 1)")]
    BadLevel(f64),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("doses and scores differ in length")]
    LengthMismatch,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Exact order-statistic confidence interval for the median.
#[derive(Clone, Copy, Debug)]
pub struct SignTestCi {
    pub lower: f64,
    pub upper: f64,
    /// Achieved two-sided coverage, `1 - 2 * BinomCdf(d - 1; n, 1/2)`.
    pub coverage: f64,
    /// Depth of the order statistics used: interval `(x_(d), x_(n+1-d))`.
    pub d: usize,
    /// False when even the widest interval `(min, max)` cannot reach the
    /// requested level; the interval is then `(min, max)`.
    pub sufficient: bool,
}

/// `P[X <= k]` for `X ~ Binomial(n, 1/2)`, exact up to f64 rounding.
fn binom_cdf_half(k: usize, n: usize) -> f64 {
    let mut term = 0.5f64.powi(n as i32);
    let mut total = term;
    for i in 0..k {
        term *= (n - i) as f64 / (i + 1) as f64;
        total += term;
    }
    total
}

/// Exact sign-test confidence interval for the median of `values`.
///
/// Picks the deepest order-statistic pair whose coverage still reaches
/// `level`. When no pair does (small n), falls back to `(min, max)` with its
/// achieved coverage and `sufficient = false`.
pub fn sign_test_median_ci(values: &[f64], level: f64) -> Result<SignTestCi, EfficacyError> {
    if values.is_empty() {
        return Err(EfficacyError::EmptyInput);
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(EfficacyError::BadLevel(level));
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();

    let coverage_at = |d: usize| 1.0 - 2.0 * binom_cdf_half(d - 1, n);
    let mut best: Option<usize> = None;
    let mut d = 1;
    while d <= n.div_ceil(2) && coverage_at(d) >= level {
        best = Some(d);
        d += 1;
    }
    match best {
        Some(d) => Ok(SignTestCi {
            lower: sorted[d - 1],
            upper: sorted[n - d],
            coverage: coverage_at(d),
            d,
            sufficient: true,
        }),
        None => Ok(SignTestCi {
            lower: sorted[0],
            upper: sorted[n - 1],
            coverage: coverage_at(1),
            d: 1,
            sufficient: false,
        }),
    }
}

fn median(values: &[f64]) -> f64 {
    debug_assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Replicate infection probabilities for one (treatment, concentration) and
/// the statistics derived from them.
#[derive(Clone, Debug)]
pub struct DoseGroup {
    pub treatment: String,
    pub concentration: f64,
    pub replicates: Vec<f64>,
    /// Median point estimate of the replicate infection probabilities.
    pub beta: f64,
    pub ci: SignTestCi,
    /// Dose efficacy: `1 - sup CI`.
    pub e: f64,
}

/// Builds the per-dose summary.
pub fn dose_group(
    treatment: &str,
    concentration: f64,
    replicates: Vec<f64>,
    level: f64,
) -> Result<DoseGroup, EfficacyError> {
    if replicates.is_empty() {
        return Err(EfficacyError::EmptyInput);
    }
    let ci = sign_test_median_ci(&replicates, level)?;
    let beta = median(&replicates);
    Ok(DoseGroup {
        treatment: treatment.to_string(),
        concentration,
        replicates,
        beta,
        ci,
        e: 1.0 - ci.upper,
    })
}

/// Dose efficacy alone: one minus the upper confidence bound on the median.
pub fn dose_efficacy(replicates: &[f64], level: f64) -> Result<f64, EfficacyError> {
    Ok(1.0 - sign_test_median_ci(replicates, level)?.upper)
}

/// A treatment's aggregated efficacy over its dose ladder.
#[derive(Clone, Debug)]
pub struct TreatmentScore {
    pub treatment: String,
    /// `(concentration, e)` pairs sorted by concentration.
    pub dose_scores: Vec<(f64, f64)>,
    pub e_t: f64,
    pub effective: bool,
}

/// Aggregates dose scores: the median of the scores at or above `zeta` when
/// any exist, otherwise the median of all scores. Effective iff the result
/// reaches `zeta`.
pub fn treatment_efficacy(
    treatment: &str,
    dose_scores: &[(f64, f64)],
    zeta: f64,
) -> Result<TreatmentScore, EfficacyError> {
    if dose_scores.is_empty() {
        return Err(EfficacyError::EmptyInput);
    }
    let mut sorted = dose_scores.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let scores: Vec<f64> = sorted.iter().map(|(_, e)| *e).collect();
    let passing: Vec<f64> = scores.iter().cloned().filter(|e| *e >= zeta).collect();
    let e_t = if passing.is_empty() { median(&scores) } else { median(&passing) };
    Ok(TreatmentScore {
        treatment: treatment.to_string(),
        dose_scores: sorted,
        e_t,
        effective: e_t >= zeta,
    })
}

/// Ranks treatments by descending aggregated score (name breaks ties) and
/// collects the effective set.
pub fn rank_treatments(
    mut scores: Vec<TreatmentScore>,
) -> (Vec<TreatmentScore>, BTreeSet<String>) {
    scores.sort_by(|a, b| {
        b.e_t
            .partial_cmp(&a.e_t)
            .unwrap()
            .then_with(|| a.treatment.cmp(&b.treatment))
    });
    let effective = scores
        .iter()
        .filter(|s| s.effective)
        .map(|s| s.treatment.clone())
        .collect();
    (scores, effective)
}

/// Display-only logistic trend fit `f(x) = 1 / (1 + exp(-s (x - m)))`.
#[derive(Clone, Copy, Debug)]
pub struct LogisticFit {
    pub midpoint: f64,
    pub slope: f64,
    pub rmse: f64,
}

/// Least-squares logistic fit by damped Gauss-Newton from a five-point
/// midpoint grid. `doses` are log10 concentrations.
pub fn fit_logistic(doses: &[f64], scores: &[f64]) -> Result<LogisticFit, EfficacyError> {
    if doses.len() != scores.len() {
        return Err(EfficacyError::LengthMismatch);
    }
    let mut distinct = doses.to_vec();
    distinct.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(EfficacyError::DegenerateData(format!(
            "{} distinct dose levels, need at least 3",
            distinct.len()
        )));
    }
    if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(EfficacyError::DegenerateData("scores outside [0, 1]".into()));
    }
    let (lo, hi) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    if hi - lo < 1e-9 {
        return Err(EfficacyError::DegenerateData("constant scores".into()));
    }

    // Initial slope sign from the dose/score correlation.
    let n = doses.len() as f64;
    let mean_x = doses.iter().sum::<f64>() / n;
    let mean_y = scores.iter().sum::<f64>() / n;
    let cov: f64 =
        doses.iter().zip(scores).map(|(x, y)| (x - mean_x) * (y - mean_y)).sum();
    let slope_sign = if cov >= 0.0 { 1.0 } else { -1.0 };

    let sse_of = |m: f64, s: f64| -> f64 {
        doses
            .iter()
            .zip(scores)
            .map(|(&x, &y)| {
                let f = 1.0 / (1.0 + (-s * (x - m)).exp());
                (f - y) * (f - y)
            })
            .sum()
    };

    let (x_min, x_max) = (distinct[0], distinct[distinct.len() - 1]);
    let mut best: Option<(f64, f64, f64)> = None;
    for start in 0..5 {
        let mut m = x_min + (x_max - x_min) * start as f64 / 4.0;
        let mut s = slope_sign;
        let mut lambda = 1e-3;
        let mut sse = sse_of(m, s);
        for _ in 0..200 {
            // Gauss-Newton step with Levenberg damping on the 2x2 system.
            let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (&x, &y) in doses.iter().zip(scores) {
                let f = 1.0 / (1.0 + (-s * (x - m)).exp());
                let r = f - y;
                let g = f * (1.0 - f);
                let jm = -s * g;
                let js = (x - m) * g;
                a11 += jm * jm;
                a12 += jm * js;
                a22 += js * js;
                b1 -= jm * r;
                b2 -= js * r;
            }
            let (d11, d22) = (a11 + lambda * a11.max(1e-12), a22 + lambda * a22.max(1e-12));
            let det = d11 * d22 - a12 * a12;
            if det.abs() < 1e-300 {
                break;
            }
            let dm = (b1 * d22 - b2 * a12) / det;
            let ds = (b2 * d11 - b1 * a12) / det;
            let (m_new, s_new) = (m + dm, s + ds);
            let sse_new = sse_of(m_new, s_new);
            if sse_new < sse {
                m = m_new;
                s = s_new;
                sse = sse_new;
                lambda = (lambda / 3.0).max(1e-12);
                if dm.abs() + ds.abs() < 1e-12 {
                    break;
                }
            } else {
                lambda *= 10.0;
                if lambda > 1e12 {
                    break;
                }
            }
        }
        if best.map(|(_, _, b)| sse < b).unwrap_or(true) {
            best = Some((m, s, sse));
        }
    }
    let (midpoint, slope, sse) = best.expect("at least one start");
    Ok(LogisticFit { midpoint, slope, rmse: (sse / n).sqrt() })
}

/// `doses.csv`: one row per (treatment, concentration).
pub fn write_doses_csv(path: &Path, groups: &[DoseGroup]) -> Result<(), EfficacyError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record([
        "treatment",
        "concentration",
        "n",
        "beta",
        "ci_lo",
        "ci_hi",
        "coverage",
        "e",
        "flag",
    ])?;
    for g in groups {
        writer.write_record(&[
            g.treatment.clone(),
            g.concentration.to_string(),
            g.replicates.len().to_string(),
            g.beta.to_string(),
            g.ci.lower.to_string(),
            g.ci.upper.to_string(),
            g.ci.coverage.to_string(),
            g.e.to_string(),
            if g.ci.sufficient { "ok" } else { "low_coverage" }.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// `treatments.csv`: the ranked list with 1-based ranks.
pub fn write_treatments_csv(path: &Path, ranked: &[TreatmentScore]) -> Result<(), EfficacyError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["treatment", "e_t", "effective", "rank"])?;
    for (i, score) in ranked.iter().enumerate() {
        writer.write_record(&[
            score.treatment.clone(),
            score.e_t.to_string(),
            score.effective.to_string(),
            (i + 1).to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}
