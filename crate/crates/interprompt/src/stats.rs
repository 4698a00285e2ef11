//! Student's t-test over per-run performance samples.
//!
//! The two-sided p-value comes from the t-distribution CDF, computed via
//! the regularized incomplete beta function with a continued-fraction
//! evaluation (Numerical Recipes style), so it can be checked against
//! published critical-value tables.

use serde::{Deserialize, Serialize};
use thiserror::Error;

const BETA_TOL: f64 = 1e-10;
const MAX_ITER: usize = 300;

/// ln Γ(z) for z > 0, Lanczos approximation.
pub fn ln_gamma(z: f64) -> f64 {
    assert!(z > 0.0, "ln_gamma domain: z > 0");
    const COEFFS: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    let mut sum = 1.000000000190015;
    for (i, c) in COEFFS.iter().enumerate() {
        sum += c / (z + i as f64 + 1.0);
    }
    let tmp = z + 5.5;
    (z + 0.5) * tmp.ln() - tmp + (2.5066282746310005 * sum / z).ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < 1e-300 {
        d = 1e-300;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < 1e-300 {
            d = 1e-300;
        }
        c = 1.0 + aa / c;
        if c.abs() < 1e-300 {
            c = 1e-300;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < 1e-300 {
            d = 1e-300;
        }
        c = 1.0 + aa / c;
        if c.abs() < 1e-300 {
            c = 1e-300;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < BETA_TOL {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function I_x(a, b).
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    assert!((0.0..=1.0).contains(&x), "x must lie in [0, 1]");
    if x == 0.0 {
        return 0.0;
    }
    if x == 1.0 {
        return 1.0;
    }
    let ln_bt =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let bt = ln_bt.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        bt * beta_cf(a, b, x) / a
    } else {
        1.0 - bt * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Two-sided p-value for a t statistic at the given degrees of freedom.
pub fn two_sided_p(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    if t == 0.0 {
        return 1.0;
    }
    reg_inc_beta(df / 2.0, 0.5, df / (df + t * t))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TTestFlavor {
    TwoSamplePooled,
    Welch,
    Paired,
}

impl std::fmt::Display for TTestFlavor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TTestFlavor::TwoSamplePooled => write!(f, "two_sample_pooled"),
            TTestFlavor::Welch => write!(f, "welch"),
            TTestFlavor::Paired => write!(f, "paired"),
        }
    }
}

/// Named vector of per-fold or per-seed scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleVector {
    pub label: String,
    pub values: Vec<f64>,
}

impl SampleVector {
    pub fn new(label: impl Into<String>, values: Vec<f64>) -> Result<Self, StatsError> {
        if values.len() < 2 {
            return Err(StatsError::TooFewSamples(values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::NonFiniteSample);
        }
        Ok(Self {
            label: label.into(),
            values,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t_statistic: f64,
    pub p_value: f64,
    pub degrees_of_freedom: f64,
    pub flavor: TTestFlavor,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StatsError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("sample values must be finite")]
    NonFiniteSample,
    #[error("paired test requires equal lengths ({0} vs {1})")]
    UnequalPairedLengths(usize, usize),
    #[error("need at least 2 sample vectors")]
    TooFewVectors,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Unbiased sample variance.
fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

fn finish(diff: f64, se: f64, df: f64, flavor: TTestFlavor) -> TTestResult {
    // Zero standard error: equal means give t = 0, p = 1; unequal means
    // give the infinite-t sentinel with p = 0.
    let t = if se == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY.copysign(diff)
        }
    } else {
        diff / se
    };
    TTestResult {
        t_statistic: t,
        p_value: two_sided_p(t, df),
        degrees_of_freedom: df,
        flavor,
    }
}

/// Two-sided Student's t-test between two score vectors.
pub fn t_test(a: &SampleVector, b: &SampleVector, flavor: TTestFlavor) -> Result<TTestResult, StatsError> {
    let (x, y) = (&a.values, &b.values);
    if x.len() < 2 || y.len() < 2 {
        return Err(StatsError::TooFewSamples(x.len().min(y.len())));
    }
    let (n1, n2) = (x.len() as f64, y.len() as f64);
    let diff = mean(x) - mean(y);
    match flavor {
        TTestFlavor::TwoSamplePooled => {
            let df = n1 + n2 - 2.0;
            let pooled = ((n1 - 1.0) * variance(x) + (n2 - 1.0) * variance(y)) / df;
            let se = (pooled * (1.0 / n1 + 1.0 / n2)).sqrt();
            Ok(finish(diff, se, df, flavor))
        }
        TTestFlavor::Welch => {
            let (v1, v2) = (variance(x) / n1, variance(y) / n2);
            let se = (v1 + v2).sqrt();
            let df = if v1 + v2 == 0.0 {
                n1 + n2 - 2.0
            } else {
                (v1 + v2).powi(2) / (v1 * v1 / (n1 - 1.0) + v2 * v2 / (n2 - 1.0))
            };
            Ok(finish(diff, se, df, flavor))
        }
        TTestFlavor::Paired => {
            if x.len() != y.len() {
                return Err(StatsError::UnequalPairedLengths(x.len(), y.len()));
            }
            let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
            let df = n1 - 1.0;
            let se = (variance(&d) / n1).sqrt();
            Ok(finish(mean(&d), se, df, flavor))
        }
    }
}

/// One cell of the pairwise significance matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseCell {
    pub row_label: String,
    pub col_label: String,
    pub result: TTestResult,
}

/// T-test for every unordered pair, as the upper triangle of a matrix.
pub fn pairwise_matrix(
    vectors: &[SampleVector],
    flavor: TTestFlavor,
) -> Result<Vec<PairwiseCell>, StatsError> {
    if vectors.len() < 2 {
        return Err(StatsError::TooFewVectors);
    }
    let mut cells = Vec::new();
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            cells.push(PairwiseCell {
                row_label: vectors[i].label.clone(),
                col_label: vectors[j].label.clone(),
                result: t_test(&vectors[i], &vectors[j], flavor)?,
            });
        }
    }
    Ok(cells)
}
