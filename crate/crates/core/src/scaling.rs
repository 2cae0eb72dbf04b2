//! Sparsity/performance laws and the line fits behind them.
//!
//! Perplexity law: `ln PPL₀ / ln PPL = 1 − s`. Accuracy law:
//! `ln(acc / acc₀)` is linear in `s`, with slope and intercept known only
//! from fits. Both are fitted as `y = a·s + b`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `ln(ppl0) / ln(ppl)`.
pub fn y_ppl(ppl0: f64, ppl: f64) -> Result<f64> {
    for (name, v) in [("ppl0", ppl0), ("ppl", ppl)] {
        if !(v > 1.0) || !v.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "{name} must be a finite perplexity > 1, got {v}"
            )));
        }
    }
    Ok(ppl0.ln() / ppl.ln())
}

/// `ln(acc / acc0)`.
pub fn y_acc(acc0: f64, acc: f64) -> Result<f64> {
    for (name, v) in [("acc0", acc0), ("acc", acc)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "{name} must be a positive accuracy, got {v}"
            )));
        }
    }
    Ok((acc / acc0).ln())
}

fn check_s(s: f64) -> Result<()> {
    if !s.is_finite() || !(0.0..1.0).contains(&s) {
        return Err(Error::SparsityOutOfRange(s));
    }
    Ok(())
}

/// Perplexity predicted by the law: `exp(ln(ppl0) / (1 − s))`.
pub fn predict_ppl(ppl0: f64, s: f64) -> Result<f64> {
    if !(ppl0 > 1.0) || !ppl0.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "ppl0 must be a finite perplexity > 1, got {ppl0}"
        )));
    }
    check_s(s)?;
    Ok((ppl0.ln() / (1.0 - s)).exp())
}

/// Perplexity under a fitted perplexity line: `exp(ln(ppl0) / (a·s + b))`.
/// With `a = -1, b = 1` this is [`predict_ppl`].
pub fn predict_ppl_fitted(ppl0: f64, s: f64, a: f64, b: f64) -> Result<f64> {
    predict_ppl(ppl0, 0.0)?;
    check_s(s)?;
    let y = a * s + b;
    if !(y > 0.0) {
        return Err(Error::Numerical(format!(
            "fitted line gives y = {y} at s = {s}; perplexity is undefined there"
        )));
    }
    Ok((ppl0.ln() / y).exp())
}

/// An accuracy prediction. The fitted law can leave `[0, 1]` (a positive
/// intercept at `s = 0` already does), so out-of-range values are flagged
/// rather than clamped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccPrediction {
    pub value: f64,
    pub exceeds_one: bool,
}

/// `acc0 · exp(a·s + b)`.
pub fn predict_acc(acc0: f64, s: f64, a: f64, b: f64) -> Result<AccPrediction> {
    if !(acc0 > 0.0 && acc0 <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "acc0 must lie in (0, 1], got {acc0}"
        )));
    }
    check_s(s)?;
    let value = acc0 * (a * s + b).exp();
    Ok(AccPrediction {
        value,
        exceeds_one: value > 1.0,
    })
}

/// Ordinary least-squares line with its RMSE (divided by `n`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub a: f64,
    pub b: f64,
    pub rmse: f64,
    pub n_points: usize,
}

impl FitResult {
    pub fn predict(&self, s: f64) -> f64 {
        self.a * s + self.b
    }
}

/// Fit `y = a·s + b`. Points are put in a canonical order first, so the
/// result is bit-identical under any reordering of the input.
pub fn fit_line(points: &[(f64, f64)]) -> Result<FitResult> {
    if points.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "line fit needs at least 2 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|(s, y)| !s.is_finite() || !y.is_finite()) {
        return Err(Error::InvalidArgument("non-finite point in line fit".into()));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.total_cmp(&q.1)));
    let n = pts.len() as f64;
    let mean_s = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mean_s).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument(
            "all abscissas are equal; slope is undefined".into(),
        ));
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mean_s) * (p.1 - mean_y)).sum();
    let a = sxy / sxx;
    let b = mean_y - a * mean_s;
    let mse = pts.iter().map(|p| (p.1 - (a * p.0 + b)).powi(2)).sum::<f64>() / n;
    Ok(FitResult {
        a,
        b,
        rmse: mse.sqrt(),
        n_points: pts.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Perplexity,
    Accuracy,
}

impl MetricKind {
    /// Name of the `y` transform used for this metric.
    pub fn transform(&self) -> &'static str {
        match self {
            MetricKind::Perplexity => "ln_ppl_ratio",
            MetricKind::Accuracy => "ln_acc_ratio",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricKind::Perplexity => "perplexity",
            MetricKind::Accuracy => "accuracy",
        })
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match normalize(s).as_str() {
            "perplexity" | "ppl" => Ok(MetricKind::Perplexity),
            "accuracy" | "acc" => Ok(MetricKind::Accuracy),
            _ => Err(Error::InvalidArgument(format!(
                "unknown metric kind {s:?} (expected perplexity or accuracy)"
            ))),
        }
    }
}

/// One published fit of the laws on a real model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PaperCoefficients {
    pub model: &'static str,
    pub dataset: &'static str,
    pub metric: MetricKind,
    pub a: f64,
    pub b: f64,
    pub rmse: f64,
}

const LLAMA3: &str = "Llama-3-8B-Instruct";
const PHI3: &str = "Phi-3-mini-4k-Instruct";

const fn row(model: &'static str, dataset: &'static str, metric: MetricKind, a: f64, b: f64, rmse: f64) -> PaperCoefficients {
    PaperCoefficients {
        model,
        dataset,
        metric,
        a,
        b,
        rmse,
    }
}

/// Published `(a, b, RMSE)` fits for Llama-3-8B-Instruct and
/// Phi-3-mini-4k-Instruct sliced at several sparsities.
pub const PAPER_COEFFICIENTS: [PaperCoefficients; 10] = [
    row(LLAMA3, "WikiText2", MetricKind::Perplexity, -1.08, 0.96, 0.03),
    row(PHI3, "WikiText2", MetricKind::Perplexity, -0.90, 1.02, 0.01),
    row(LLAMA3, "ARC-e", MetricKind::Accuracy, -2.14, 0.04, 0.05),
    row(PHI3, "ARC-e", MetricKind::Accuracy, -1.84, 0.04, 0.04),
    row(LLAMA3, "ARC-c", MetricKind::Accuracy, -2.02, -0.07, 0.09),
    row(PHI3, "ARC-c", MetricKind::Accuracy, -1.88, -0.01, 0.02),
    row(LLAMA3, "WinoGrande", MetricKind::Accuracy, -0.86, -0.02, 0.02),
    row(PHI3, "WinoGrande", MetricKind::Accuracy, -0.66, -0.02, 0.02),
    row(LLAMA3, "PIQA", MetricKind::Accuracy, -0.91, -0.01, 0.03),
    row(PHI3, "PIQA", MetricKind::Accuracy, -0.90, 0.01, 0.01),
];

fn normalize(s: &str) -> String {
    s.chars()
        .filter(char::is_ascii_alphanumeric)
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

fn model_matches(canonical: &str, query: &str) -> bool {
    let q = normalize(query);
    let c = normalize(canonical);
    // "llama3" and "phi3" are accepted as short names
    q == c || (q.len() >= 4 && c.starts_with(&q))
}

/// Look up a published fit. Model names accept short prefixes such as
/// `llama3` or `phi3`; dataset names ignore case and punctuation.
pub fn paper_coefficients(model: &str, dataset: &str, metric: MetricKind) -> Result<PaperCoefficients> {
    PAPER_COEFFICIENTS
        .iter()
        .find(|r| {
            model_matches(r.model, model) && normalize(r.dataset) == normalize(dataset) && r.metric == metric
        })
        .copied()
        .ok_or_else(|| Error::UnknownKey {
            key: format!("{model} / {dataset} / {metric}"),
            available: PAPER_COEFFICIENTS
                .iter()
                .map(|r| format!("{} / {} / {}", r.model, r.dataset, r.metric))
                .collect::<Vec<_>>()
                .join("; "),
        })
}

/// The metric a dataset is reported with in the registry.
pub fn registry_metric(dataset: &str) -> Option<MetricKind> {
    PAPER_COEFFICIENTS
        .iter()
        .find(|r| normalize(r.dataset) == normalize(dataset))
        .map(|r| r.metric)
}

/// Serialized form of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub a: f64,
    pub b: f64,
    pub rmse: f64,
    pub n: usize,
    pub metric: String,
    pub transform: String,
}

impl FitReport {
    pub fn new(fit: &FitResult, metric: impl Into<String>, kind: MetricKind) -> Self {
        Self {
            a: fit.a,
            b: fit.b,
            rmse: fit.rmse,
            n: fit.n_points,
            metric: metric.into(),
            transform: kind.transform().into(),
        }
    }
}
