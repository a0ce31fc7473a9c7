//! Relative error of the covariate effect, mean squared prediction error of
//! survival curves against the truth, and the interval-adjusted integrated
//! Brier score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{survival_from, ObservedRecord, PROBABILITY_FLOOR};
use crate::simulate::{g_true, GCase, PowerBaseline};
use crate::train::FitResult;
use crate::transform::TransformationSpec;

pub const DEFAULT_POINTS: usize = 512;

/// Integration window `[lower, upper]` with a trapezoid rule on `n_points` nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    pub lower: f64,
    pub upper: f64,
    pub n_points: usize,
}

impl EvalGrid {
    pub fn new(lower: f64, upper: f64, n_points: usize) -> Result<Self> {
        if !(upper > lower) || !lower.is_finite() || !upper.is_finite() {
            return Err(Error::domain(format!("evaluation grid needs lower < upper, got [{lower}, {upper}]")));
        }
        if n_points < 2 {
            return Err(Error::domain("evaluation grid needs at least 2 points"));
        }
        Ok(Self { lower, upper, n_points })
    }

    /// `[min observed time, max finite observed time]` over L and R.
    pub fn from_records(records: &[ObservedRecord], n_points: usize) -> Result<Self> {
        let lo = records.iter().map(|r| r.l).fold(f64::INFINITY, f64::min);
        let hi = records
            .iter()
            .flat_map(|r| [r.l, r.r])
            .filter(|t| t.is_finite())
            .fold(f64::NEG_INFINITY, f64::max);
        Self::new(lo, hi, n_points)
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        let step = (self.upper - self.lower) / (self.n_points - 1) as f64;
        (0..self.n_points).map(move |i| if i + 1 == self.n_points { self.upper } else { self.lower + step * i as f64 })
    }

    /// Trapezoid average `(1/(upper-lower)) ∫ f`.
    pub fn average(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        let last = self.n_points - 1;
        let mut acc = 0.0;
        for (i, t) in self.nodes().enumerate() {
            let w = if i == 0 || i == last { 0.5 } else { 1.0 };
            acc += w * f(t);
        }
        acc / last as f64
    }
}

/// Anything that predicts `S(t | z)`.
pub trait SurvivalPredictor {
    fn survival(&self, t: f64, z: &[f64]) -> Result<f64>;
}

impl SurvivalPredictor for FitResult {
    fn survival(&self, t: f64, z: &[f64]) -> Result<f64> {
        FitResult::survival(self, t, z)
    }
}

/// The data-generating model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrueModel {
    pub baseline: PowerBaseline,
    pub case: GCase,
    pub spec: TransformationSpec,
}

impl TrueModel {
    pub fn g(&self, z: &[f64]) -> Result<f64> {
        g_true(self.case, z)
    }
}

impl SurvivalPredictor for TrueModel {
    fn survival(&self, t: f64, z: &[f64]) -> Result<f64> {
        Ok(survival_from(&self.spec, self.baseline.eval(t.max(0.0)), self.g(z)?))
    }
}

/// `S(t | z) = s` for every input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantSurvival(pub f64);

impl SurvivalPredictor for ConstantSurvival {
    fn survival(&self, _t: f64, _z: &[f64]) -> Result<f64> {
        Ok(self.0)
    }
}

/// `sqrt(mean((ĝ - mean ĝ - g)²) / mean(g²))`.
pub fn relative_error(g_hat: &[f64], g: &[f64]) -> Result<f64> {
    if g_hat.len() != g.len() || g.is_empty() {
        return Err(Error::domain("relative error needs equal nonempty vectors"));
    }
    let n = g.len() as f64;
    let shift = g_hat.iter().sum::<f64>() / n;
    let num: f64 = g_hat.iter().zip(g).map(|(a, b)| (a - shift - b).powi(2)).sum::<f64>() / n;
    let den: f64 = g.iter().map(|b| b * b).sum::<f64>() / n;
    if den <= 0.0 {
        return Err(Error::MetricUndefined("true covariate effect is identically zero".into()));
    }
    Ok((num / den).sqrt())
}

/// Relative error of a fitted network against the true effect on `covariates`.
pub fn fit_relative_error(fit: &FitResult, case: GCase, covariates: &[Vec<f64>]) -> Result<f64> {
    let mut g_hat = Vec::with_capacity(covariates.len());
    let mut g = Vec::with_capacity(covariates.len());
    for z in covariates {
        g_hat.push(fit.g(z)?);
        g.push(g_true(case, z)?);
    }
    relative_error(&g_hat, &g)
}

/// Mean over subjects of the window-averaged squared gap between the true
/// and predicted survival curves.
pub fn mspe(
    predicted: &dyn SurvivalPredictor,
    truth: &dyn SurvivalPredictor,
    covariates: &[Vec<f64>],
    grid: &EvalGrid,
) -> Result<f64> {
    if covariates.is_empty() {
        return Err(Error::MetricUndefined("no test covariates".into()));
    }
    let mut total = 0.0;
    for z in covariates {
        let mut err = None;
        let v = grid.average(|t| match (truth.survival(t, z), predicted.survival(t, z)) {
            (Ok(a), Ok(b)) => (a - b).powi(2),
            (Err(e), _) | (_, Err(e)) => {
                err.get_or_insert(e);
                0.0
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        total += v;
    }
    Ok(total / covariates.len() as f64)
}

/// Estimate of `1(T > t)` given `L < T ≤ R`; `None` when the interval branch
/// is degenerate (`Ŝ(L) - Ŝ(R)` at or below the probability floor).
pub fn indicator_estimate(l: f64, r: f64, t: f64, s_t: f64, s_l: f64, s_r: f64) -> Option<f64> {
    if r.is_finite() && r < t {
        Some(0.0)
    } else if l >= t {
        Some(1.0)
    } else if r.is_finite() {
        let den = s_l - s_r;
        (den > PROBABILITY_FLOOR).then(|| (s_t - s_r) / den)
    } else {
        (s_l > PROBABILITY_FLOOR).then(|| s_t / s_l)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IbsOutcome {
    pub score: f64,
    /// Grid evaluations that fell back to `Î = 0.5`.
    pub degenerate: usize,
}

/// Integrated Brier score with the censoring-adjusted indicator.
pub fn ibs(predicted: &dyn SurvivalPredictor, test: &[ObservedRecord], grid: &EvalGrid) -> Result<IbsOutcome> {
    if test.is_empty() {
        return Err(Error::MetricUndefined("empty test set".into()));
    }
    let mut total = 0.0;
    let mut degenerate = 0;
    let mut err = None;
    for rec in test {
        let z = rec.covariates()?;
        let s_l = predicted.survival(rec.l, z)?;
        let s_r = if rec.r.is_finite() { predicted.survival(rec.r, z)? } else { 0.0 };
        total += grid.average(|t| {
            let s_t = match predicted.survival(t, z) {
                Ok(s) => s,
                Err(e) => {
                    err.get_or_insert(e);
                    return 0.0;
                }
            };
            let i_hat = indicator_estimate(rec.l, rec.r, t, s_t, s_l, s_r).unwrap_or_else(|| {
                degenerate += 1;
                0.5
            });
            (i_hat - s_t).powi(2)
        });
    }
    if let Some(e) = err {
        return Err(e);
    }
    Ok(IbsOutcome { score: total / test.len() as f64, degenerate })
}
