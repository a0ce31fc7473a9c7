//! Inverse-probability-weighted log-likelihood for interval-censored data
//! under the transformation model `Λ(t | z) = G(Λ(t) exp(g(z)))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transform::{BernsteinHazard, CovariateNetwork, TransformationSpec};

/// Interval probabilities below this are floored before taking logs during training.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Censoring {
    /// Event before the first visit: `(0, R]`.
    Left,
    /// Event between two visits: `(L, R]`.
    Interval,
    /// No event by the last visit: `(L, ∞)`.
    Right,
}

/// One subject: censoring interval, indicators, phase-two inclusion and IPW weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedRecord {
    pub l: f64,
    /// `f64::INFINITY` for right-censored subjects.
    pub r: f64,
    pub delta_l: bool,
    pub delta_i: bool,
    pub observed: bool,
    pub z: Option<Vec<f64>>,
    pub weight: f64,
}

impl ObservedRecord {
    pub fn new(
        l: f64,
        r: f64,
        delta_l: bool,
        delta_i: bool,
        observed: bool,
        z: Option<Vec<f64>>,
        weight: f64,
    ) -> Result<Self> {
        let rec = Self { l, r, delta_l, delta_i, observed, z, weight };
        rec.validate()?;
        Ok(rec)
    }

    /// A fully observed record with unit weight.
    pub fn complete(l: f64, r: f64, delta_l: bool, delta_i: bool, z: Vec<f64>) -> Result<Self> {
        Self::new(l, r, delta_l, delta_i, true, Some(z), 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::domain(format!("invalid record ({msg}): {self:?}")));
        if self.delta_l && self.delta_i {
            return bad("delta_L + delta_I > 1");
        }
        if !(self.l >= 0.0) || self.l.is_infinite() || self.r.is_nan() {
            return bad("L must be finite and nonnegative");
        }
        if !(self.l < self.r) {
            return bad("L < R violated");
        }
        if self.delta_l && !(self.l == 0.0 && self.r.is_finite()) {
            return bad("left-censored needs L = 0 and finite R");
        }
        if self.delta_i && !(self.l > 0.0 && self.r.is_finite()) {
            return bad("interval-censored needs L > 0 and finite R");
        }
        if !self.delta_l && !self.delta_i && self.r.is_finite() {
            return bad("right-censored needs R = inf");
        }
        if self.observed {
            if self.z.is_none() || !(self.weight > 0.0) {
                return bad("observed subject needs covariates and positive weight");
            }
        } else if self.z.is_some() || self.weight != 0.0 {
            return bad("unobserved subject must have no covariates and zero weight");
        }
        Ok(())
    }

    pub fn censoring(&self) -> Censoring {
        if self.delta_l {
            Censoring::Left
        } else if self.delta_i {
            Censoring::Interval
        } else {
            Censoring::Right
        }
    }

    /// Event observed within a finite interval.
    pub fn is_case(&self) -> bool {
        self.delta_l || self.delta_i
    }

    pub fn covariates(&self) -> Result<&[f64]> {
        self.z.as_deref().ok_or_else(|| Error::domain("record has no observed covariates"))
    }
}

/// Inverse of the phase-two inclusion probability; zero for unobserved subjects.
pub fn ipw_weight(delta_l: bool, delta_i: bool, observed: bool, p_s: f64, p_c: f64) -> Result<f64> {
    for (name, p) in [("p_s", p_s), ("p_c", p_c)] {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::config(format!("{name} must lie in (0, 1], got {p}")));
        }
    }
    if delta_l && delta_i {
        return Err(Error::domain("delta_L and delta_I cannot both be 1"));
    }
    if !observed {
        return Ok(0.0);
    }
    let case = (delta_l || delta_i) as u8 as f64;
    Ok(1.0 / ((1.0 - case) * p_s + case * (p_s + (1.0 - p_s) * p_c)))
}

/// Unweighted log-likelihood contribution of one record and its partial
/// derivatives with respect to `Λ(L)`, `Λ(R)` and `g`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct TermEval {
    pub value: f64,
    pub d_lam_l: f64,
    pub d_lam_r: f64,
    pub d_g: f64,
    pub floored: bool,
}

/// With `floor = None` a non-positive interval probability is an error; with
/// a floor the log-probability is clamped and its gradient set to zero.
pub(crate) fn censored_term(
    spec: &TransformationSpec,
    kind: Censoring,
    lam_l: f64,
    lam_r: f64,
    g: f64,
    floor: Option<f64>,
) -> std::result::Result<TermEval, &'static str> {
    let eg = g.exp();
    if !eg.is_finite() {
        return Err("non-finite covariate effect");
    }
    let (log_p, d_xl, d_xr, x_l, x_r) = match kind {
        Censoring::Right => {
            let x_l = lam_l * eg;
            let a_l = spec.g_unchecked(x_l);
            return finish(-a_l, -spec.g_prime(x_l), 0.0, x_l, 0.0, eg, false);
        }
        Censoring::Left => {
            let x_r = lam_r * eg;
            let a_r = spec.g_unchecked(x_r);
            let log_p = (-(-a_r).exp_m1()).ln();
            let d_ar = 1.0 / a_r.exp_m1();
            (log_p, 0.0, d_ar * spec.g_prime(x_r), 0.0, x_r)
        }
        Censoring::Interval => {
            let x_l = lam_l * eg;
            let x_r = lam_r * eg;
            let a_l = spec.g_unchecked(x_l);
            let a_r = spec.g_unchecked(x_r);
            let gap = a_r - a_l;
            let log_p = -a_l + (-(-gap).exp_m1()).ln();
            let inv = 1.0 / gap.exp_m1();
            (log_p, (-1.0 - inv) * spec.g_prime(x_l), inv * spec.g_prime(x_r), x_l, x_r)
        }
    };
    match floor {
        Some(f) if !(log_p >= f.ln()) => {
            if log_p.is_nan() && !(lam_l.is_finite() && lam_r.is_finite()) {
                return Err("non-finite hazard");
            }
            Ok(TermEval { value: f.ln(), d_lam_l: 0.0, d_lam_r: 0.0, d_g: 0.0, floored: true })
        }
        None if !(log_p > f64::NEG_INFINITY) => Err("interval probability is not positive"),
        _ => finish(log_p, d_xl, d_xr, x_l, x_r, eg, false),
    }
}

fn finish(
    value: f64,
    d_xl: f64,
    d_xr: f64,
    x_l: f64,
    x_r: f64,
    eg: f64,
    floored: bool,
) -> std::result::Result<TermEval, &'static str> {
    if !value.is_finite() {
        return Err("non-finite log-likelihood term");
    }
    Ok(TermEval {
        value,
        d_lam_l: d_xl * eg,
        d_lam_r: d_xr * eg,
        d_g: d_xl * x_l + d_xr * x_r,
        floored,
    })
}

/// Weighted log-likelihood contribution of one observed record, `g`
/// evaluated in inference mode. Times outside the hazard support are clamped
/// to it.
pub fn loglik_one(
    hazard: &BernsteinHazard,
    net: &CovariateNetwork,
    spec: &TransformationSpec,
    rec: &ObservedRecord,
) -> Result<f64> {
    loglik_indexed(hazard, net, spec, rec, 0)
}

fn loglik_indexed(
    hazard: &BernsteinHazard,
    net: &CovariateNetwork,
    spec: &TransformationSpec,
    rec: &ObservedRecord,
    index: usize,
) -> Result<f64> {
    if !rec.observed {
        return Err(Error::domain("log-likelihood needs an observed record"));
    }
    let g = net.forward(rec.covariates()?, None)?;
    let kind = rec.censoring();
    let lam_l = if kind == Censoring::Left { 0.0 } else { hazard.eval_clamped(rec.l) };
    let lam_r = if kind == Censoring::Right { 0.0 } else { hazard.eval_clamped(rec.r) };
    let term = censored_term(spec, kind, lam_l, lam_r, g, None)
        .map_err(|reason| Error::Numerical { index, reason: reason.to_string() })?;
    Ok(rec.weight * term.value)
}

/// Sum of weighted contributions over observed records.
pub fn loglik_weighted(
    hazard: &BernsteinHazard,
    net: &CovariateNetwork,
    spec: &TransformationSpec,
    data: &[ObservedRecord],
) -> Result<f64> {
    let mut total = 0.0;
    for (i, rec) in data.iter().enumerate() {
        if !rec.observed || rec.weight == 0.0 {
            continue;
        }
        total += loglik_indexed(hazard, net, spec, rec, i)?;
    }
    Ok(total)
}

/// `S(t | z) = exp(-G(Λ(t) exp(g(z))))`.
pub fn survival(
    hazard: &BernsteinHazard,
    net: &CovariateNetwork,
    spec: &TransformationSpec,
    t: f64,
    z: &[f64],
) -> Result<f64> {
    let lam = hazard.eval(t)?;
    let g = net.forward(z, None)?;
    Ok(survival_from(spec, lam, g))
}

#[inline]
pub fn survival_from(spec: &TransformationSpec, cumulative_hazard: f64, g: f64) -> f64 {
    (-spec.g_unchecked(cumulative_hazard * g.exp())).exp()
}
