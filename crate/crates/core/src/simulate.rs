//! Synthetic cohorts: five covariates, three covariate-effect settings,
//! failure times drawn from the transformation model with baseline
//! `Λ(t) = 0.1 t²`, and jittered, partially attended visit schedules that
//! turn failure times into interval-censored observations.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::ObservedRecord;
use crate::streams::stream;
use crate::transform::TransformationSpec;

/// Number of simulated covariates.
pub const N_COVARIATES: usize = 5;

/// Monte Carlo size for event-rate calibration.
pub const CALIBRATION_SUBJECTS: usize = 100_000;
/// Accepted distance between calibrated and target event rate.
pub const CALIBRATION_TOLERANCE: f64 = 0.005;
const CALIBRATION_MAX_ITER: usize = 60;

/// True covariate-effect setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(try_from = "u8", into = "u8")]
pub enum GCase {
    Linear = 1,
    Deep1 = 2,
    Deep2 = 3,
}

impl TryFrom<u8> for GCase {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(GCase::Linear),
            2 => Ok(GCase::Deep1),
            3 => Ok(GCase::Deep2),
            _ => Err(Error::config(format!("unknown covariate case {v}; expected 1, 2 or 3"))),
        }
    }
}

impl From<GCase> for u8 {
    fn from(c: GCase) -> u8 {
        c as u8
    }
}

/// Cumulative baseline hazard `a t^b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerBaseline {
    pub scale: f64,
    pub power: f64,
}

impl Default for PowerBaseline {
    fn default() -> Self {
        Self { scale: 0.1, power: 2.0 }
    }
}

impl PowerBaseline {
    pub fn eval(&self, t: f64) -> f64 {
        self.scale * t.powf(self.power)
    }

    pub fn inverse(&self, lam: f64) -> f64 {
        (lam / self.scale).powf(1.0 / self.power)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n: usize,
    pub g_case: GCase,
    pub r: f64,
    pub target_event_rate: f64,
    pub k_visits: usize,
    pub attend_prob: f64,
    pub baseline: PowerBaseline,
    /// Study end time; `None` until calibrated.
    pub tau: Option<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            g_case: GCase::Linear,
            r: 0.0,
            target_event_rate: 0.2,
            k_visits: 10,
            attend_prob: 0.8,
            baseline: PowerBaseline::default(),
            tau: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 || self.k_visits < 1 {
            return Err(Error::config("n and k_visits must be >= 1"));
        }
        if !(self.attend_prob > 0.0 && self.attend_prob < 1.0) {
            return Err(Error::config("attend_prob must lie in (0, 1)"));
        }
        if !(self.target_event_rate > 0.0 && self.target_event_rate < 1.0) {
            return Err(Error::config("target_event_rate must lie in (0, 1)"));
        }
        if let Some(tau) = self.tau {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::config("tau must be positive"));
            }
        }
        TransformationSpec::new(self.r)?;
        Ok(())
    }

    pub fn spec(&self) -> Result<TransformationSpec> {
        TransformationSpec::new(self.r)
    }
}

/// Lower-triangular Cholesky factor of the 3×3 correlation `0.5^|i-j|`.
fn ar1_cholesky() -> [[f64; 3]; 3] {
    let sigma = |i: usize, j: usize| 0.5f64.powi((i as i32 - j as i32).abs());
    let mut l = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            l[i][j] = if i == j { (sigma(i, i) - s).sqrt() } else { (sigma(i, j) - s) / l[j][j] };
        }
    }
    l
}

/// One covariate vector: `Z1 ~ Bernoulli(0.5)`, `(Z2, Z3, Z4)` correlated
/// standard normals clipped to `[0, 2]`, `Z5 ~ Uniform[0, 1]`.
pub fn draw_covariates<R: Rng + ?Sized>(rng: &mut R) -> Vec<f64> {
    let chol = ar1_cholesky();
    let z1 = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
    let e: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
    let mut out = vec![z1];
    for row in chol {
        let x: f64 = row.iter().zip(&e).map(|(a, b)| a * b).sum();
        out.push(x.clamp(0.0, 2.0));
    }
    out.push(rng.random::<f64>());
    out
}

/// `n` covariate rows, row `i` from stream `i` under `seed`.
pub fn gen_covariates(n: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..n).map(|i| draw_covariates(&mut stream(seed, i as u64))).collect()
}

/// True covariate effect for each setting.
pub fn g_true(case: GCase, z: &[f64]) -> Result<f64> {
    if z.len() != N_COVARIATES {
        return Err(Error::structural(format!("expected {N_COVARIATES} covariates, got {}", z.len())));
    }
    let deep = |z: &[f64]| z[0] * z[1] * z[1] / 3.0 + (z[2] + 1.0).ln() + (z[2] * z[3]).sqrt() + z[4].exp() / 3.0;
    Ok(match case {
        GCase::Linear => z[0] - 0.3 * z[1] - 0.3 * z[2] + 0.6 * z[3] - 0.5 * z[4] - 0.25,
        GCase::Deep1 => deep(z) - 1.18,
        GCase::Deep2 => deep(z).powi(2) / 4.0 - 0.53,
    })
}

/// Inverse-transform draw of `T` with `S(T | z) = uniform`.
pub fn draw_failure_time(spec: &TransformationSpec, baseline: &PowerBaseline, gval: f64, uniform: f64) -> Result<f64> {
    if !(uniform > 0.0 && uniform < 1.0) {
        return Err(Error::domain(format!("uniform draw must lie in (0, 1), got {uniform}")));
    }
    // G(Λ(t) e^g) = -log U.
    let x = if spec.r() == 0.0 { -uniform.ln() } else { (uniform.powf(-spec.r()) - 1.0) / spec.r() };
    Ok(baseline.inverse(x * (-gval).exp()))
}

/// Attended visit times as fractions of `tau`: scheduled at `j / (k + 1)`,
/// jittered by `Uniform[-1/3, 1/3] / (k + 1)`, kept with `attend_prob`.
fn draw_visit_fractions<R: Rng + ?Sized>(k: usize, attend_prob: f64, rng: &mut R) -> Vec<f64> {
    let spacing = 1.0 / (k + 1) as f64;
    let mut out = Vec::with_capacity(k);
    for j in 1..=k {
        let jitter = rng.random_range(-1.0 / 3.0..=1.0 / 3.0);
        let attended = rng.random::<f64>() < attend_prob;
        if attended {
            out.push((j as f64 + jitter) * spacing);
        }
    }
    out
}

/// Sorted attended visit times on `(0, tau)`.
pub fn gen_visits<R: Rng + ?Sized>(k: usize, tau: f64, attend_prob: f64, rng: &mut R) -> Vec<f64> {
    draw_visit_fractions(k, attend_prob, rng).into_iter().map(|f| f * tau).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Censored {
    pub l: f64,
    pub r: f64,
    pub delta_l: bool,
    pub delta_i: bool,
    /// No visits at all: right-censored at zero.
    pub degenerate: bool,
}

/// Brackets `t` by the sorted visit times.
pub fn censor(t: f64, visits: &[f64]) -> Censored {
    let after = visits.partition_point(|&v| v < t);
    let l = if after == 0 { 0.0 } else { visits[after - 1] };
    let r = visits.get(after).copied().unwrap_or(f64::INFINITY);
    Censored {
        l,
        r,
        delta_l: l == 0.0 && r.is_finite(),
        delta_i: l > 0.0 && r.is_finite(),
        degenerate: visits.is_empty(),
    }
}

/// Everything about one simulated subject that does not depend on `tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectDraw {
    pub z: Vec<f64>,
    pub g: f64,
    pub t: f64,
    visit_fractions: Vec<f64>,
}

impl SubjectDraw {
    pub fn visits(&self, tau: f64) -> Vec<f64> {
        self.visit_fractions.iter().map(|f| f * tau).collect()
    }

    pub fn observe(&self, tau: f64) -> Censored {
        censor(self.t, &self.visits(tau))
    }

    pub fn is_case(&self, tau: f64) -> bool {
        // The last attended visit is the only one that matters.
        self.visit_fractions.last().is_some_and(|&f| f * tau >= self.t)
    }

    pub fn record(&self, tau: f64) -> Result<ObservedRecord> {
        let c = self.observe(tau);
        ObservedRecord::complete(c.l, c.r, c.delta_l, c.delta_i, self.z.clone())
    }
}

/// Draws subject `index`: covariates, failure time, visit schedule (redrawn
/// once if no visit was attended).
pub fn draw_subject(cfg: &SimConfig, spec: &TransformationSpec, seed: u64, index: u64) -> Result<SubjectDraw> {
    let mut rng = stream(seed, index);
    let z = draw_covariates(&mut rng);
    let g = g_true(cfg.g_case, &z)?;
    let uniform = loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            break u;
        }
    };
    let t = draw_failure_time(spec, &cfg.baseline, g, uniform)?;
    let mut visit_fractions = draw_visit_fractions(cfg.k_visits, cfg.attend_prob, &mut rng);
    if visit_fractions.is_empty() {
        visit_fractions = draw_visit_fractions(cfg.k_visits, cfg.attend_prob, &mut rng);
    }
    Ok(SubjectDraw { z, g, t, visit_fractions })
}

pub fn draw_subjects(cfg: &SimConfig, seed: u64) -> Result<Vec<SubjectDraw>> {
    cfg.validate()?;
    let spec = cfg.spec()?;
    (0..cfg.n as u64).map(|i| draw_subject(cfg, &spec, seed, i)).collect()
}

fn event_rate(subjects: &[SubjectDraw], tau: f64) -> f64 {
    subjects.iter().filter(|s| s.is_case(tau)).count() as f64 / subjects.len() as f64
}

/// Monte Carlo event rate for a given `tau`.
pub fn empirical_event_rate(cfg: &SimConfig, tau: f64, subjects: usize, seed: u64) -> Result<f64> {
    let draws = draw_subjects(&SimConfig { n: subjects, tau: Some(tau), ..cfg.clone() }, seed)?;
    Ok(event_rate(&draws, tau))
}

/// Bisection on `tau` until the Monte Carlo event rate over
/// [`CALIBRATION_SUBJECTS`] subjects is within [`CALIBRATION_TOLERANCE`] of
/// the target. The same subjects are reused for every candidate `tau`.
pub fn calibrate_tau(cfg: &SimConfig, seed: u64) -> Result<f64> {
    let target = cfg.target_event_rate;
    if !(target > 0.01 && target < 0.9) {
        return Err(Error::config(format!("target event rate must lie in (0.01, 0.9), got {target}")));
    }
    let subjects = draw_subjects(&SimConfig { n: CALIBRATION_SUBJECTS, tau: None, ..cfg.clone() }, seed)?;
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut expansions = 0;
    while event_rate(&subjects, hi) < target {
        lo = hi;
        hi *= 2.0;
        expansions += 1;
        if expansions > CALIBRATION_MAX_ITER {
            return Err(Error::Calibration(format!("could not bracket event rate {target}")));
        }
    }
    for _ in 0..CALIBRATION_MAX_ITER {
        let mid = 0.5 * (lo + hi);
        let rate = event_rate(&subjects, mid);
        if (rate - target).abs() <= CALIBRATION_TOLERANCE {
            return Ok(mid);
        }
        if rate < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Calibration(format!(
        "event rate {target} not reached within {CALIBRATION_MAX_ITER} bisection steps"
    )))
}

/// Complete records (covariates present, unit weight) for a calibrated configuration.
pub fn gen_cohort(cfg: &SimConfig, seed: u64) -> Result<Vec<ObservedRecord>> {
    let tau = cfg.tau.ok_or_else(|| Error::config("gen_cohort needs a calibrated tau"))?;
    draw_subjects(cfg, seed)?.iter().map(|s| s.record(tau)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::survival_from;

    #[test]
    fn g_true_at_origin() {
        let z = [0.0; 5];
        assert!((g_true(GCase::Linear, &z).unwrap() + 0.25).abs() < 1e-15);
        assert!((g_true(GCase::Deep1, &z).unwrap() - (1.0 / 3.0 - 1.18)).abs() < 1e-15);
        assert!((g_true(GCase::Deep1, &z).unwrap() + 0.846667).abs() < 1e-6);
        assert!((g_true(GCase::Deep2, &z).unwrap() + 0.502222).abs() < 1e-6);
        assert!(GCase::try_from(4).is_err());
    }

    #[test]
    fn failure_time_examples() {
        let b = PowerBaseline::default();
        let id = TransformationSpec::identity();
        assert!((draw_failure_time(&id, &b, 0.0, (-0.4f64).exp()).unwrap() - 2.0).abs() < 1e-12);
        let po = TransformationSpec::new(1.0).unwrap();
        assert!((draw_failure_time(&po, &b, 0.0, 0.5).unwrap() - 10f64.sqrt()).abs() < 1e-12);
        assert!(draw_failure_time(&po, &b, 0.3, 1.0 - 1e-15).unwrap() < 1e-6);
        assert!(draw_failure_time(&po, &b, 0.0, 0.0).is_err());
        assert!(draw_failure_time(&po, &b, 0.0, 1.0).is_err());
    }

    #[test]
    fn failure_time_round_trip() {
        let b = PowerBaseline::default();
        for r in [0.0, 0.5, 1.0] {
            let spec = TransformationSpec::new(r).unwrap();
            for g in [-1.2, 0.0, 0.9] {
                for u in [0.01, 0.3, 0.77, 0.999] {
                    let t = draw_failure_time(&spec, &b, g, u).unwrap();
                    assert!((survival_from(&spec, b.eval(t), g) - u).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn censor_examples() {
        let v = [1.0, 2.0, 3.0];
        let c = censor(0.5, &v);
        assert_eq!((c.l, c.r, c.delta_l, c.delta_i), (0.0, 1.0, true, false));
        let c = censor(2.5, &v);
        assert_eq!((c.l, c.r, c.delta_l, c.delta_i), (2.0, 3.0, false, true));
        let c = censor(5.0, &v);
        assert_eq!((c.l, c.r, c.delta_l, c.delta_i), (3.0, f64::INFINITY, false, false));
        let c = censor(0.5, &[]);
        assert_eq!((c.l, c.r, c.delta_l, c.delta_i, c.degenerate), (0.0, f64::INFINITY, false, false, true));
        // Event exactly at a visit belongs to the interval ending there.
        let c = censor(2.0, &v);
        assert_eq!((c.l, c.r), (1.0, 2.0));
    }

    #[test]
    fn censor_is_exhaustive_and_exclusive() {
        let mut rng = stream(3, 0);
        for _ in 0..10_000 {
            let visits = gen_visits(10, 5.0, 0.8, &mut rng);
            if visits.is_empty() {
                continue;
            }
            let t = rng.random_range(0.0..6.0);
            let c = censor(t, &visits);
            let right = !c.delta_l && !c.delta_i;
            assert_eq!(c.delta_l as u8 + c.delta_i as u8 + right as u8, 1);
            assert!(c.l < t && t <= c.r);
        }
    }

    #[test]
    fn visits_are_increasing_and_in_range() {
        let mut rng = stream(4, 0);
        let tau = 7.0;
        let td = tau / 11.0;
        let mut attended = 0usize;
        let subjects = 100_000;
        for _ in 0..subjects {
            let v = gen_visits(10, tau, 0.8, &mut rng);
            attended += v.len();
            assert!(v.windows(2).all(|w| w[1] - w[0] >= td / 3.0 - 1e-12));
            assert!(v.iter().all(|&t| t > 0.0 && t < tau + td / 3.0));
        }
        let mean = attended as f64 / subjects as f64;
        // Binomial(10, 0.8): sd of the mean is sqrt(1.6 / 1e5).
        assert!((mean - 8.0).abs() < 4.0 * (1.6f64 / subjects as f64).sqrt(), "{mean}");
    }

    #[test]
    fn covariate_law() {
        let rows = gen_covariates(100_000, 5);
        let n = rows.len() as f64;
        let mean_z1 = rows.iter().map(|r| r[0]).sum::<f64>() / n;
        assert!((mean_z1 - 0.5).abs() <= 0.005);
        assert!(rows.iter().all(|r| r[1..4].iter().all(|&x| (0.0..=2.0).contains(&x))));
        assert!(rows.iter().all(|r| (0.0..1.0).contains(&r[4])));
        let chol = ar1_cholesky();
        // Corr(Z2, Z4) of the untruncated draw is the (3,1) entry of L Lᵀ.
        let corr24: f64 = (0..3).map(|k| chol[2][k] * chol[0][k]).sum();
        assert!((corr24 - 0.25).abs() < 1e-15);
    }

    #[test]
    fn g_true_is_roughly_centred() {
        for case in [GCase::Linear, GCase::Deep1, GCase::Deep2] {
            let rows = gen_covariates(1_000_000, 9);
            let mean = rows.iter().map(|z| g_true(case, z).unwrap()).sum::<f64>() / rows.len() as f64;
            assert!(mean.abs() <= 0.02, "{case:?}: {mean}");
        }
    }

    #[test]
    fn calibration_hits_target_on_fresh_draw() {
        let cfg = SimConfig { g_case: GCase::Deep1, target_event_rate: 0.2, ..SimConfig::default() };
        let tau = calibrate_tau(&cfg, 1).unwrap();
        let fresh = empirical_event_rate(&cfg, tau, 100_000, 2).unwrap();
        assert!((fresh - 0.2).abs() <= 0.01, "{fresh}");
        let mut prev = 0.0;
        for i in 1..=10 {
            let rate = empirical_event_rate(&cfg, tau * i as f64 / 5.0, 20_000, 3).unwrap();
            assert!(rate >= prev);
            prev = rate;
        }
        assert!(calibrate_tau(&SimConfig { target_event_rate: 0.0, ..cfg.clone() }, 1).is_err());
        assert!(calibrate_tau(&SimConfig { target_event_rate: 1.0, ..cfg }, 1).is_err());
    }

    #[test]
    fn cohort_is_valid_and_reproducible() {
        let cfg = SimConfig { n: 3000, tau: Some(6.0), ..SimConfig::default() };
        let a = gen_cohort(&cfg, 11).unwrap();
        let b = gen_cohort(&cfg, 11).unwrap();
        assert_eq!(a, b);
        for rec in &a {
            rec.validate().unwrap();
            assert!(rec.r.is_infinite() || rec.r < 6.0);
        }
        assert!(gen_cohort(&SimConfig { tau: None, ..cfg }, 1).is_err());
    }
}
