//! Run configuration, train/test splitting, the per-replication comparison
//! pipeline and Monte Carlo aggregation.

pub mod io;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{draw_case_cohort, draw_srs, subcohort_only};
use crate::error::{Error, Result};
use crate::likelihood::ObservedRecord;
use crate::metrics::{fit_relative_error, mspe, EvalGrid, TrueModel, DEFAULT_POINTS};
use crate::simulate::{calibrate_tau, gen_cohort, SimConfig};
use crate::streams::{derive_seed, stream, tag};
use crate::train::{center_fit, fit, fit_ltm, grid_search_cv, CvResult, FitOptions, FitResult, Hyperparameters};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    /// Subcohort plus every case.
    #[default]
    CaseCohort,
    /// Subcohort plus a Bernoulli(`p_c`) sample of the remaining cases.
    Generalized,
    /// Full cohort.
    None,
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Design::CaseCohort => "case_cohort",
            Design::Generalized => "generalized",
            Design::None => "none",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    /// Weighted network fit on the (generalized) case-cohort sample.
    Pro,
    /// Unweighted network fit on the subcohort alone.
    Sub,
    /// Unweighted network fit on a simple random sample of the same size.
    Srs,
    /// Weighted linear fit on the case-cohort sample.
    Ltm,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Pro, Method::Sub, Method::Srs, Method::Ltm];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Pro => "PRO",
            Method::Sub => "SUB",
            Method::Srs => "SRS",
            Method::Ltm => "LTM",
        })
    }
}

fn default_train_fraction() -> f64 {
    0.9
}
fn default_true() -> bool {
    true
}
fn default_reps() -> usize {
    1
}
fn default_folds() -> usize {
    10
}
fn default_p_s() -> f64 {
    0.2
}
fn default_p_c() -> f64 {
    1.0
}
fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub design: Design,
    #[serde(default = "default_p_s")]
    pub p_s: f64,
    /// Ignored (treated as 1) under the plain case-cohort design.
    #[serde(default = "default_p_c")]
    pub p_c: f64,
    /// Network hyperparameters for PRO, SUB and SRS.
    #[serde(default)]
    pub hp: Hyperparameters,
    /// Hyperparameters for LTM; `hp` when absent.
    #[serde(default)]
    pub ltm_hp: Option<Hyperparameters>,
    /// Tuning grid used when `retune` is set or by the `tune` command.
    #[serde(default)]
    pub grid: Vec<Hyperparameters>,
    #[serde(default = "default_folds")]
    pub folds: usize,
    /// Re-run grid search on the PRO sample in every replication.
    #[serde(default)]
    pub retune: bool,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_true")]
    pub stratified: bool,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Sidecar JSON of calibrated study end times.
    #[serde(default)]
    pub tau_cache: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            design: Design::default(),
            p_s: default_p_s(),
            p_c: default_p_c(),
            hp: Hyperparameters::default(),
            ltm_hp: None,
            grid: Vec::new(),
            folds: default_folds(),
            retune: false,
            fit: FitOptions::default(),
            seed: 0,
            reps: default_reps(),
            train_fraction: default_train_fraction(),
            stratified: true,
            methods: default_methods(),
            tau_cache: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.hp.validate()?;
        if let Some(hp) = &self.ltm_hp {
            hp.validate()?;
        }
        if self.reps < 1 {
            return Err(Error::config("reps must be >= 1"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("train_fraction must lie in (0, 1)"));
        }
        if !(self.p_s > 0.0 && self.p_s <= 1.0) {
            return Err(Error::config("p_s must lie in (0, 1]"));
        }
        if self.design == Design::Generalized && !(self.p_c > 0.0 && self.p_c < 1.0) {
            return Err(Error::config("the generalized design requires 0 < p_c < 1"));
        }
        if self.retune && self.grid.is_empty() {
            return Err(Error::config("retune requires a nonempty grid"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("no methods selected"));
        }
        Ok(())
    }

    /// `(p_s, p_c)` actually used for sampling.
    pub fn probabilities(&self) -> (f64, f64) {
        match self.design {
            Design::CaseCohort => (self.p_s, 1.0),
            Design::Generalized => (self.p_s, self.p_c),
            Design::None => (1.0, 1.0),
        }
    }

    pub fn ltm_hyperparameters(&self) -> &Hyperparameters {
        self.ltm_hp.as_ref().unwrap_or(&self.hp)
    }
}

/// Splits case and non-case strata independently; each stratum sends
/// `floor(frac * size)` records to the training side. Both sides keep input order.
pub fn split_stratified(
    records: &[ObservedRecord],
    frac: f64,
    seed: u64,
) -> Result<(Vec<ObservedRecord>, Vec<ObservedRecord>)> {
    let mask = split_mask(records.iter().map(ObservedRecord::is_case), frac, seed)?;
    Ok(partition(records, &mask))
}

/// Unstratified variant with the same floor rule on the whole set.
pub fn split_random(
    records: &[ObservedRecord],
    frac: f64,
    seed: u64,
) -> Result<(Vec<ObservedRecord>, Vec<ObservedRecord>)> {
    let mask = split_mask(records.iter().map(|_| false), frac, seed)?;
    Ok(partition(records, &mask))
}

fn partition(records: &[ObservedRecord], mask: &[bool]) -> (Vec<ObservedRecord>, Vec<ObservedRecord>) {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (rec, &in_train) in records.iter().zip(mask) {
        if in_train { train.push(rec.clone()) } else { test.push(rec.clone()) }
    }
    (train, test)
}

fn split_mask(strata: impl Iterator<Item = bool>, frac: f64, seed: u64) -> Result<Vec<bool>> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::config(format!("split fraction must lie in (0, 1), got {frac}")));
    }
    let strata: Vec<bool> = strata.collect();
    let mut mask = vec![false; strata.len()];
    for (k, label) in [false, true].into_iter().enumerate() {
        let mut members: Vec<usize> = (0..strata.len()).filter(|&i| strata[i] == label).collect();
        members.shuffle(&mut stream(seed, k as u64));
        let take = (frac * members.len() as f64).floor() as usize;
        for &i in &members[..take] {
            mask[i] = true;
        }
    }
    Ok(mask)
}

/// Calibrated `tau` for the scenario, read from and written to the optional
/// sidecar cache keyed by covariate case, `r` and target event rate.
pub fn resolve_tau(sim: &SimConfig, cache: Option<&Path>, seed: u64) -> Result<f64> {
    if let Some(tau) = sim.tau {
        return Ok(tau);
    }
    let key = format!("case{}_r{}_pe{}", sim.g_case as u8, sim.r, sim.target_event_rate);
    let mut table: BTreeMap<String, f64> = match cache {
        Some(path) if path.exists() => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        _ => BTreeMap::new(),
    };
    if let Some(&tau) = table.get(&key) {
        return Ok(tau);
    }
    let tau = calibrate_tau(sim, derive_seed(seed, &[tag::CALIBRATE]))?;
    if let Some(path) = cache {
        table.insert(key, tau);
        std::fs::write(path, serde_json::to_string_pretty(&table)?)?;
    }
    Ok(tau)
}

/// Simulated cohort passed through the configured design; unsampled
/// subjects keep their outcome and lose their covariates.
pub fn simulate_dataset(cfg: &RunConfig, seed: u64) -> Result<(f64, Vec<ObservedRecord>)> {
    cfg.validate()?;
    let tau = resolve_tau(&cfg.sim, cfg.tau_cache.as_deref(), cfg.seed)?;
    let sim = SimConfig { tau: Some(tau), ..cfg.sim.clone() };
    let cohort = gen_cohort(&sim, derive_seed(seed, &[tag::COHORT]))?;
    let (p_s, p_c) = cfg.probabilities();
    let sample = draw_case_cohort(&cohort, p_s, p_c, derive_seed(seed, &[tag::DESIGN]))?;
    Ok((tau, sample.records))
}

/// Grid search on `data`, or on a freshly simulated tuning dataset of the
/// configured size when `data` is `None`.
pub fn tune(
    cfg: &RunConfig,
    data: Option<Vec<ObservedRecord>>,
    grid: &[Hyperparameters],
    folds: usize,
) -> Result<CvResult> {
    let (support, data) = match data {
        Some(d) => (cfg.fit.support, d),
        None => {
            let (tau, d) = simulate_dataset(cfg, derive_seed(cfg.seed, &[tag::CV]))?;
            (cfg.fit.support.or(Some((0.0, tau))), d)
        }
    };
    let opts = FitOptions { support, ..cfg.fit.clone() };
    grid_search_cv(&data, grid, folds, derive_seed(cfg.seed, &[tag::CV, 1]), &opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub re: f64,
    pub mspe: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutcome {
    pub method: Method,
    /// `Err` holds the failure message; the cell counts as missing.
    pub metrics: std::result::Result<MethodMetrics, String>,
    pub fit: Option<FitResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replication {
    pub rep: usize,
    pub outcomes: Vec<MethodOutcome>,
    pub test_covariates: Vec<Vec<f64>>,
    /// Number of records each method was trained on.
    pub sample_sizes: Vec<(Method, usize)>,
}

impl Replication {
    pub fn metrics(&self, method: Method) -> Option<MethodMetrics> {
        self.outcomes.iter().find(|o| o.method == method).and_then(|o| o.metrics.clone().ok())
    }
}

/// Simulate, split, sample, fit every selected method and score it on the
/// held-out test set. `sim.tau` must be set.
pub fn run_replication(cfg: &RunConfig, rep: usize) -> Result<Replication> {
    let tau = cfg.sim.tau.ok_or_else(|| Error::config("run_replication requires a calibrated tau"))?;
    let spec = cfg.sim.spec()?;
    let rep_seed = derive_seed(cfg.seed, &[rep as u64]);
    let cohort = gen_cohort(&cfg.sim, derive_seed(rep_seed, &[tag::COHORT]))?;
    let split_seed = derive_seed(rep_seed, &[tag::SPLIT]);
    let (train, test) = if cfg.stratified {
        split_stratified(&cohort, cfg.train_fraction, split_seed)?
    } else {
        split_random(&cohort, cfg.train_fraction, split_seed)?
    };
    if test.is_empty() {
        return Err(Error::config("test split is empty"));
    }
    let (p_s, p_c) = cfg.probabilities();
    let sample = draw_case_cohort(&train, p_s, p_c, derive_seed(rep_seed, &[tag::DESIGN]))?;
    let pro_data = sample.observed();

    let truth = TrueModel { baseline: cfg.sim.baseline, case: cfg.sim.g_case, spec };
    let test_covariates: Vec<Vec<f64>> = test.iter().map(|r| r.covariates().map(<[f64]>::to_vec)).collect::<Result<_>>()?;
    let grid = EvalGrid::from_records(&test, DEFAULT_POINTS)?;
    let opts = FitOptions { support: cfg.fit.support.or(Some((0.0, tau))), ..cfg.fit.clone() };
    let fit_seed = derive_seed(rep_seed, &[tag::FIT]);

    let mut hp = cfg.hp.clone();
    if cfg.retune {
        hp = grid_search_cv(&pro_data, &cfg.grid, cfg.folds, derive_seed(rep_seed, &[tag::CV]), &opts)?.selected;
    }

    let mut outcomes = Vec::new();
    let mut sample_sizes = Vec::new();
    for &method in &cfg.methods {
        let data = match method {
            Method::Pro | Method::Ltm => pro_data.clone(),
            Method::Sub => subcohort_only(&sample),
            Method::Srs => draw_srs(&train, pro_data.len(), derive_seed(rep_seed, &[tag::SRS]))?,
        };
        sample_sizes.push((method, data.len()));
        let fitted = match method {
            Method::Ltm => fit_ltm(&data, &spec, cfg.ltm_hyperparameters(), fit_seed, &opts),
            _ => fit(&data, &spec, &hp, fit_seed, &opts),
        };
        let scored = fitted.and_then(|f| {
            let reference: Vec<Vec<f64>> = data.iter().filter_map(|r| r.z.clone()).collect();
            let f = center_fit(&f, &reference)?;
            let re = fit_relative_error(&f, cfg.sim.g_case, &test_covariates)?;
            let mspe = mspe(&f, &truth, &test_covariates, &grid)?;
            Ok((MethodMetrics { re, mspe }, f))
        });
        outcomes.push(match scored {
            Ok((m, f)) => MethodOutcome { method, metrics: Ok(m), fit: Some(f) },
            Err(e) => MethodOutcome { method, metrics: Err(e.to_string()), fit: None },
        });
    }
    Ok(Replication { rep, outcomes, test_covariates, sample_sizes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub design: String,
    pub p_e: f64,
    pub n: usize,
    pub case: u8,
    pub method: Method,
    pub metric: String,
    pub mean: f64,
    pub sd: f64,
    /// Replications contributing to the cell.
    pub count: usize,
}

/// Mean and sample standard deviation; `sd = 0` for a single value.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Folds replications (in the given order) into per-method mean/sd rows.
pub fn aggregate(cfg: &RunConfig, reps: &[Replication]) -> Vec<AggregateRow> {
    let mut rows = Vec::new();
    for &method in &cfg.methods {
        let cells: Vec<MethodMetrics> = reps.iter().filter_map(|r| r.metrics(method)).collect();
        for (metric, values) in [
            ("RE", cells.iter().map(|c| c.re).collect::<Vec<_>>()),
            ("MSPE", cells.iter().map(|c| c.mspe).collect()),
        ] {
            let (mean, sd) = mean_sd(&values);
            rows.push(AggregateRow {
                design: cfg.design.to_string(),
                p_e: cfg.sim.target_event_rate,
                n: cfg.sim.n,
                case: cfg.sim.g_case as u8,
                method,
                metric: metric.into(),
                mean,
                sd,
                count: values.len(),
            });
        }
    }
    rows
}

/// Runs `cfg.reps` replications on `jobs` workers (0 = rayon default) and
/// returns them in replication order with the aggregate table.
pub fn run_mc(cfg: &RunConfig, jobs: usize) -> Result<(Vec<Replication>, Vec<AggregateRow>)> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    cfg.sim.tau = Some(resolve_tau(&cfg.sim, cfg.tau_cache.as_deref(), cfg.seed)?);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::config(format!("worker pool: {e}")))?;
    let reps: Vec<Replication> =
        pool.install(|| (0..cfg.reps).into_par_iter().map(|rep| run_replication(&cfg, rep)).collect::<Result<_>>())?;
    let table = aggregate(&cfg, &reps);
    Ok((reps, table))
}
