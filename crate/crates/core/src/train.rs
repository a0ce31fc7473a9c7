//! Fitting: Adam on mini-batches of the mean negative weighted
//! log-likelihood, dropout on hidden units, early stopping on a monitored
//! loss, centering of the fitted covariate effect, grid search with k-fold
//! cross-validation, and the linear transformation model baseline.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Model, Objective, PreparedData};
use crate::likelihood::{survival_from, ObservedRecord};
use crate::streams::{derive_seed, stream};
use crate::transform::{BernsteinHazard, CovariateNetwork, DropoutMask, TransformationSpec};

/// Adam moment decay rates and denominator guard.
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Total cumulative hazard at the right end of the support at initialization.
const HAZARD_INIT_TOTAL: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub batch_size: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub dropout_rate: f64,
    pub lr_hazard: f64,
    pub lr_net: f64,
    pub max_epochs: usize,
    /// Epochs without improvement before stopping; 0 disables early stopping.
    pub patience: usize,
    /// Bernstein degree.
    pub m: usize,
    /// Transformation index.
    pub r: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            batch_size: 64,
            hidden_layers: 2,
            hidden_width: 32,
            dropout_rate: 0.1,
            lr_hazard: 0.01,
            lr_net: 1e-3,
            max_epochs: 100,
            patience: 10,
            m: 5,
            r: 0.0,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::config(format!("hyperparameters: {msg}")));
        if self.batch_size == 0 || self.hidden_layers == 0 || self.hidden_width == 0 || self.m == 0 {
            return fail("batch_size, hidden_layers, hidden_width and m must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail("dropout_rate must lie in [0, 1)");
        }
        if !(self.lr_hazard > 0.0 && self.lr_net > 0.0) {
            return fail("learning rates must be positive");
        }
        if self.patience > self.max_epochs {
            return fail("patience must not exceed max_epochs");
        }
        if !(self.r >= 0.0) {
            return fail("r must be nonnegative");
        }
        Ok(())
    }

    pub fn spec(&self) -> Result<TransformationSpec> {
        TransformationSpec::new(self.r)
    }
}

/// What early stopping watches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Monitor {
    /// Full training-set loss in inference mode.
    #[default]
    Training,
    /// Loss on a random hold-out of the observed records, not used for updates.
    Validation { fraction: f64 },
}

/// Covariate model family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Network,
    /// `g(z) = β·z`, no hidden layers, zero intercept.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FitOptions {
    pub monitor: Monitor,
    /// Bernstein support; defaults to the observed time range of the data.
    pub support: Option<(f64, f64)>,
    pub kind: ModelKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: Model,
    pub spec: TransformationSpec,
    /// Mean of the raw network output on a reference set; zero until centred.
    pub center: f64,
    /// Mean training loss per epoch (over mini-batches, training mode).
    pub train_curve: Vec<f64>,
    /// Monitored loss, index 0 at initialization.
    pub monitor_curve: Vec<f64>,
    pub epochs_run: usize,
    /// Epoch whose parameters were returned (0 = initialization).
    pub best_epoch: usize,
    pub floor_events: usize,
}

impl FitResult {
    /// Raw network output.
    pub fn g_raw(&self, z: &[f64]) -> Result<f64> {
        self.model.net.forward(z, None)
    }

    /// Centred covariate effect `ĝ(z) - center`.
    pub fn g(&self, z: &[f64]) -> Result<f64> {
        Ok(self.g_raw(z)? - self.center)
    }

    /// Baseline hazard rescaled by `exp(center)`, clamped to the support.
    pub fn baseline_hazard(&self, t: f64) -> f64 {
        self.model.hazard.eval_clamped(t) * self.center.exp()
    }

    /// Exposed hazard as a Bernstein polynomial (coefficients scaled by `exp(center)`).
    pub fn centered_hazard(&self) -> BernsteinHazard {
        self.model.hazard.scaled(self.center)
    }

    /// `Λ̂(t) exp(ĝ(z))` from the exposed (centred) pieces.
    pub fn cumulative_hazard(&self, t: f64, z: &[f64]) -> Result<f64> {
        Ok(self.baseline_hazard(t) * self.g(z)?.exp())
    }

    /// `Ŝ(t | z)`, time clamped to the support.
    pub fn survival(&self, t: f64, z: &[f64]) -> Result<f64> {
        Ok(survival_from(&self.spec, self.baseline_hazard(t), self.g(z)?))
    }
}

/// Adam with separate learning rates for the hazard block and the network block.
#[derive(Debug, Clone)]
pub struct Adam {
    first: Vec<f64>,
    second: Vec<f64>,
    steps: i32,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self { first: vec![0.0; len], second: vec![0.0; len], steps: 0 }
    }

    /// Coordinates below `split` use `lr_a`, the rest `lr_b`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], split: usize, lr_a: f64, lr_b: f64) {
        self.steps += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.steps);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.steps);
        for (i, ((p, &g), (m, v))) in params
            .iter_mut()
            .zip(grad)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
            .enumerate()
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let lr = if i < split { lr_a } else { lr_b };
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
        }
    }
}

impl Model {
    /// Copies a flat parameter vector (same layout as `flatten`) into the model.
    pub fn assign(&mut self, values: &[f64]) {
        let mut at = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&values[at..at + dst.len()]);
            at += dst.len();
        };
        take(&mut self.hazard.eta);
        for layer in &mut self.net.layers {
            take(&mut layer.weights);
        }
        for layer in &mut self.net.layers {
            take(&mut layer.bias);
        }
    }
}

fn covariate_dim(data: &[ObservedRecord]) -> Result<usize> {
    data.iter()
        .find_map(|r| r.observed.then(|| r.z.as_ref().map(|z| z.len())).flatten())
        .ok_or_else(|| Error::config("no observed records with covariates"))
}

/// `[min L, max finite L or R]` over the records.
pub fn observed_time_range(data: &[ObservedRecord]) -> Result<(f64, f64)> {
    let lo = data.iter().map(|r| r.l).fold(f64::INFINITY, f64::min);
    let hi = data
        .iter()
        .flat_map(|r| [r.l, r.r])
        .filter(|t| t.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi > lo) {
        return Err(Error::config("cannot infer a Bernstein support from the data"));
    }
    Ok((lo, hi))
}

fn init_model(
    hp: &Hyperparameters,
    kind: ModelKind,
    p: usize,
    support: (f64, f64),
    seed: u64,
) -> Result<Model> {
    let hazard = BernsteinHazard::flat(hp.m, support.0, support.1, HAZARD_INIT_TOTAL)?;
    let mut rng = stream(seed, 0);
    let net = match kind {
        ModelKind::Network => {
            let widths = CovariateNetwork::widths_for(p, hp.hidden_layers, hp.hidden_width);
            CovariateNetwork::init_uniform(widths, hp.dropout_rate, &mut rng)?
        }
        ModelKind::Linear => {
            let mut net = CovariateNetwork::init_uniform(vec![p, 1], 0.0, &mut rng)?;
            net.layers[0].bias[0] = 0.0;
            net
        }
    };
    Ok(Model { hazard, net })
}

/// Evaluation set for early stopping.
struct MonitorSet<'a> {
    data: &'a PreparedData,
    indices: Vec<usize>,
}

/// Core training loop shared by `fit`, `fit_ltm` and cross-validation.
fn train_loop(
    model: Model,
    spec: TransformationSpec,
    hp: &Hyperparameters,
    kind: ModelKind,
    train: (&PreparedData, &[usize]),
    monitor: MonitorSet<'_>,
    seed: u64,
) -> Result<FitResult> {
    let (train_data, train_idx) = train;
    let objective = Objective::new(spec, train_data);
    let monitor_objective = Objective::new(spec, monitor.data);
    let monitor_loss = |m: &Model| -> Result<f64> { Ok(monitor_objective.loss(m, &monitor.indices, None)?.loss) };

    let mut model = model;
    let mut flat = model.flatten();
    let layout = flat.layout.clone();
    let split = layout.n_eta();
    let frozen_bias = (kind == ModelKind::Linear).then(|| layout.bias_range(0));
    let mut grad = vec![0.0; layout.len()];
    let mut adam = Adam::new(layout.len());

    let initial = monitor_loss(&model).map_err(|e| Error::Divergence { epoch: 0, reason: e.to_string() })?;
    let mut best = (initial, model.clone(), 0usize);
    let mut monitor_curve = vec![initial];
    let mut train_curve = Vec::new();
    let mut floor_events = 0;
    let mut since_best = 0;
    let mut order = train_idx.to_vec();
    let use_masks = kind == ModelKind::Network && hp.dropout_rate > 0.0;
    let mut epochs_run = 0;

    for epoch in 1..=hp.max_epochs {
        let mut shuffle_rng = stream(derive_seed(seed, &[1, epoch as u64]), 0);
        order.shuffle(&mut shuffle_rng);
        let mut mask_rng = stream(derive_seed(seed, &[2, epoch as u64]), 0);
        let (mut epoch_loss, mut batches, mut floored, mut floorable) = (0.0, 0usize, 0usize, 0usize);
        for batch in order.chunks(hp.batch_size) {
            let masks: Option<Vec<DropoutMask>> =
                use_masks.then(|| batch.iter().map(|_| DropoutMask::sample(&model.net, &mut mask_rng)).collect());
            let value = objective
                .loss_and_grad(&model, batch, masks.as_deref(), &mut grad)
                .map_err(|e| Error::Divergence { epoch, reason: e.to_string() })?;
            if let Some(range) = &frozen_bias {
                grad[range.clone()].iter_mut().for_each(|g| *g = 0.0);
            }
            adam.step(&mut flat.values, &grad, split, hp.lr_hazard, hp.lr_net);
            if flat.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { epoch, reason: "non-finite parameters".into() });
            }
            model.assign(&flat.values);
            epoch_loss += value.loss;
            batches += 1;
            floored += value.floor_events;
            floorable += value.floorable;
        }
        floor_events += floored;
        if floorable > 0 && floored == floorable {
            return Err(Error::Divergence {
                epoch,
                reason: "probability floor engaged for every censored interval in the epoch".into(),
            });
        }
        epochs_run = epoch;
        train_curve.push(if batches > 0 { epoch_loss / batches as f64 } else { 0.0 });
        let current = monitor_loss(&model).map_err(|e| Error::Divergence { epoch, reason: e.to_string() })?;
        monitor_curve.push(current);
        if current < best.0 {
            best = (current, model.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if hp.patience > 0 && since_best >= hp.patience {
                break;
            }
        }
    }
    Ok(FitResult {
        model: best.1,
        spec,
        center: 0.0,
        train_curve,
        monitor_curve,
        epochs_run,
        best_epoch: best.2,
        floor_events,
    })
}

fn fit_kind(
    data: &[ObservedRecord],
    spec: &TransformationSpec,
    hp: &Hyperparameters,
    seed: u64,
    opts: &FitOptions,
    kind: ModelKind,
) -> Result<FitResult> {
    hp.validate()?;
    let p = covariate_dim(data)?;
    let support = match opts.support {
        Some(s) => s,
        None => observed_time_range(data)?,
    };
    let prepared = PreparedData::new(data, hp.m, support.0, support.1, p)?;
    let mut observed: Vec<usize> = (0..data.len()).filter(|&i| prepared.weight(i) > 0.0).collect();
    let (train_idx, monitor_idx) = match opts.monitor {
        Monitor::Training => (observed.clone(), observed),
        Monitor::Validation { fraction } => {
            if !(fraction > 0.0 && fraction < 1.0) {
                return Err(Error::config("validation fraction must lie in (0, 1)"));
            }
            observed.shuffle(&mut stream(derive_seed(seed, &[3]), 0));
            let n_val = ((observed.len() as f64) * fraction).round().max(1.0) as usize;
            let val = observed.split_off(observed.len() - n_val.min(observed.len() - 1));
            (observed, val)
        }
    };
    let model = init_model(hp, kind, p, support, derive_seed(seed, &[0]))?;
    let monitor = MonitorSet { data: &prepared, indices: monitor_idx };
    train_loop(model, *spec, hp, kind, (&prepared, &train_idx), monitor, seed)
}

/// Fits the Bernstein hazard and covariate network by maximizing the
/// weighted log-likelihood; returns the parameters with the best monitored loss.
pub fn fit(
    data: &[ObservedRecord],
    spec: &TransformationSpec,
    hp: &Hyperparameters,
    seed: u64,
    opts: &FitOptions,
) -> Result<FitResult> {
    fit_kind(data, spec, hp, seed, opts, opts.kind)
}

/// Linear transformation model: same pipeline with `g(z) = β·z`.
pub fn fit_ltm(
    data: &[ObservedRecord],
    spec: &TransformationSpec,
    hp: &Hyperparameters,
    seed: u64,
    opts: &FitOptions,
) -> Result<FitResult> {
    fit_kind(data, spec, hp, seed, opts, ModelKind::Linear)
}

/// Sets `center` to the mean raw network output over `reference`.
pub fn center_fit(fit: &FitResult, reference: &[Vec<f64>]) -> Result<FitResult> {
    if reference.is_empty() {
        return Err(Error::config("centering needs a nonempty reference set"));
    }
    let mut sum = 0.0;
    for z in reference {
        sum += fit.g_raw(z)?;
    }
    let center = sum / reference.len() as f64;
    if !center.is_finite() {
        return Err(Error::Numerical { index: 0, reason: "non-finite centering constant".into() });
    }
    Ok(FitResult { center, ..fit.clone() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    /// Index into the grid of the winning point.
    pub best_index: usize,
    /// Winning hyperparameters with `max_epochs` replaced by the average
    /// early-stopping epoch across folds.
    pub selected: Hyperparameters,
    /// Average held-out unweighted negative log-likelihood per grid point
    /// (`inf` when any fold failed).
    pub scores: Vec<f64>,
    pub mean_epochs: Vec<f64>,
}

/// Grid search with `folds`-fold cross-validation on held-out unweighted
/// negative log-likelihood. Ties go to the earlier grid point.
pub fn grid_search_cv(
    data: &[ObservedRecord],
    grid: &[Hyperparameters],
    folds: usize,
    seed: u64,
    opts: &FitOptions,
) -> Result<CvResult> {
    if grid.is_empty() {
        return Err(Error::config("hyperparameter grid is empty"));
    }
    if folds < 2 {
        return Err(Error::config("cross-validation needs at least 2 folds"));
    }
    let p = covariate_dim(data)?;
    let support = match opts.support {
        Some(s) => s,
        None => observed_time_range(data)?,
    };
    let mut observed: Vec<usize> = (0..data.len()).filter(|&i| data[i].observed && data[i].weight > 0.0).collect();
    if observed.len() < folds {
        return Err(Error::config("fewer observed records than folds"));
    }
    observed.shuffle(&mut stream(derive_seed(seed, &[4]), 0));
    let fold_of = |pos: usize| pos % folds;

    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|g| (0..folds).map(move |f| (g, f))).collect();
    let outcomes: Vec<Option<(f64, usize)>> = jobs
        .par_iter()
        .map(|&(g, f)| {
            let hp = &grid[g];
            hp.validate().ok()?;
            let spec = hp.spec().ok()?;
            let prepared = PreparedData::new(data, hp.m, support.0, support.1, p).ok()?;
            let held_data = prepared.clone().unweighted();
            let (mut train_idx, mut held_idx) = (Vec::new(), Vec::new());
            for (pos, &i) in observed.iter().enumerate() {
                if fold_of(pos) == f { held_idx.push(i) } else { train_idx.push(i) }
            }
            let fold_seed = derive_seed(seed, &[5, f as u64]);
            let model = init_model(hp, opts.kind, p, support, derive_seed(fold_seed, &[0])).ok()?;
            let monitor = MonitorSet { data: &held_data, indices: held_idx };
            let result = train_loop(model, spec, hp, opts.kind, (&prepared, &train_idx), monitor, fold_seed).ok()?;
            let score = result.monitor_curve[result.best_epoch];
            score.is_finite().then_some((score, result.best_epoch))
        })
        .collect();

    let mut scores = Vec::with_capacity(grid.len());
    let mut mean_epochs = Vec::with_capacity(grid.len());
    for chunk in outcomes.chunks(folds) {
        if chunk.iter().all(Option::is_some) {
            let vals: Vec<(f64, usize)> = chunk.iter().flatten().copied().collect();
            scores.push(vals.iter().map(|v| v.0).sum::<f64>() / folds as f64);
            mean_epochs.push(vals.iter().map(|v| v.1 as f64).sum::<f64>() / folds as f64);
        } else {
            scores.push(f64::INFINITY);
            mean_epochs.push(0.0);
        }
    }
    let mut best_index = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[best_index] {
            best_index = i;
        }
    }
    if !scores[best_index].is_finite() {
        return Err(Error::Divergence { epoch: 0, reason: "every grid point failed to train".into() });
    }
    let mut selected = grid[best_index].clone();
    selected.max_epochs = mean_epochs[best_index].round().max(1.0) as usize;
    selected.patience = selected.patience.min(selected.max_epochs);
    Ok(CvResult { best_index, selected, scores, mean_epochs })
}
