//! Exact gradients of the mean negative weighted log-likelihood with respect
//! to every free parameter, by closed-form chain rule through the censoring
//! terms, the Bernstein reparameterization and a backward pass over the
//! network. A central finite-difference oracle is provided for checking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{censored_term, Censoring, ObservedRecord, PROBABILITY_FLOOR};
use crate::transform::{fill_basis, BernsteinHazard, CovariateNetwork, DenseLayer, DropoutMask, TransformationSpec};

/// A hazard/network pair evaluated together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub hazard: BernsteinHazard,
    pub net: CovariateNetwork,
}

impl Model {
    pub fn layout(&self) -> ParameterLayout {
        ParameterLayout {
            m: self.hazard.m,
            c: self.hazard.c,
            u: self.hazard.u,
            widths: self.net.widths.clone(),
            dropout_rate: self.net.dropout_rate,
        }
    }

    pub fn flatten(&self) -> ParameterVector {
        let layout = self.layout();
        let mut values = Vec::with_capacity(layout.len());
        values.extend_from_slice(&self.hazard.eta);
        for layer in &self.net.layers {
            values.extend_from_slice(&layer.weights);
        }
        for layer in &self.net.layers {
            values.extend_from_slice(&layer.bias);
        }
        ParameterVector { values, layout }
    }
}

/// Shapes and offsets of the flat parameter vector: `η`, then every `W_h`
/// row-major, then every `v_h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterLayout {
    pub m: usize,
    pub c: f64,
    pub u: f64,
    pub widths: Vec<usize>,
    pub dropout_rate: f64,
}

impl ParameterLayout {
    pub fn n_eta(&self) -> usize {
        self.m + 1
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn weights_len(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1]).sum()
    }

    pub fn biases_len(&self) -> usize {
        self.widths[1..].iter().sum()
    }

    pub fn len(&self) -> usize {
        self.n_eta() + self.weights_len() + self.biases_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn eta_range(&self) -> std::ops::Range<usize> {
        0..self.n_eta()
    }

    pub fn weight_range(&self, h: usize) -> std::ops::Range<usize> {
        let start = self.n_eta() + self.widths.windows(2).take(h).map(|w| w[0] * w[1]).sum::<usize>();
        start..start + self.widths[h] * self.widths[h + 1]
    }

    pub fn bias_range(&self, h: usize) -> std::ops::Range<usize> {
        let start = self.n_eta() + self.weights_len() + self.widths[1..=h].iter().sum::<usize>();
        start..start + self.widths[h + 1]
    }

    /// Everything after `η`.
    pub fn network_range(&self) -> std::ops::Range<usize> {
        self.n_eta()..self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub values: Vec<f64>,
    pub layout: ParameterLayout,
}

impl ParameterVector {
    pub fn zeros(layout: ParameterLayout) -> Self {
        Self { values: vec![0.0; layout.len()], layout }
    }

    pub fn to_model(&self) -> Result<Model> {
        let layout = &self.layout;
        if self.values.len() != layout.len() {
            return Err(Error::structural(format!(
                "parameter vector has {} entries, layout needs {}",
                self.values.len(),
                layout.len()
            )));
        }
        let hazard = BernsteinHazard::new(layout.m, layout.c, layout.u, self.values[layout.eta_range()].to_vec())?;
        let layers = (0..layout.n_layers())
            .map(|h| DenseLayer {
                rows: layout.widths[h + 1],
                cols: layout.widths[h],
                weights: self.values[layout.weight_range(h)].to_vec(),
                bias: self.values[layout.bias_range(h)].to_vec(),
            })
            .collect();
        let net = CovariateNetwork::from_layers(layout.widths.clone(), layers, layout.dropout_rate)?;
        Ok(Model { hazard, net })
    }
}

/// Records reduced to what the loss needs: censoring kind, weight,
/// covariates and Bernstein suffix sums `Σ_{k>=j} B_k` at `L` and `R`, so
/// that `Λ(t) = Σ_j exp(η_j) S_j(t)`.
#[derive(Debug, Clone)]
pub struct PreparedData {
    m: usize,
    p: usize,
    kinds: Vec<Censoring>,
    weights: Vec<f64>,
    z: Vec<f64>,
    suffix_l: Vec<f64>,
    suffix_r: Vec<f64>,
}

impl PreparedData {
    /// Unobserved records are kept (with zero weight) so indices line up with
    /// the input slice. Times are clamped into `[c, u]`.
    pub fn new(records: &[ObservedRecord], m: usize, c: f64, u: f64, p: usize) -> Result<Self> {
        let n = records.len();
        let mut out = Self {
            m,
            p,
            kinds: Vec::with_capacity(n),
            weights: Vec::with_capacity(n),
            z: Vec::with_capacity(n * p),
            suffix_l: vec![0.0; n * (m + 1)],
            suffix_r: vec![0.0; n * (m + 1)],
        };
        let mut basis = vec![0.0; m + 1];
        for (i, rec) in records.iter().enumerate() {
            out.kinds.push(rec.censoring());
            match (&rec.z, rec.observed) {
                (Some(z), true) => {
                    if z.len() != p {
                        return Err(Error::structural(format!(
                            "record {i} has {} covariates, expected {p}",
                            z.len()
                        )));
                    }
                    out.weights.push(rec.weight);
                    out.z.extend_from_slice(z);
                }
                _ => {
                    out.weights.push(0.0);
                    out.z.extend(std::iter::repeat(0.0).take(p));
                }
            }
            let mut fill = |t: f64, dst: &mut [f64]| {
                let x = (t.clamp(c, u) - c) / (u - c);
                fill_basis(m, x, &mut basis);
                let mut acc = 0.0;
                for j in (0..=m).rev() {
                    acc += basis[j];
                    dst[j] = acc;
                }
            };
            let span = i * (m + 1)..(i + 1) * (m + 1);
            if rec.censoring() != Censoring::Left {
                fill(rec.l, &mut out.suffix_l[span.clone()]);
            }
            if rec.censoring() != Censoring::Right {
                fill(rec.r, &mut out.suffix_r[span]);
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    /// Replaces every positive weight by one (unweighted evaluation).
    pub fn unweighted(mut self) -> Self {
        for w in &mut self.weights {
            if *w > 0.0 {
                *w = 1.0;
            }
        }
        self
    }

    fn z(&self, i: usize) -> &[f64] {
        &self.z[i * self.p..(i + 1) * self.p]
    }

    fn suffix(&self, i: usize) -> (&[f64], &[f64]) {
        let span = i * (self.m + 1)..(i + 1) * (self.m + 1);
        (&self.suffix_l[span.clone()], &self.suffix_r[span])
    }
}

/// Value of a loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    /// Records whose interval probability hit the floor.
    pub floor_events: usize,
    /// Records whose probability could have hit the floor (left or interval censored).
    pub floorable: usize,
}

/// Per-layer buffers for one forward/backward pass.
struct Scratch {
    /// Input to layer `h` (post-activation of layer `h-1`).
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
}

impl Scratch {
    fn new(widths: &[usize]) -> Self {
        Self {
            inputs: widths[..widths.len() - 1].iter().map(|&w| vec![0.0; w]).collect(),
            pre: widths[1..].iter().map(|&w| vec![0.0; w]).collect(),
            delta: widths[1..].iter().map(|&w| vec![0.0; w]).collect(),
        }
    }
}

/// Mean negative weighted log-likelihood over a set of prepared records.
pub struct Objective<'a> {
    pub spec: TransformationSpec,
    pub data: &'a PreparedData,
    /// Whether interval probabilities are floored (training) or an error (strict).
    pub floor: bool,
}

impl<'a> Objective<'a> {
    pub fn new(spec: TransformationSpec, data: &'a PreparedData) -> Self {
        Self { spec, data, floor: true }
    }

    /// Loss only; no gradient.
    pub fn loss(&self, model: &Model, indices: &[usize], masks: Option<&[DropoutMask]>) -> Result<LossValue> {
        self.evaluate(model, indices, masks, None)
    }

    /// Loss and gradient written into `grad` (overwritten, layout of `model.flatten()`).
    pub fn loss_and_grad(
        &self,
        model: &Model,
        indices: &[usize],
        masks: Option<&[DropoutMask]>,
        grad: &mut [f64],
    ) -> Result<LossValue> {
        self.evaluate(model, indices, masks, Some(grad))
    }

    fn evaluate(
        &self,
        model: &Model,
        indices: &[usize],
        masks: Option<&[DropoutMask]>,
        mut grad: Option<&mut [f64]>,
    ) -> Result<LossValue> {
        let data = self.data;
        let net = &model.net;
        let layout = model.layout();
        if data.m != model.hazard.m || data.p != net.input_dim() {
            return Err(Error::structural("prepared data does not match model shapes"));
        }
        if let Some(masks) = masks {
            if masks.len() != indices.len() {
                return Err(Error::structural("one dropout mask per record is required"));
            }
        }
        if let Some(g) = grad.as_deref_mut() {
            if g.len() != layout.len() {
                return Err(Error::structural("gradient buffer has the wrong length"));
            }
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut out = LossValue { loss: 0.0, floor_events: 0, floorable: 0 };
        if indices.is_empty() {
            return Ok(out);
        }
        let scale_n = 1.0 / indices.len() as f64;
        let exp_eta: Vec<f64> = model.hazard.eta.iter().map(|e| e.exp()).collect();
        let mut scratch = Scratch::new(&net.widths);
        let drop_scale = 1.0 / (1.0 - net.dropout_rate);
        let floor = self.floor.then_some(PROBABILITY_FLOOR);
        let last = net.layers.len() - 1;

        for (pos, &i) in indices.iter().enumerate() {
            let w = data.weights[i];
            if w == 0.0 {
                continue;
            }
            let mask = masks.map(|m| &m[pos]);
            // Forward.
            scratch.inputs[0].copy_from_slice(data.z(i));
            for (h, layer) in net.layers.iter().enumerate() {
                let (inputs, rest) = scratch.inputs.split_at_mut((h + 1).min(last + 1));
                layer.apply(&inputs[h], &mut scratch.pre[h]);
                if h < last {
                    let next = &mut rest[0];
                    for (k, a) in next.iter_mut().enumerate() {
                        let v = scratch.pre[h][k].max(0.0);
                        *a = match mask {
                            Some(m) if m.keep[h][k] => v * drop_scale,
                            Some(_) => 0.0,
                            None => v,
                        };
                    }
                }
            }
            let g = scratch.pre[last][0];
            let (s_l, s_r) = data.suffix(i);
            let kind = data.kinds[i];
            let lam_l: f64 = if kind == Censoring::Left { 0.0 } else { exp_eta.iter().zip(s_l).map(|(a, b)| a * b).sum() };
            let lam_r: f64 = if kind == Censoring::Right { 0.0 } else { exp_eta.iter().zip(s_r).map(|(a, b)| a * b).sum() };
            let term = censored_term(&self.spec, kind, lam_l, lam_r, g, floor)
                .map_err(|reason| Error::Numerical { index: i, reason: reason.to_string() })?;
            if kind != Censoring::Right {
                out.floorable += 1;
            }
            if term.floored {
                out.floor_events += 1;
            }
            out.loss -= w * term.value * scale_n;

            let Some(grad) = grad.as_deref_mut() else { continue };
            let coef = -w * scale_n;
            for j in 0..exp_eta.len() {
                grad[j] += coef * exp_eta[j] * (term.d_lam_l * s_l[j] + term.d_lam_r * s_r[j]);
            }
            // Backward through the network.
            scratch.delta[last][0] = coef * term.d_g;
            for h in (0..=last).rev() {
                let layer = &net.layers[h];
                let input = &scratch.inputs[h];
                let wr = layout.weight_range(h);
                let br = layout.bias_range(h);
                let delta = &scratch.delta[h];
                for (r, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    grad[br.start + r] += d;
                    let row = &mut grad[wr.start + r * layer.cols..wr.start + (r + 1) * layer.cols];
                    for (gw, x) in row.iter_mut().zip(input) {
                        *gw += d * x;
                    }
                }
                if h > 0 {
                    let (lower, upper) = scratch.delta.split_at_mut(h);
                    let delta = &upper[0];
                    let below = &mut lower[h - 1];
                    for (k, b) in below.iter_mut().enumerate() {
                        let active = scratch.pre[h - 1][k] > 0.0;
                        let keep = match mask {
                            Some(m) if m.keep[h - 1][k] => drop_scale,
                            Some(_) => 0.0,
                            None => 1.0,
                        };
                        *b = if active && keep != 0.0 {
                            keep * delta.iter().enumerate().map(|(r, d)| d * layer.weight(r, k)).sum::<f64>()
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
        if !out.loss.is_finite() {
            return Err(Error::Numerical { index: indices[0], reason: "non-finite loss".into() });
        }
        Ok(out)
    }
}

/// One dropout mask per record, drawn sequentially from a stream seeded by `mask_seed`.
pub fn masks_from_seed(net: &CovariateNetwork, count: usize, mask_seed: u64) -> Vec<DropoutMask> {
    let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
    (0..count).map(|_| DropoutMask::sample(net, &mut rng)).collect()
}

fn prepare(params: &ParameterVector, batch: &[ObservedRecord]) -> Result<(Model, PreparedData)> {
    let model = params.to_model()?;
    let data = PreparedData::new(batch, model.hazard.m, model.hazard.c, model.hazard.u, model.net.input_dim())?;
    Ok((model, data))
}

/// Mean negative weighted log-likelihood over `batch` and its exact gradient,
/// with dropout masks drawn from `mask_seed` and held fixed.
pub fn loss_and_grad(
    params: &ParameterVector,
    batch: &[ObservedRecord],
    spec: &TransformationSpec,
    mask_seed: u64,
) -> Result<(f64, ParameterVector)> {
    let (model, data) = prepare(params, batch)?;
    let masks = masks_from_seed(&model.net, batch.len(), mask_seed);
    let indices: Vec<usize> = (0..batch.len()).collect();
    let mut grad = ParameterVector::zeros(params.layout.clone());
    let value = Objective::new(*spec, &data).loss_and_grad(&model, &indices, Some(&masks), &mut grad.values)?;
    Ok((value.loss, grad))
}

/// Loss alone, with the same masks `loss_and_grad` would draw.
pub fn loss_at(params: &ParameterVector, batch: &[ObservedRecord], spec: &TransformationSpec, mask_seed: u64) -> Result<f64> {
    let (model, data) = prepare(params, batch)?;
    let masks = masks_from_seed(&model.net, batch.len(), mask_seed);
    let indices: Vec<usize> = (0..batch.len()).collect();
    Ok(Objective::new(*spec, &data).loss(&model, &indices, Some(&masks))?.loss)
}

/// Central differences `(loss(p + h e_i) - loss(p - h e_i)) / 2h` per coordinate.
pub fn finite_diff_grad(
    params: &ParameterVector,
    batch: &[ObservedRecord],
    spec: &TransformationSpec,
    mask_seed: u64,
    h: f64,
) -> Result<ParameterVector> {
    finite_diff(params, h, |p| loss_at(p, batch, spec, mask_seed))
}

/// Central-difference gradient of an arbitrary loss over a parameter vector.
pub fn finite_diff<F>(params: &ParameterVector, h: f64, mut loss: F) -> Result<ParameterVector>
where
    F: FnMut(&ParameterVector) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let mut probe = params.clone();
    let mut grad = ParameterVector::zeros(params.layout.clone());
    for i in 0..params.values.len() {
        let orig = params.values[i];
        probe.values[i] = orig + h;
        let up = loss(&probe)?;
        probe.values[i] = orig - h;
        let down = loss(&probe)?;
        probe.values[i] = orig;
        grad.values[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}
