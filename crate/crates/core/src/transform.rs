//! Model building blocks: the logarithmic transformation family, the monotone
//! Bernstein sieve for the cumulative baseline hazard, and the ReLU network
//! for the covariate effect.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this `r` the transformation is treated as the identity.
const R_IDENTITY_CUTOFF: f64 = 1e-12;

/// Logarithmic transformation `G(x) = log(1 + r x) / r`, with `G(x) = x` at `r = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformationSpec {
    r: f64,
}

impl TransformationSpec {
    pub fn new(r: f64) -> Result<Self> {
        if !r.is_finite() || r < 0.0 {
            return Err(Error::config(format!("transformation index r must be >= 0, got {r}")));
        }
        Ok(Self { r })
    }

    /// Proportional hazards.
    pub fn identity() -> Self {
        Self { r: 0.0 }
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn g(&self, x: f64) -> Result<f64> {
        if !(x >= 0.0) {
            return Err(Error::domain(format!("G is defined on x >= 0, got {x}")));
        }
        Ok(self.g_unchecked(x))
    }

    #[inline]
    pub(crate) fn g_unchecked(&self, x: f64) -> f64 {
        if self.r < R_IDENTITY_CUTOFF {
            x
        } else {
            (self.r * x).ln_1p() / self.r
        }
    }

    /// `G'(x) = 1 / (1 + r x)`.
    #[inline]
    pub(crate) fn g_prime(&self, x: f64) -> f64 {
        if self.r < R_IDENTITY_CUTOFF {
            1.0
        } else {
            1.0 / (1.0 + self.r * x)
        }
    }

    /// Inverse of `G`: the `x` with `G(x) = y`.
    pub fn g_inverse(&self, y: f64) -> f64 {
        if self.r < R_IDENTITY_CUTOFF {
            y
        } else {
            (self.r * y).exp_m1() / self.r
        }
    }
}

fn check_support(c: f64, u: f64) -> Result<()> {
    if !(c.is_finite() && u.is_finite() && c >= 0.0 && c < u) {
        return Err(Error::config(format!("invalid Bernstein support [{c}, {u}]")));
    }
    Ok(())
}

/// Bernstein basis `(B_0, ..., B_m)` of degree `m` on `[c, u]` evaluated at `t`.
pub fn bernstein_basis(m: usize, c: f64, u: f64, t: f64) -> Result<Vec<f64>> {
    if m < 1 {
        return Err(Error::config("Bernstein degree must be >= 1"));
    }
    check_support(c, u)?;
    if !(t >= c && t <= u) {
        return Err(Error::domain(format!("t = {t} outside Bernstein support [{c}, {u}]")));
    }
    let mut out = vec![0.0; m + 1];
    fill_basis(m, (t - c) / (u - c), &mut out);
    Ok(out)
}

/// Writes the degree-`m` basis at relative position `x` in `[0, 1]` into `out`.
pub(crate) fn fill_basis(m: usize, x: f64, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m + 1);
    // de Casteljau style triangle: exact endpoints, no pow() of 0^0.
    out.iter_mut().for_each(|b| *b = 0.0);
    out[0] = 1.0;
    let y = 1.0 - x;
    for j in 1..=m {
        let mut prev = 0.0;
        for k in 0..=j {
            let cur = out[k];
            out[k] = y * cur + x * prev;
            prev = cur;
        }
    }
}

/// Cumulative baseline hazard `Λ(t) = Σ φ_k B_k(t)` with
/// `φ_k = Σ_{j<=k} exp(η_j)`, so the coefficients are positive and ordered
/// for every real `η`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BernsteinHazard {
    pub m: usize,
    pub c: f64,
    pub u: f64,
    pub eta: Vec<f64>,
}

impl BernsteinHazard {
    pub fn new(m: usize, c: f64, u: f64, eta: Vec<f64>) -> Result<Self> {
        if m < 1 {
            return Err(Error::config("Bernstein degree must be >= 1"));
        }
        check_support(c, u)?;
        if eta.len() != m + 1 {
            return Err(Error::structural(format!(
                "hazard expects {} free parameters, got {}",
                m + 1,
                eta.len()
            )));
        }
        Ok(Self { m, c, u, eta })
    }

    /// Equal increments summing to `total` at the right endpoint.
    pub fn flat(m: usize, c: f64, u: f64, total: f64) -> Result<Self> {
        let step = (total / (m + 1) as f64).ln();
        Self::new(m, c, u, vec![step; m + 1])
    }

    /// Inverts the reparameterization; `phi` must be positive and strictly increasing.
    pub fn from_coefficients(c: f64, u: f64, phi: &[f64]) -> Result<Self> {
        if phi.len() < 2 {
            return Err(Error::config("need at least two coefficients"));
        }
        let mut eta = Vec::with_capacity(phi.len());
        let mut prev = 0.0;
        for &p in phi {
            let inc = p - prev;
            if !(inc > 0.0) {
                return Err(Error::domain("coefficients must be positive and strictly increasing"));
            }
            eta.push(inc.ln());
            prev = p;
        }
        Self::new(phi.len() - 1, c, u, eta)
    }

    pub fn coefficients(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.eta
            .iter()
            .map(|e| {
                acc += e.exp();
                acc
            })
            .collect()
    }

    pub fn support(&self) -> (f64, f64) {
        (self.c, self.u)
    }

    pub fn clamp(&self, t: f64) -> f64 {
        t.clamp(self.c, self.u)
    }

    pub fn eval(&self, t: f64) -> Result<f64> {
        if !(t >= self.c && t <= self.u) {
            return Err(Error::domain(format!(
                "t = {t} outside hazard support [{}, {}]",
                self.c, self.u
            )));
        }
        Ok(self.eval_in_support(t))
    }

    /// Evaluates after clamping `t` into the support, so the hazard is flat
    /// outside `[c, u]`.
    pub fn eval_clamped(&self, t: f64) -> f64 {
        self.eval_in_support(self.clamp(t))
    }

    fn eval_in_support(&self, t: f64) -> f64 {
        let mut basis = vec![0.0; self.m + 1];
        fill_basis(self.m, (t - self.c) / (self.u - self.c), &mut basis);
        self.coefficients().iter().zip(&basis).map(|(p, b)| p * b).sum()
    }

    /// The same hazard multiplied by `exp(log_factor)`.
    pub fn scaled(&self, log_factor: f64) -> Self {
        Self {
            eta: self.eta.iter().map(|e| e + log_factor).collect(),
            ..self.clone()
        }
    }
}

/// Fully connected layer mapping `cols` inputs to `rows` outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub rows: usize,
    pub cols: usize,
    /// Row-major, `rows * cols`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, weights: vec![0.0; rows * cols], bias: vec![0.0; rows] }
    }

    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.cols + j]
    }

    #[inline]
    pub(crate) fn apply(&self, input: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.weights[i * self.cols..(i + 1) * self.cols];
            *o = self.bias[i] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
        }
    }
}

/// ReLU feedforward network `g: R^{p_0} -> R` with `H` hidden layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateNetwork {
    /// `(p_0, ..., p_H, 1)`.
    pub widths: Vec<usize>,
    pub layers: Vec<DenseLayer>,
    pub dropout_rate: f64,
}

impl CovariateNetwork {
    pub fn from_layers(widths: Vec<usize>, layers: Vec<DenseLayer>, dropout_rate: f64) -> Result<Self> {
        if widths.len() < 2 || *widths.last().unwrap() != 1 {
            return Err(Error::structural("widths must be (p_0, ..., p_H, 1)"));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::structural("layer widths must be positive"));
        }
        if layers.len() != widths.len() - 1 {
            return Err(Error::structural(format!(
                "{} widths need {} layers, got {}",
                widths.len(),
                widths.len() - 1,
                layers.len()
            )));
        }
        for (h, layer) in layers.iter().enumerate() {
            if layer.cols != widths[h]
                || layer.rows != widths[h + 1]
                || layer.weights.len() != layer.rows * layer.cols
                || layer.bias.len() != layer.rows
            {
                return Err(Error::structural(format!("layer {h} does not chain with widths {widths:?}")));
            }
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::config(format!("dropout rate must be in [0, 1), got {dropout_rate}")));
        }
        Ok(Self { widths, layers, dropout_rate })
    }

    pub fn zeros(widths: Vec<usize>, dropout_rate: f64) -> Result<Self> {
        let layers = widths.windows(2).map(|w| DenseLayer::zeros(w[1], w[0])).collect();
        Self::from_layers(widths, layers, dropout_rate)
    }

    /// `input_dim -> hidden^H -> 1`.
    pub fn widths_for(input_dim: usize, hidden_layers: usize, hidden_width: usize) -> Vec<usize> {
        let mut widths = vec![input_dim];
        widths.extend(std::iter::repeat(hidden_width).take(hidden_layers));
        widths.push(1);
        widths
    }

    /// Weights and biases uniform in `±1/sqrt(fan_in)`.
    pub fn init_uniform<R: Rng + ?Sized>(widths: Vec<usize>, dropout_rate: f64, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(widths, dropout_rate)?;
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.cols as f64).sqrt();
            for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *w = rng.random_range(-bound..=bound);
            }
        }
        Ok(net)
    }

    /// `g(z) = β·z`, no hidden layer and zero bias.
    pub fn linear(beta: &[f64]) -> Result<Self> {
        let layer = DenseLayer { rows: 1, cols: beta.len(), weights: beta.to_vec(), bias: vec![0.0] };
        Self::from_layers(vec![beta.len(), 1], vec![layer], 0.0)
    }

    pub fn hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn forward(&self, z: &[f64], mask: Option<&DropoutMask>) -> Result<f64> {
        if z.len() != self.input_dim() {
            return Err(Error::structural(format!(
                "network expects {} covariates, got {}",
                self.input_dim(),
                z.len()
            )));
        }
        if let Some(mask) = mask {
            mask.check(self)?;
        }
        Ok(self.forward_unchecked(z, mask))
    }

    pub(crate) fn forward_unchecked(&self, z: &[f64], mask: Option<&DropoutMask>) -> f64 {
        let scale = 1.0 / (1.0 - self.dropout_rate);
        let mut current = z.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (h, layer) in self.layers.iter().enumerate() {
            next.resize(layer.rows, 0.0);
            layer.apply(&current, &mut next);
            if h < last {
                for (i, a) in next.iter_mut().enumerate() {
                    *a = a.max(0.0);
                    if let Some(mask) = mask {
                        *a = if mask.keep[h][i] { *a * scale } else { 0.0 };
                    }
                }
            }
            std::mem::swap(&mut current, &mut next);
        }
        current[0]
    }
}

/// Per-hidden-unit keep flags for one training-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub keep: Vec<Vec<bool>>,
}

impl DropoutMask {
    /// Each hidden unit is kept independently with probability `1 - dropout_rate`.
    pub fn sample<R: Rng + ?Sized>(net: &CovariateNetwork, rng: &mut R) -> Self {
        let p = net.dropout_rate;
        let keep = net.widths[1..net.widths.len() - 1]
            .iter()
            .map(|&w| (0..w).map(|_| p == 0.0 || rng.random::<f64>() >= p).collect())
            .collect();
        Self { keep }
    }

    pub fn all(net: &CovariateNetwork, keep: bool) -> Self {
        let keep = net.widths[1..net.widths.len() - 1].iter().map(|&w| vec![keep; w]).collect();
        Self { keep }
    }

    fn check(&self, net: &CovariateNetwork) -> Result<()> {
        let hidden = &net.widths[1..net.widths.len() - 1];
        if self.keep.len() != hidden.len() || self.keep.iter().zip(hidden).any(|(k, &w)| k.len() != w) {
            return Err(Error::structural("dropout mask does not match hidden layer widths"));
        }
        Ok(())
    }
}
