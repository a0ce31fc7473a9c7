//! Shapley attribution of the covariate network with an interventional value
//! function: features outside a coalition are filled from background rows.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::ObservedRecord;
use crate::streams::stream;
use crate::transform::CovariateNetwork;

/// Largest feature count handled by exact enumeration.
pub const MAX_EXACT_FEATURES: usize = 12;
/// Minimum sample count for choosing a dependence partner.
pub const MIN_DEPENDENCE_SAMPLES: usize = 20;
const DEPENDENCE_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub base: f64,
    /// `phi[i][j]`: contribution of feature `j` to sample `i`.
    pub phi: Vec<Vec<f64>>,
    /// Network output per sample.
    pub predictions: Vec<f64>,
    pub feature_names: Vec<String>,
}

fn check_background(net: &CovariateNetwork, background: &[Vec<f64>]) -> Result<()> {
    if background.is_empty() {
        return Err(Error::domain("background set is empty"));
    }
    let p = net.input_dim();
    if let Some(row) = background.iter().find(|b| b.len() != p) {
        return Err(Error::domain(format!("background row has {} features, network expects {p}", row.len())));
    }
    Ok(())
}

/// Mean network output over the background rows.
pub fn shap_base(net: &CovariateNetwork, background: &[Vec<f64>]) -> Result<f64> {
    check_background(net, background)?;
    let mut sum = 0.0;
    for b in background {
        sum += net.forward(b, None)?;
    }
    Ok(sum / background.len() as f64)
}

/// `v(S)`: mean over background rows of the network with features in `mask`
/// taken from `z`.
fn coalition_value(net: &CovariateNetwork, z: &[f64], background: &[Vec<f64>], mask: u64, buf: &mut Vec<f64>) -> Result<f64> {
    let mut sum = 0.0;
    for b in background {
        buf.clear();
        buf.extend((0..z.len()).map(|j| if mask >> j & 1 == 1 { z[j] } else { b[j] }));
        sum += net.forward(buf, None)?;
    }
    Ok(sum / background.len() as f64)
}

fn factorials(p: usize) -> Vec<f64> {
    let mut f = vec![1.0; p + 1];
    for k in 1..=p {
        f[k] = f[k - 1] * k as f64;
    }
    f
}

/// Exact Shapley values by enumerating all coalitions (`p ≤ 12`).
pub fn shap_exact(net: &CovariateNetwork, z: &[f64], background: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_background(net, background)?;
    let p = z.len();
    if p != net.input_dim() {
        return Err(Error::domain(format!("sample has {p} features, network expects {}", net.input_dim())));
    }
    if p > MAX_EXACT_FEATURES {
        return Err(Error::domain(format!("exact enumeration supports at most {MAX_EXACT_FEATURES} features; use sampling")));
    }
    let mut buf = Vec::with_capacity(p);
    let values: Vec<f64> = (0..1u64 << p)
        .map(|mask| coalition_value(net, z, background, mask, &mut buf))
        .collect::<Result<_>>()?;
    let fact = factorials(p);
    let mut phi = vec![0.0; p];
    for (j, out) in phi.iter_mut().enumerate() {
        let bit = 1u64 << j;
        for mask in (0..1u64 << p).filter(|m| m & bit == 0) {
            let s = mask.count_ones() as usize;
            let w = fact[s] * fact[p - s - 1] / fact[p];
            *out += w * (values[(mask | bit) as usize] - values[mask as usize]);
        }
    }
    Ok(phi)
}

/// Average marginal contribution over the given feature orderings.
pub fn shap_permutations(
    net: &CovariateNetwork,
    z: &[f64],
    background: &[Vec<f64>],
    orders: &[Vec<usize>],
) -> Result<Vec<f64>> {
    check_background(net, background)?;
    let p = z.len();
    if orders.is_empty() {
        return Err(Error::domain("at least one permutation is required"));
    }
    let mut cache: HashMap<u64, f64> = HashMap::new();
    let mut buf = Vec::with_capacity(p);
    let mut value = |mask: u64, buf: &mut Vec<f64>| -> Result<f64> {
        if let Some(&v) = cache.get(&mask) {
            return Ok(v);
        }
        let v = coalition_value(net, z, background, mask, buf)?;
        cache.insert(mask, v);
        Ok(v)
    };
    let mut phi = vec![0.0; p];
    for order in orders {
        if order.len() != p {
            return Err(Error::domain("permutation length differs from the feature count"));
        }
        let mut mask = 0u64;
        let mut prev = value(mask, &mut buf)?;
        for &j in order {
            mask |= 1u64 << j;
            let next = value(mask, &mut buf)?;
            phi[j] += next - prev;
            prev = next;
        }
    }
    let n = orders.len() as f64;
    phi.iter_mut().for_each(|v| *v /= n);
    Ok(phi)
}

/// Permutation-sampling estimate of the Shapley values.
pub fn shap_sampled<R: Rng + ?Sized>(
    net: &CovariateNetwork,
    z: &[f64],
    background: &[Vec<f64>],
    n_permutations: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if z.len() > 63 {
        return Err(Error::domain("at most 63 features are supported"));
    }
    let orders: Vec<Vec<usize>> = (0..n_permutations)
        .map(|_| {
            let mut o: Vec<usize> = (0..z.len()).collect();
            o.shuffle(rng);
            o
        })
        .collect();
    shap_permutations(net, z, background, &orders)
}

/// Exact attributions for every sample.
pub fn explain(
    net: &CovariateNetwork,
    samples: &[Vec<f64>],
    background: &[Vec<f64>],
    feature_names: Vec<String>,
) -> Result<AttributionResult> {
    let base = shap_base(net, background)?;
    if feature_names.len() != net.input_dim() {
        return Err(Error::domain("one feature name per network input is required"));
    }
    let phi: Vec<Vec<f64>> = samples.par_iter().map(|z| shap_exact(net, z, background)).collect::<Result<_>>()?;
    let predictions = samples.iter().map(|z| net.forward(z, None)).collect::<Result<_>>()?;
    Ok(AttributionResult { base, phi, predictions, feature_names })
}

/// Features ranked by mean absolute attribution; ties keep index order.
pub fn shap_summary(result: &AttributionResult) -> Vec<(usize, String, f64)> {
    let n = result.phi.len().max(1) as f64;
    let mut rows: Vec<(usize, String, f64)> = result
        .feature_names
        .iter()
        .enumerate()
        .map(|(j, name)| (j, name.clone(), result.phi.iter().map(|row| row[j].abs()).sum::<f64>() / n))
        .collect();
    rows.sort_by(|a, b| b.2.total_cmp(&a.2));
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependenceRow {
    pub value: f64,
    pub phi: f64,
    pub partner_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependenceTable {
    pub feature: usize,
    pub partner: Option<usize>,
    /// Interaction statistic per candidate partner (`NaN` for `feature` itself).
    pub scores: Vec<f64>,
    pub rows: Vec<DependenceRow>,
}

/// Variance across `z_j` deciles of `mean(φ_j | z_k ≥ mean z_k) - mean(φ_j | z_k < mean z_k)`.
fn partner_score(values: &[f64], phi: &[f64], partner: &[f64]) -> f64 {
    let n = values.len();
    let threshold = partner.iter().sum::<f64>() / n as f64;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut contrasts = Vec::new();
    for bin in 0..DEPENDENCE_BINS {
        let members = &order[bin * n / DEPENDENCE_BINS..(bin + 1) * n / DEPENDENCE_BINS];
        let (mut hi, mut lo) = ((0.0, 0usize), (0.0, 0usize));
        for &i in members {
            let side = if partner[i] >= threshold { &mut hi } else { &mut lo };
            side.0 += phi[i];
            side.1 += 1;
        }
        if hi.1 > 0 && lo.1 > 0 {
            contrasts.push(hi.0 / hi.1 as f64 - lo.0 / lo.1 as f64);
        }
    }
    if contrasts.len() < 2 {
        return 0.0;
    }
    let m = contrasts.iter().sum::<f64>() / contrasts.len() as f64;
    contrasts.iter().map(|c| (c - m).powi(2)).sum::<f64>() / contrasts.len() as f64
}

/// Per-sample `(z_j, φ_j)` with the strongest interaction partner's value.
pub fn shap_dependence(result: &AttributionResult, covariates: &[Vec<f64>], feature: usize) -> Result<DependenceTable> {
    let p = result.feature_names.len();
    if feature >= p {
        return Err(Error::domain(format!("feature {feature} out of range")));
    }
    if covariates.len() != result.phi.len() {
        return Err(Error::domain("covariate rows must match attribution rows"));
    }
    let values: Vec<f64> = covariates.iter().map(|z| z[feature]).collect();
    let phi: Vec<f64> = result.phi.iter().map(|row| row[feature]).collect();
    let mut scores = vec![f64::NAN; p];
    let mut partner = None;
    if covariates.len() >= MIN_DEPENDENCE_SAMPLES {
        let mut best = f64::NEG_INFINITY;
        for k in (0..p).filter(|&k| k != feature) {
            let col: Vec<f64> = covariates.iter().map(|z| z[k]).collect();
            scores[k] = partner_score(&values, &phi, &col);
            if scores[k] > best {
                best = scores[k];
                partner = Some(k);
            }
        }
    }
    let rows = covariates
        .iter()
        .zip(&phi)
        .map(|(z, &ph)| DependenceRow { value: z[feature], phi: ph, partner_value: partner.map(|k| z[k]) })
        .collect();
    Ok(DependenceTable { feature, partner, scores, rows })
}

/// Background rows drawn without replacement with the case fraction of
/// `records` (observed records only).
pub fn stratified_background(records: &[ObservedRecord], size: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let observed: Vec<&ObservedRecord> = records.iter().filter(|r| r.observed && r.z.is_some()).collect();
    if observed.is_empty() || size == 0 {
        return Err(Error::domain("background needs observed records and a positive size"));
    }
    let size = size.min(observed.len());
    let (mut cases, mut others): (Vec<&ObservedRecord>, Vec<&ObservedRecord>) = observed.iter().partition(|r| r.is_case());
    let target = (size as f64 * cases.len() as f64 / observed.len() as f64).round() as usize;
    let n_cases = target.min(cases.len()).max(size.saturating_sub(others.len()));
    let mut rng = stream(seed, 0);
    cases.shuffle(&mut rng);
    others.shuffle(&mut rng);
    Ok(cases
        .into_iter()
        .take(n_cases)
        .chain(others.into_iter().take(size - n_cases))
        .map(|r| r.z.clone().expect("filtered"))
        .collect())
}
