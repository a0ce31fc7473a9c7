//! Fifty seeded random configurations for the gradient check.

#![allow(dead_code)]

use std::time::{Duration, Instant};

use ictm::grad::{finite_diff_grad, loss_and_grad, Model};
use ictm::likelihood::ObservedRecord;
use ictm::transform::{BernsteinHazard, CovariateNetwork, TransformationSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dd_oracle;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-5;
pub const CONFIGS: u64 = 50;

pub struct Case {
    pub model: Model,
    pub batch: Vec<ObservedRecord>,
    pub spec: TransformationSpec,
    pub mask_seed: u64,
}

fn record(rng: &mut ChaCha8Rng, p: usize, u: f64) -> ObservedRecord {
    let z: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..2.0)).collect();
    let a = rng.random_range(0.05..0.9) * u;
    let b = (a + rng.random_range(0.05..0.5) * u).min(u);
    let weight = [1.0, 5.0, 2.5][rng.random_range(0..3)];
    let rec = match rng.random_range(0..3) {
        0 => ObservedRecord::complete(0.0, a, true, false, z),
        1 => ObservedRecord::complete(a, b, false, true, z),
        _ => ObservedRecord::complete(a, f64::INFINITY, false, false, z),
    };
    ObservedRecord { weight, ..rec.unwrap() }
}

pub fn case(index: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE + index);
    let m = [3, 5][rng.random_range(0..2)];
    let hidden = rng.random_range(1..=2);
    let p = rng.random_range(1..=5);
    let mut widths = vec![p];
    widths.extend((0..hidden).map(|_| rng.random_range(2..=8)));
    widths.push(1);
    let dropout = [0.0, 0.2][rng.random_range(0..2)];
    let u = rng.random_range(1.0..6.0);
    let eta = (0..=m).map(|_| rng.random_range(-3.0..0.0)).collect();
    let model = Model {
        hazard: BernsteinHazard::new(m, 0.0, u, eta).unwrap(),
        net: CovariateNetwork::init_uniform(widths, dropout, &mut rng).unwrap(),
    };
    let n = rng.random_range(1..=16);
    let batch = (0..n).map(|_| record(&mut rng, p, u)).collect();
    let spec = TransformationSpec::new([0.0, 0.5, 1.0, 2.0][rng.random_range(0..4)]).unwrap();
    Case { model, batch, spec, mask_seed: rng.random() }
}

pub struct SuiteReport {
    pub coordinates: usize,
    pub worst: f64,
    pub failures: Vec<String>,
    /// Same comparison against plain f64 central differences.
    pub worst_f64: f64,
    pub failures_f64: usize,
    pub elapsed: Duration,
}

fn rel(a: f64, f: f64) -> f64 {
    (a - f).abs() / (f.abs() + 1e-8)
}

pub fn run() -> SuiteReport {
    let start = Instant::now();
    let mut report = SuiteReport {
        coordinates: 0,
        worst: 0.0,
        failures: Vec::new(),
        worst_f64: 0.0,
        failures_f64: 0,
        elapsed: Duration::ZERO,
    };
    for i in 0..CONFIGS {
        let c = case(i);
        let params = c.model.flatten();
        let (_, analytic) = loss_and_grad(&params, &c.batch, &c.spec, c.mask_seed).unwrap();
        let fd = dd_oracle::central_diff(&params, &c.batch, &c.spec, c.mask_seed, STEP);
        let fd64 = finite_diff_grad(&params, &c.batch, &c.spec, c.mask_seed, STEP).unwrap();
        for (k, ((a, f), f64_fd)) in analytic.values.iter().zip(&fd).zip(&fd64.values).enumerate() {
            report.coordinates += 1;
            let e = rel(*a, *f);
            report.worst = report.worst.max(e);
            if !(e <= TOL) {
                report.failures.push(format!("config {i}, coordinate {k}: analytic {a:e}, differences {f:e}"));
            }
            let e64 = rel(*a, *f64_fd);
            report.worst_f64 = report.worst_f64.max(e64);
            if !(e64 <= TOL) {
                report.failures_f64 += 1;
            }
        }
    }
    report.elapsed = start.elapsed();
    report
}
