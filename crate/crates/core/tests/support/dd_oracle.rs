//! Double-double re-evaluation of the training loss, used as a finite-difference
//! oracle whose rounding noise sits far below the step size.

#![allow(dead_code)]

use std::ops::{Add, Div, Mul, Neg, Sub};

use ictm::grad::{masks_from_seed, ParameterVector};
use ictm::likelihood::{Censoring, ObservedRecord, PROBABILITY_FLOOR};
use ictm::transform::TransformationSpec;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };
    const LN2: Dd = Dd { hi: std::f64::consts::LN_2, lo: 2.319_046_813_846_299_6e-17 };

    pub fn new(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    fn renorm(hi: f64, lo: f64) -> Self {
        let (hi, lo) = quick_two_sum(hi, lo);
        Dd { hi, lo }
    }

    fn scale2(self, k: i32) -> Self {
        let f = 2f64.powi(k);
        Dd { hi: self.hi * f, lo: self.lo * f }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn max0(self) -> Self {
        if self.hi > 0.0 {
            self
        } else {
            Dd::ZERO
        }
    }

    /// `exp(x) - 1`, accurate near zero.
    pub fn exp_m1(self) -> Self {
        if self.hi.abs() > 0.5 {
            return self.exp() - Dd::ONE;
        }
        self.reduced_exp_m1()
    }

    /// Taylor series on `x / 2^10`, then ten doublings of `exp_m1`.
    fn reduced_exp_m1(self) -> Self {
        let r = self.scale2(-10);
        let mut term = r;
        let mut sum = r;
        for n in 2..=14 {
            term = term * r / Dd::new(n as f64);
            sum = sum + term;
        }
        for _ in 0..10 {
            sum = sum * (sum + Dd::new(2.0));
        }
        sum
    }

    pub fn exp(self) -> Self {
        if self.hi < -700.0 {
            return Dd::ZERO;
        }
        let k = (self.hi / std::f64::consts::LN_2).round();
        let r = self - Dd::LN2 * Dd::new(k);
        (r.reduced_exp_m1() + Dd::ONE).scale2(k as i32)
    }

    pub fn ln(self) -> Self {
        assert!(self.hi > 0.0, "ln of non-positive double-double");
        let mut x = Dd::new(self.hi.ln());
        for _ in 0..2 {
            x = x + self * (-x).exp() - Dd::ONE;
        }
        x
    }

    /// `ln(1 + self)` for `self >= 0`.
    pub fn ln_1p(self) -> Self {
        if self.hi > 0.5 {
            return (Dd::ONE + self).ln();
        }
        let mut x = Dd::new(self.hi.ln_1p());
        for _ in 0..2 {
            let e = (-x).exp();
            x = x + (Dd::ONE + self) * e - Dd::ONE;
        }
        x
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, b: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, b.hi);
        let (t, f) = two_sum(self.lo, b.lo);
        let (s, e) = quick_two_sum(s, e + t);
        Dd::renorm(s, e + f)
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, b: Dd) -> Dd {
        self + (-b)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, b: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, b.hi);
        Dd::renorm(p, e + (self.hi * b.lo + self.lo * b.hi))
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, b: Dd) -> Dd {
        let q1 = self.hi / b.hi;
        let r = self - b * Dd::new(q1);
        let q2 = r.hi / b.hi;
        let r = r - b * Dd::new(q2);
        let q3 = r.hi / b.hi;
        let (q1, q2) = quick_two_sum(q1, q2);
        Dd { hi: q1, lo: q2 } + Dd::new(q3)
    }
}

fn transform(spec: &TransformationSpec, x: Dd) -> Dd {
    let r = spec.r();
    if r < 1e-12 {
        x
    } else {
        (Dd::new(r) * x).ln_1p() / Dd::new(r)
    }
}

/// Mean negative weighted log-likelihood at `params` with every coordinate
/// shifted by `shift` (a double-double), masks drawn exactly as the library does.
pub fn loss(
    params: &ParameterVector,
    shift: &[(usize, Dd)],
    batch: &[ObservedRecord],
    spec: &TransformationSpec,
    mask_seed: u64,
) -> Dd {
    let layout = &params.layout;
    let mut p: Vec<Dd> = params.values.iter().map(|&v| Dd::new(v)).collect();
    for &(k, d) in shift {
        p[k] = p[k] + d;
    }
    let model = params.to_model().unwrap();
    let masks = masks_from_seed(&model.net, batch.len(), mask_seed);
    let exp_eta: Vec<Dd> = p[layout.eta_range()].iter().map(|e| e.exp()).collect();
    let m = layout.m;
    let (c, u) = (layout.c, layout.u);
    let lambda = |t: f64| -> Dd {
        let x = (t.clamp(c, u) - c) / (u - c);
        let x = Dd::new(x);
        let y = Dd::ONE - x;
        let mut basis = vec![Dd::ZERO; m + 1];
        basis[0] = Dd::ONE;
        for j in 1..=m {
            let mut prev = Dd::ZERO;
            for b in basis.iter_mut().take(j + 1) {
                let cur = *b;
                *b = y * cur + x * prev;
                prev = cur;
            }
        }
        let mut acc = Dd::ZERO;
        let mut phi = Dd::ZERO;
        for (e, b) in exp_eta.iter().zip(&basis) {
            phi = phi + *e;
            acc = acc + phi * *b;
        }
        acc
    };
    let n_layers = layout.n_layers();
    let keep_scale = Dd::ONE / (Dd::ONE - Dd::new(layout.dropout_rate));
    let floor = Dd::new(PROBABILITY_FLOOR.ln());
    let mut total = Dd::ZERO;
    for (rec, mask) in batch.iter().zip(&masks) {
        let Some(z) = rec.z.as_ref().filter(|_| rec.observed) else { continue };
        let mut current: Vec<Dd> = z.iter().map(|&v| Dd::new(v)).collect();
        for h in 0..n_layers {
            let (rows, cols) = (layout.widths[h + 1], layout.widths[h]);
            let w = layout.weight_range(h).start;
            let b = layout.bias_range(h).start;
            let mut next = Vec::with_capacity(rows);
            for r in 0..rows {
                let mut a = p[b + r];
                for k in 0..cols {
                    a = a + p[w + r * cols + k] * current[k];
                }
                if h + 1 < n_layers {
                    a = if mask.keep[h][r] { a.max0() * keep_scale } else { Dd::ZERO };
                }
                next.push(a);
            }
            current = next;
        }
        let eg = current[0].exp();
        let big_g = |t: f64| transform(spec, lambda(t) * eg);
        let log_p = match rec.censoring() {
            Censoring::Right => -big_g(rec.l),
            Censoring::Left => (-(-big_g(rec.r)).exp_m1()).ln(),
            Censoring::Interval => {
                let (a_l, a_r) = (big_g(rec.l), big_g(rec.r));
                -a_l + (-(a_l - a_r).exp_m1()).ln()
            }
        };
        let log_p = if log_p.hi < floor.hi { floor } else { log_p };
        total = total + Dd::new(rec.weight) * log_p;
    }
    -(total / Dd::new(batch.len() as f64))
}

/// Central differences of [`loss`] with the step applied in double-double.
pub fn central_diff(
    params: &ParameterVector,
    batch: &[ObservedRecord],
    spec: &TransformationSpec,
    mask_seed: u64,
    h: f64,
) -> Vec<f64> {
    (0..params.values.len())
        .map(|k| {
            let up = loss(params, &[(k, Dd::new(h))], batch, spec, mask_seed);
            let down = loss(params, &[(k, Dd::new(-h))], batch, spec, mask_seed);
            ((up - down) / Dd::new(2.0 * h)).to_f64()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Dd, b: f64, tol: f64) -> bool {
        (a.to_f64() - b).abs() <= tol * b.abs().max(1e-300)
    }

    #[test]
    fn transcendental_round_trips() {
        for &v in &[-3.0, -0.7, 1e-6, 0.3, 0.7, 2.5, 17.0] {
            let x = Dd::new(v) / Dd::new(3.0);
            let back = x.exp().ln();
            assert!((back - x).hi.abs() <= 1e-30 * x.hi.abs().max(1.0), "{v}");
            assert!(close(x.exp(), (v / 3.0f64).exp(), 1e-15));
            let m1 = x.exp_m1();
            assert!(((m1 + Dd::ONE) - x.exp()).hi.abs() <= 1e-30 * x.exp().hi);
        }
        let tiny = Dd::new(1e-9);
        assert!(close(tiny.ln_1p(), 1e-9 - 5e-19, 1e-20));
    }
}
