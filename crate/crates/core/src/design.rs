//! Two-phase sampling from a fully observed cohort: the (generalized)
//! case-cohort design and the subcohort-only and simple-random-sample
//! comparators.

use rand::Rng;

use crate::error::{Error, Result};
use crate::likelihood::{ipw_weight, ObservedRecord};
use crate::streams::stream;

#[derive(Debug, Clone, PartialEq)]
pub struct CaseCohortSample {
    /// One record per cohort subject; unobserved subjects have no covariates and zero weight.
    pub records: Vec<ObservedRecord>,
    /// Subcohort membership.
    pub zeta: Vec<bool>,
    /// Selected into the case subset (only cases outside the subcohort).
    pub xi: Vec<bool>,
    pub p_s: f64,
    pub p_c: f64,
}

impl CaseCohortSample {
    /// Records with covariates, in cohort order.
    pub fn observed(&self) -> Vec<ObservedRecord> {
        self.records.iter().filter(|r| r.observed).cloned().collect()
    }

    pub fn observed_count(&self) -> usize {
        self.records.iter().filter(|r| r.observed).count()
    }
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::config(format!("{name} must lie in (0, 1], got {p}")));
    }
    Ok(())
}

/// Bernoulli(`p_s`) subcohort, then Bernoulli(`p_c`) selection among cases
/// outside it. Subject `i` draws from stream `i` under `seed`.
pub fn draw_case_cohort(cohort: &[ObservedRecord], p_s: f64, p_c: f64, seed: u64) -> Result<CaseCohortSample> {
    check_probability("p_s", p_s)?;
    check_probability("p_c", p_c)?;
    if cohort.is_empty() {
        return Err(Error::config("cannot sample from an empty cohort"));
    }
    let n = cohort.len();
    let mut records = Vec::with_capacity(n);
    let mut zeta = Vec::with_capacity(n);
    let mut xi = Vec::with_capacity(n);
    for (i, rec) in cohort.iter().enumerate() {
        let z = rec
            .z
            .clone()
            .ok_or_else(|| Error::config(format!("cohort subject {i} has no covariates")))?;
        let mut rng = stream(seed, i as u64);
        let in_sub = rng.random::<f64>() < p_s;
        let selected = rec.is_case() && !in_sub && rng.random::<f64>() < p_c;
        let observed = in_sub || selected;
        let weight = ipw_weight(rec.delta_l, rec.delta_i, observed, p_s, p_c)?;
        records.push(ObservedRecord {
            z: observed.then_some(z),
            observed,
            weight,
            ..rec.clone()
        });
        zeta.push(in_sub);
        xi.push(selected);
    }
    Ok(CaseCohortSample { records, zeta, xi, p_s, p_c })
}

/// Subcohort members only, unweighted.
pub fn subcohort_only(sample: &CaseCohortSample) -> Vec<ObservedRecord> {
    sample
        .records
        .iter()
        .zip(&sample.zeta)
        .filter(|(_, &z)| z)
        .map(|(r, _)| ObservedRecord { weight: 1.0, ..r.clone() })
        .collect()
}

/// Uniform sample of `size` subjects without replacement, unit weights,
/// returned in cohort order.
pub fn draw_srs(cohort: &[ObservedRecord], size: usize, seed: u64) -> Result<Vec<ObservedRecord>> {
    if size > cohort.len() {
        return Err(Error::config(format!(
            "simple random sample of {size} requested from a cohort of {}",
            cohort.len()
        )));
    }
    let mut rng = stream(seed, 0);
    let mut idx = rand::seq::index::sample(&mut rng, cohort.len(), size).into_vec();
    idx.sort_unstable();
    Ok(idx
        .into_iter()
        .map(|i| ObservedRecord { weight: 1.0, observed: true, ..cohort[i].clone() })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_cohort(n: usize) -> Vec<ObservedRecord> {
        (0..n)
            .map(|i| match i % 5 {
                0 => ObservedRecord::complete(0.0, 1.0, true, false, vec![i as f64]).unwrap(),
                1 => ObservedRecord::complete(1.0, 2.0, false, true, vec![i as f64]).unwrap(),
                _ => ObservedRecord::complete(3.0, f64::INFINITY, false, false, vec![i as f64]).unwrap(),
            })
            .collect()
    }

    #[test]
    fn full_cohort_when_everyone_is_in_the_subcohort() {
        let cohort = toy_cohort(50);
        let s = draw_case_cohort(&cohort, 1.0, 0.3, 1).unwrap();
        assert!(s.records.iter().all(|r| r.observed && r.weight == 1.0));
        assert_eq!(subcohort_only(&s), cohort);
        assert!(s.xi.iter().all(|x| !x));
    }

    #[test]
    fn case_cohort_keeps_all_cases() {
        let cohort = toy_cohort(500);
        let s = draw_case_cohort(&cohort, 0.2, 1.0, 2).unwrap();
        for (rec, (&z, &x)) in s.records.iter().zip(s.zeta.iter().zip(&s.xi)) {
            if rec.is_case() {
                assert!(rec.observed);
                assert_eq!(rec.weight, 1.0);
            } else {
                assert!(!x);
                assert_eq!(rec.observed, z);
            }
        }
    }

    #[test]
    fn sample_invariants() {
        let cohort = toy_cohort(2000);
        let s = draw_case_cohort(&cohort, 0.2, 0.5, 3).unwrap();
        for (i, rec) in s.records.iter().enumerate() {
            assert_eq!(rec.observed, s.zeta[i] || (rec.is_case() && s.xi[i]));
            if s.xi[i] {
                assert!(rec.is_case() && !s.zeta[i]);
            }
            let w = ipw_weight(rec.delta_l, rec.delta_i, rec.observed, 0.2, 0.5).unwrap();
            assert_eq!(rec.weight, w);
            assert_eq!(rec.z.is_some(), rec.observed);
            rec.validate().unwrap();
        }
        assert_eq!(draw_case_cohort(&cohort, 0.2, 0.5, 3).unwrap(), s);
    }

    #[test]
    fn subcohort_fraction_matches_p_s() {
        let cohort = toy_cohort(100_000);
        let s = draw_case_cohort(&cohort, 0.2, 1.0, 4).unwrap();
        let frac = s.zeta.iter().filter(|&&z| z).count() as f64 / 1e5;
        assert!((frac - 0.2).abs() <= 0.01, "{frac}");
        // Expected size p_s n within four binomial standard deviations.
        let sd = (1e5f64 * 0.2 * 0.8).sqrt();
        assert!((subcohort_only(&s).len() as f64 - 2e4).abs() <= 4.0 * sd);
    }

    #[test]
    fn subcohort_filter() {
        let cohort = toy_cohort(3);
        let mut s = draw_case_cohort(&cohort, 1.0, 1.0, 0).unwrap();
        s.zeta = vec![true, false, true];
        let sub = subcohort_only(&s);
        assert_eq!(sub.len(), 2);
        assert_eq!(sub[0].z, Some(vec![0.0]));
        assert_eq!(sub[1].z, Some(vec![2.0]));
    }

    #[test]
    fn config_errors() {
        assert!(draw_case_cohort(&[], 0.2, 1.0, 0).is_err());
        assert!(draw_case_cohort(&toy_cohort(3), 0.0, 1.0, 0).is_err());
        assert!(draw_case_cohort(&toy_cohort(3), 0.2, 1.2, 0).is_err());
        assert!(draw_srs(&toy_cohort(3), 4, 0).is_err());
    }

    #[test]
    fn srs_edge_sizes() {
        let cohort = toy_cohort(20);
        assert_eq!(draw_srs(&cohort, 20, 5).unwrap(), cohort);
        assert!(draw_srs(&cohort, 0, 5).unwrap().is_empty());
    }

    #[test]
    fn srs_inclusion_frequency() {
        let cohort = toy_cohort(50);
        let (size, draws) = (10usize, 10_000u64);
        let mut hits = vec![0u32; 50];
        for seed in 0..draws {
            for rec in draw_srs(&cohort, size, seed).unwrap() {
                hits[rec.z.unwrap()[0] as usize] += 1;
            }
        }
        let p = size as f64 / 50.0;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for h in hits {
            assert!((h as f64 - draws as f64 * p).abs() <= 3.0 * sd, "{h}");
        }
    }
}
