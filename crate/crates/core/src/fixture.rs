//! Synthetic two-device cohort with planted summary statistics.
//!
//! Both devices measure the same latent daily sedentary time. After
//! generation, device A is rescaled and device B receives per-subject shifts
//! so that the subject-level means reproduce the requested marginals and
//! Pearson correlation exactly.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::agreement::pearson;
use crate::error::{Error, Result};
use crate::model::{OutcomePanel, ReplicatePanel};
use crate::stats::{mean, sample_sd};

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceParams {
    /// Target mean of subject-level daily means.
    pub mean: f64,
    /// Target SD of subject-level daily means.
    pub sd: f64,
    pub gamma1: f64,
    pub sigma_u: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureParams {
    pub n: usize,
    pub days: usize,
    pub min_days: usize,
    /// Per-day probability of a non-wear day, applied above `min_days`.
    pub p_miss: f64,
    pub sigma_x: f64,
    pub device_a: DeviceParams,
    pub device_b: DeviceParams,
    pub target_r: f64,
    pub bmi_intercept: f64,
    /// Outcome change per unit of latent exposure.
    pub beta_x: f64,
    pub beta_age: f64,
    pub beta_female: f64,
    pub sigma_eps: f64,
    pub seed: u64,
}

impl Default for FixtureParams {
    /// Sedentary minutes per day for 980 subjects; outcome is BMI rising
    /// 0.8 units per hour of latent sitting time.
    fn default() -> Self {
        FixtureParams {
            n: 980,
            days: 7,
            min_days: 5,
            p_miss: 0.1,
            sigma_x: 100.0,
            device_a: DeviceParams {
                mean: 598.6,
                sd: 120.5,
                gamma1: 1.0,
                sigma_u: 19_776f64.sqrt(),
                rho: 0.1,
            },
            device_b: DeviceParams {
                mean: 654.9,
                sd: 97.6,
                gamma1: 0.75,
                sigma_u: 16_900f64.sqrt(),
                rho: 0.1,
            },
            target_r: 0.64,
            bmi_intercept: 28.0,
            beta_x: 0.8 / 60.0,
            beta_age: 0.05,
            beta_female: 0.5,
            sigma_eps: 4.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoDeviceFixture {
    pub device_a: ReplicatePanel,
    pub device_b: ReplicatePanel,
    /// BMI outcome with covariates `age`, `female`.
    pub bmi: OutcomePanel,
    /// Obesity indicator (`BMI >= 30`) with the same covariates.
    pub obese: OutcomePanel,
    pub latent: DVector<f64>,
}

fn simulate_device(
    rng: &mut ChaCha12Rng,
    x: &DVector<f64>,
    d: &DeviceParams,
    observed: &DMatrix<bool>,
) -> DMatrix<f64> {
    let (n, j) = observed.shape();
    let (shared, own) = (d.rho.sqrt(), (1.0 - d.rho).sqrt());
    let mut values = DMatrix::zeros(n, j);
    for i in 0..n {
        let subject_factor: f64 = rng.sample(StandardNormal);
        for r in 0..j {
            let z: f64 = rng.sample(StandardNormal);
            values[(i, r)] = d.gamma1 * x[i] + d.sigma_u * (shared * subject_factor + own * z);
        }
    }
    values
}

fn subject_means(values: &DMatrix<f64>, observed: &DMatrix<bool>) -> Vec<f64> {
    (0..values.nrows())
        .map(|i| {
            let (s, c) = (0..values.ncols())
                .filter(|&r| observed[(i, r)])
                .fold((0.0, 0.0), |(s, c), r| (s + values[(i, r)], c + 1.0));
            s / c
        })
        .collect()
}

fn standardize(xs: &[f64]) -> Vec<f64> {
    let (m, s) = (mean(xs), sample_sd(xs));
    xs.iter().map(|x| (x - m) / s).collect()
}

pub fn two_device_fixture(p: &FixtureParams) -> Result<TwoDeviceFixture> {
    if !(p.target_r > -1.0 && p.target_r < 1.0) {
        return Err(Error::invalid("target_r", "must lie in (-1, 1)"));
    }
    if p.min_days == 0 || p.min_days > p.days || p.n < 3 {
        return Err(Error::invalid("min_days", "need 1 <= min_days <= days and n >= 3"));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(p.seed);
    let (n, j) = (p.n, p.days);
    let x = DVector::from_fn(n, |_, _| p.sigma_x * rng.sample::<f64, _>(StandardNormal));

    let mut observed = DMatrix::from_element(n, j, true);
    for i in 0..n {
        for r in p.min_days..j {
            observed[(i, r)] = rng.random::<f64>() >= p.p_miss;
        }
    }

    let mut a = simulate_device(&mut rng, &x, &p.device_a, &observed);
    let mut b = simulate_device(&mut rng, &x, &p.device_b, &observed);

    // Device A: affine map to the target mean and SD of subject means.
    let abar = subject_means(&a, &observed);
    let (ma, sa) = (mean(&abar), sample_sd(&abar));
    let scale = p.device_a.sd / sa;
    a.apply(|v| *v = p.device_a.mean + scale * (*v - ma));

    // Device B: per-subject shift onto an exact-correlation target.
    let za = standardize(&subject_means(&a, &observed));
    let bbar = subject_means(&b, &observed);
    let zb = standardize(&bbar);
    let r0 = pearson(&za, &zb);
    let perp = standardize(&zb.iter().zip(&za).map(|(b, a)| b - r0 * a).collect::<Vec<_>>());
    let cross = (1.0 - p.target_r * p.target_r).sqrt();
    for i in 0..n {
        let target = p.device_b.mean + p.device_b.sd * (p.target_r * za[i] + cross * perp[i]);
        let shift = target - bbar[i];
        for r in 0..j {
            b[(i, r)] += shift;
        }
    }

    let ids: Vec<String> = (0..n).map(|i| format!("P{:04}", i + 1)).collect();
    let mut cov = DMatrix::zeros(n, 2);
    let mut bmi = DVector::zeros(n);
    for i in 0..n {
        let age = 50.0 + 10.0 * rng.sample::<f64, _>(StandardNormal);
        let female = if rng.random::<f64>() < 0.6 { 1.0 } else { 0.0 };
        cov[(i, 0)] = age;
        cov[(i, 1)] = female;
        bmi[i] = p.bmi_intercept
            + p.beta_x * x[i]
            + p.beta_age * (age - 50.0)
            + p.beta_female * female
            + p.sigma_eps * rng.sample::<f64, _>(StandardNormal);
    }
    let names = vec!["age".to_string(), "female".to_string()];
    let obese = bmi.map(|v| if v >= 30.0 { 1.0 } else { 0.0 });
    Ok(TwoDeviceFixture {
        device_a: ReplicatePanel::new(ids.clone(), a, observed.clone(), None)?,
        device_b: ReplicatePanel::new(ids.clone(), b, observed, None)?,
        bmi: OutcomePanel::new(ids.clone(), bmi, cov.clone(), names.clone())?,
        obese: OutcomePanel::new(ids, obese, cov, names)?,
        latent: x,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_statistics_are_exact() {
        let f = two_device_fixture(&FixtureParams::default()).unwrap();
        let a: Vec<f64> = f.device_a.subject_means().iter().copied().collect();
        let b: Vec<f64> = f.device_b.subject_means().iter().copied().collect();
        assert!((mean(&a) - 598.6).abs() < 1e-9);
        assert!((sample_sd(&a) - 120.5).abs() < 1e-9);
        assert!((mean(&b) - 654.9).abs() < 1e-9);
        assert!((sample_sd(&b) - 97.6).abs() < 1e-9);
        assert!((pearson(&a, &b) - 0.64).abs() < 1e-9);
        assert!((0..f.device_a.n_subjects()).all(|i| f.device_a.observed_count(i) >= 5));
    }
}
