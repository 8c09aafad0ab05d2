//! Large-sample limits of the stage-2 coefficients.
//!
//! For the linear family every proxy used here is an affine function of the
//! subject mean, `P = a (W̄ - gamma0)` or `P = W̄`, so the probability limit
//! of the OLS fit of `Y` on `(1, P, C)` follows from exact second moments.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::lme::BlupSource;
use crate::model::{Family, Method, Scenario};
use crate::sim::generate_dataset;
use crate::two_stage::{estimate, PipelineSpec, TwoStageFit};

/// Second moments needed by the population normal equations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PopulationMoments {
    pub var_proxy: f64,
    pub cov_proxy_x: f64,
    pub cov_proxy_c: f64,
    pub var_c: f64,
    pub cov_y_proxy: f64,
    pub cov_y_c: f64,
    /// Means of the proxy, C and Y; used for the intercept limit.
    pub mean_proxy: f64,
    pub mean_c: f64,
    pub mean_y: f64,
}

/// Probability limits of `(beta0, beta_x, beta_c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PopulationLimit {
    pub beta0: f64,
    pub beta_x: f64,
    pub beta_c: f64,
}

impl PopulationLimit {
    pub fn as_array(&self) -> [f64; 3] {
        [self.beta0, self.beta_x, self.beta_c]
    }
}

impl PopulationMoments {
    /// Moments for the proxy `scale * (W̄ - gamma0) + offset` on balanced data.
    fn for_affine_proxy(s: &Scenario, scale: f64, offset: f64) -> Self {
        let sxc = s.rho_xc * s.sigma_x * s.sigma_c;
        let var_c = s.sigma_c * s.sigma_c;
        let cov_proxy_x = scale * s.gamma1 * s.sigma_x * s.sigma_x;
        let cov_proxy_c = scale * s.gamma1 * sxc;
        PopulationMoments {
            var_proxy: scale * scale * s.var_subject_mean(s.j),
            cov_proxy_x,
            cov_proxy_c,
            var_c,
            cov_y_proxy: s.beta_x * cov_proxy_x + s.beta_c * cov_proxy_c,
            cov_y_c: s.beta_x * sxc + s.beta_c * var_c,
            mean_proxy: scale * s.gamma1 * s.mu_x + offset,
            mean_c: s.mu_c,
            mean_y: s.beta0 + s.beta_x * s.mu_x + s.beta_c * s.mu_c,
        }
    }

    /// Solves the 2x2 population normal equations by Cramer's rule.
    pub fn solve(&self) -> Result<PopulationLimit> {
        let det = self.var_proxy * self.var_c - self.cov_proxy_c * self.cov_proxy_c;
        if !(det > 0.0) || !(self.var_proxy > 0.0) {
            return Err(Error::Degenerate(
                "population Gram matrix of (proxy, C) is not positive definite".into(),
            ));
        }
        let beta_x = (self.cov_y_proxy * self.var_c - self.cov_proxy_c * self.cov_y_c) / det;
        let beta_c = (self.var_proxy * self.cov_y_c - self.cov_proxy_c * self.cov_y_proxy) / det;
        let beta0 = self.mean_y - beta_x * self.mean_proxy - beta_c * self.mean_c;
        Ok(PopulationLimit { beta0, beta_x, beta_c })
    }
}

fn require_linear(s: &Scenario) -> Result<()> {
    s.validate()?;
    if s.family != Family::Linear {
        return Err(Error::Unsupported(
            "closed-form limits exist for the linear family only; use brute_force_limit".into(),
        ));
    }
    Ok(())
}

/// Limits of all three coefficients for the naive subject-mean proxy.
pub fn naive_limits(s: &Scenario) -> Result<PopulationLimit> {
    require_linear(s)?;
    PopulationMoments::for_affine_proxy(s, 1.0, s.gamma0).solve()
}

/// Limit of the naive slope, `beta_x gamma1 sigma_x^2 / Var(W̄)` when `rho_xc = 0`.
pub fn naive_slope_limit(s: &Scenario) -> Result<f64> {
    require_linear(s)?;
    if s.rho_xc == 0.0 {
        return Ok(s.beta_x * s.gamma1 * s.sigma_x * s.sigma_x / s.var_subject_mean(s.j));
    }
    Ok(naive_limits(s)?.beta_x)
}

/// Shrinkage applied to `W̄ - gamma0` by each BLUP variant, balanced data.
pub fn blup_shrinkage(s: &Scenario, source: BlupSource) -> f64 {
    let var_mean = s.var_subject_mean(s.j);
    match source {
        BlupSource::Oracle => s.gamma1 * s.gamma1 * s.sigma_x * s.sigma_x / var_mean,
        // REML converges to (v_b, v_w); tau2 / (tau2 + sigma2 / J) = v_b / Var(W̄).
        BlupSource::Empirical => {
            let v_b = s.gamma1 * s.gamma1 * s.sigma_x * s.sigma_x + s.rho * s.sigma_u * s.sigma_u;
            v_b / var_mean
        }
    }
}

/// Limits of all three coefficients for the rescaled BLUP proxy.
pub fn blup_limits(s: &Scenario, source: BlupSource) -> Result<PopulationLimit> {
    require_linear(s)?;
    if s.gamma1 == 0.0 {
        return Err(Error::Unidentifiable("gamma1 = 0 leaves the exposure unidentified".into()));
    }
    let k = blup_shrinkage(s, source);
    // The proxy is centered at the true (oracle) or estimated grand mean.
    let offset = match source {
        BlupSource::Oracle => 0.0,
        BlupSource::Empirical => -k * s.mu_x,
    };
    PopulationMoments::for_affine_proxy(s, k / s.gamma1, offset).solve()
}

/// Limits of `(beta_x, beta_c)` for the BLUP-corrected estimator.
pub fn blup_slope_limit(s: &Scenario, source: BlupSource) -> Result<(f64, f64)> {
    require_linear(s)?;
    if s.rho_xc == 0.0 && source == BlupSource::Oracle {
        return Ok((s.beta_x, s.beta_c));
    }
    let lim = blup_limits(s, source)?;
    Ok((lim.beta_x, lim.beta_c))
}

/// Probability limit by simulation: one replication with `n` subjects.
///
/// A BLUP method with no `vc_override` receives the scenario's generating
/// parameters.
pub fn brute_force_limit(s: &Scenario, spec: &PipelineSpec, n: usize) -> Result<TwoStageFit> {
    let big = Scenario {
        n,
        seed: s.seed ^ 0x5EED_0F_B16,
        ..s.clone()
    };
    let mut spec = spec.clone();
    if spec.method == Method::BlupOracle && spec.vc_override.is_none() {
        spec.vc_override = Some(s.variance_components()?);
    }
    let data = generate_dataset(&big, 0)?;
    estimate(&data.panel, &data.outcomes, &spec)
}
