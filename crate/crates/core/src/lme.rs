//! Stage 1: random-intercept fit of the replicate model and per-subject BLUPs.
//!
//! Each subject's replicates follow `w_i = A_i beta + 1 b_i + e_i` with
//! `b_i ~ N(0, tau2)` and `e_i ~ N(0, sigma2 I)`. Fixed-effect rows are
//! constant within a subject, so every likelihood quantity reduces to the
//! per-subject count, mean and within sum of squares.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ReplicatePanel, VarianceComponents};

const LOG_RATIO_BOUNDS: (f64, f64) = (-30.0, 30.0);
const LOG_RATIO_TOL: f64 = 1e-10;
const MAX_ITERATIONS: usize = 200;
const GRID_POINTS: usize = 121;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LmeFit {
    /// Fixed-effect estimates; element 0 is the intercept `gamma0_hat`.
    pub fixed_effects: Vec<f64>,
    /// Between-subject variance (identifies `v_b`).
    pub tau2: f64,
    /// Within-subject variance (identifies `v_w`).
    pub sigma2: f64,
    pub log_restricted_likelihood: f64,
    pub converged: bool,
    pub n_iterations: usize,
}

impl LmeFit {
    pub fn gamma0_hat(&self) -> f64 {
        self.fixed_effects[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BlupSource {
    Oracle,
    Empirical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlupVector {
    /// Corrected exposure on the latent scale.
    pub x_hat: DVector<f64>,
    /// Multiplier applied to the centered subject mean, in `[0, 1]`.
    pub shrinkage: DVector<f64>,
    pub source: BlupSource,
}

/// Sufficient statistics of one subject.
#[derive(Debug, Clone)]
struct SubjectStats {
    count: f64,
    mean: f64,
    ssw: f64,
    a: DVector<f64>,
}

fn subject_stats(panel: &ReplicatePanel) -> Vec<SubjectStats> {
    (0..panel.n_subjects())
        .map(|i| {
            let vals: Vec<f64> = panel.observed_values(i).collect();
            let count = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / count;
            let ssw = vals.iter().map(|v| (v - mean) * (v - mean)).sum();
            SubjectStats {
                count,
                mean,
                ssw,
                a: panel.stage1_row(i),
            }
        })
        .collect()
}

fn check_identifiable(stats: &[SubjectStats], m: usize) -> Result<(f64, f64)> {
    let n_obs: f64 = stats.iter().map(|s| s.count).sum();
    let n = stats.len();
    if n <= m {
        return Err(Error::Unidentifiable(format!(
            "{n} subject(s) cannot identify {m} fixed effect(s) and a between-subject variance"
        )));
    }
    if stats.iter().all(|s| s.count < 2.0) {
        return Err(Error::Unidentifiable(
            "every subject has a single replicate; within-subject variance is not identified".into(),
        ));
    }
    let ssw: f64 = stats.iter().map(|s| s.ssw).sum();
    if ssw <= 0.0 {
        return Err(Error::Degenerate(
            "replicates are identical within every subject; within-subject variance is zero".into(),
        ));
    }
    Ok((n_obs, ssw))
}

/// Generalized least squares for the fixed effects at variance ratio
/// `r = tau2 / sigma2`. Returns `(beta, log|M|, residual quadratic form / sigma2)`.
fn gls(stats: &[SubjectStats], m: usize, ratio: f64) -> Result<(DVector<f64>, f64, f64)> {
    let mut info = DMatrix::<f64>::zeros(m, m);
    let mut rhs = DVector::<f64>::zeros(m);
    for s in stats {
        let w = s.count / (1.0 + s.count * ratio);
        info.ger(w, &s.a, &s.a, 1.0);
        rhs.axpy(w * s.mean, &s.a, 1.0);
    }
    let chol = info.clone().cholesky().ok_or_else(|| {
        Error::Unidentifiable("stage-1 fixed-effect design is rank deficient".into())
    })?;
    let beta = chol.solve(&rhs);
    let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let quad: f64 = stats
        .iter()
        .map(|s| {
            let resid = s.mean - s.a.dot(&beta);
            s.ssw + s.count * resid * resid / (1.0 + s.count * ratio)
        })
        .sum();
    Ok((beta, log_det, quad))
}

/// Restricted log-likelihood with `sigma2` profiled out, as a function of the
/// variance ratio. Returns `(loglik, beta, sigma2_hat)`.
fn profiled(stats: &[SubjectStats], m: usize, n_obs: f64, ratio: f64) -> Result<(f64, DVector<f64>, f64)> {
    let (beta, log_det, quad) = gls(stats, m, ratio)?;
    let dof = n_obs - m as f64;
    let sigma2 = quad / dof;
    let log_dets: f64 = stats.iter().map(|s| (1.0 + s.count * ratio).ln()).sum();
    let m2ll = dof * ((2.0 * std::f64::consts::PI).ln() + sigma2.ln() + 1.0) + log_dets + log_det;
    Ok((-0.5 * m2ll, beta, sigma2))
}

/// Restricted log-likelihood of the random-intercept model at `(tau2, sigma2)`,
/// with the fixed effects at their GLS estimate.
pub fn restricted_log_likelihood(panel: &ReplicatePanel, tau2: f64, sigma2: f64) -> Result<f64> {
    if !(tau2 >= 0.0) || !(sigma2 > 0.0) {
        return Err(Error::invalid("variance", "need tau2 >= 0 and sigma2 > 0"));
    }
    let stats = subject_stats(panel);
    let m = panel.stage1_width();
    let (n_obs, _) = check_identifiable(&stats, m)?;
    let ratio = tau2 / sigma2;
    let (_, log_det_scaled, quad) = gls(&stats, m, ratio)?;
    let log_dets: f64 = stats.iter().map(|s| (1.0 + s.count * ratio).ln()).sum();
    // |V_i| = sigma2^J_i (1 + J_i r); X'V^-1X = M / sigma2.
    let m2ll = (n_obs - m as f64) * (2.0 * std::f64::consts::PI).ln()
        + n_obs * sigma2.ln()
        + log_dets
        + log_det_scaled
        - m as f64 * sigma2.ln()
        + quad / sigma2;
    Ok(-0.5 * m2ll)
}

/// One-way ANOVA estimator for balanced, fully observed, intercept-only panels.
///
/// Equals the REML optimum whenever the between mean square exceeds the
/// within mean square; otherwise `tau2` is truncated at zero.
pub fn fit_balanced_anova(panel: &ReplicatePanel) -> Result<LmeFit> {
    if !panel.is_fully_observed() {
        return Err(Error::Unsupported(
            "balanced ANOVA needs a fully observed panel; use fit_reml_profiled".into(),
        ));
    }
    if panel.stage1_width() > 1 {
        return Err(Error::Unsupported(
            "balanced ANOVA supports an intercept only; use fit_reml_profiled".into(),
        ));
    }
    let n = panel.n_subjects();
    let j = panel.max_replicates();
    if n < 2 || j < 2 {
        return Err(Error::Unidentifiable(format!(
            "balanced ANOVA needs n >= 2 and J >= 2, got n={n}, J={j}"
        )));
    }
    let stats = subject_stats(panel);
    let (nf, jf) = (n as f64, j as f64);
    let grand = stats.iter().map(|s| s.mean).sum::<f64>() / nf;
    let ssb: f64 = stats.iter().map(|s| (s.mean - grand) * (s.mean - grand)).sum::<f64>() * jf;
    let ssw: f64 = stats.iter().map(|s| s.ssw).sum();
    let msb = ssb / (nf - 1.0);
    let msw = ssw / (nf * (jf - 1.0));
    if msw <= 0.0 {
        return Err(Error::Degenerate(
            "replicates are identical within every subject; within-subject variance is zero".into(),
        ));
    }
    let tau2 = ((msb - msw) / jf).max(0.0);
    let loglik = restricted_log_likelihood(panel, tau2, msw)?;
    Ok(LmeFit {
        fixed_effects: vec![grand],
        tau2,
        sigma2: msw,
        log_restricted_likelihood: loglik,
        converged: true,
        n_iterations: 0,
    })
}

/// REML for the random-intercept model with arbitrary missingness and
/// subject-level fixed effects.
///
/// The fixed effects and `sigma2` are profiled out; the remaining scalar
/// `log(tau2 / sigma2)` is located on a coarse grid over `[-30, 30]` and then
/// refined by golden-section search.
pub fn fit_reml_profiled(panel: &ReplicatePanel) -> Result<LmeFit> {
    let stats = subject_stats(panel);
    let m = panel.stage1_width();
    let (n_obs, _) = check_identifiable(&stats, m)?;
    let objective = |t: f64| -> Result<f64> { Ok(profiled(&stats, m, n_obs, t.exp())?.0) };

    let (lo, hi) = LOG_RATIO_BOUNDS;
    let step = (hi - lo) / (GRID_POINTS - 1) as f64;
    let mut best = (0usize, f64::NEG_INFINITY);
    for k in 0..GRID_POINTS {
        let v = objective(lo + step * k as f64)?;
        if v > best.1 {
            best = (k, v);
        }
    }
    let mut a = lo + step * best.0.saturating_sub(1) as f64;
    let mut b = lo + step * (best.0 + 1).min(GRID_POINTS - 1) as f64;

    let inv_phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = objective(c)?;
    let mut fd = objective(d)?;
    let mut iterations = 0;
    while (b - a) > LOG_RATIO_TOL && iterations < MAX_ITERATIONS {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = objective(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = objective(d)?;
        }
        iterations += 1;
    }
    let converged = (b - a) <= LOG_RATIO_TOL;
    let t_opt = if fc >= fd { c } else { d };

    let (mut loglik, mut beta, mut sigma2) = profiled(&stats, m, n_obs, t_opt.exp())?;
    let mut ratio = t_opt.exp();
    // The open interval excludes tau2 = 0; take the boundary when it is at least as good.
    let (ll0, beta0, sigma20) = profiled(&stats, m, n_obs, 0.0)?;
    if ll0 >= loglik {
        loglik = ll0;
        beta = beta0;
        sigma2 = sigma20;
        ratio = 0.0;
    }
    Ok(LmeFit {
        fixed_effects: beta.iter().copied().collect(),
        tau2: ratio * sigma2,
        sigma2,
        log_restricted_likelihood: loglik,
        converged,
        n_iterations: iterations,
    })
}

/// Balanced ANOVA when it coincides with REML, profiled REML otherwise.
pub fn fit_random_intercept(panel: &ReplicatePanel) -> Result<LmeFit> {
    if panel.is_fully_observed() && panel.stage1_width() == 1 && panel.max_replicates() >= 2 {
        let fit = fit_balanced_anova(panel)?;
        if fit.tau2 > 0.0 {
            return Ok(fit);
        }
    }
    fit_reml_profiled(panel)
}

/// BLUP of the latent exposure from known measurement-model parameters.
///
/// For a subject with `J_i` observed replicates the BLUP of `gamma1 X_i` is
/// `gamma1^2 sigma_x2 J_i (W̄_i - gamma0) / (v_w + J_i v_b)`; dividing by
/// `gamma1` gives the exposure on the latent scale.
pub fn blup_oracle(panel: &ReplicatePanel, vc: &VarianceComponents) -> Result<BlupVector> {
    if vc.gamma1 == 0.0 {
        return Err(Error::Unidentifiable("gamma1 = 0 leaves the exposure unidentified".into()));
    }
    let n = panel.n_subjects();
    let (vb, vw, signal) = (vc.v_b(), vc.v_w(), vc.signal_variance());
    let mut x_hat = DVector::zeros(n);
    let mut shrinkage = DVector::zeros(n);
    for i in 0..n {
        let ji = panel.observed_count(i) as f64;
        let k = signal * ji / (vw + ji * vb);
        shrinkage[i] = k;
        x_hat[i] = k * (panel.subject_mean(i) - vc.gamma0) / vc.gamma1;
    }
    Ok(BlupVector {
        x_hat,
        shrinkage,
        source: BlupSource::Oracle,
    })
}

/// BLUP of the latent exposure from a fitted random-intercept model.
///
/// `X̂_i = lambda_i (W̄_i - a_i' beta_hat) / gamma1` with
/// `lambda_i = tau2 / (tau2 + sigma2 / J_i)`.
pub fn blup_empirical(panel: &ReplicatePanel, fit: &LmeFit, gamma1: f64) -> Result<BlupVector> {
    if !fit.converged {
        return Err(Error::NotConverged("stage-1 fit did not converge".into()));
    }
    if gamma1 == 0.0 {
        return Err(Error::Unidentifiable("gamma1 = 0 leaves the exposure unidentified".into()));
    }
    if fit.fixed_effects.len() != panel.stage1_width() {
        return Err(Error::Dimension(format!(
            "fit has {} fixed effects, panel has {} stage-1 columns",
            fit.fixed_effects.len(),
            panel.stage1_width()
        )));
    }
    let beta = DVector::from_column_slice(&fit.fixed_effects);
    let n = panel.n_subjects();
    let mut x_hat = DVector::zeros(n);
    let mut shrinkage = DVector::zeros(n);
    for i in 0..n {
        let ji = panel.observed_count(i) as f64;
        let lambda = if fit.tau2 > 0.0 {
            fit.tau2 / (fit.tau2 + fit.sigma2 / ji)
        } else {
            0.0
        };
        shrinkage[i] = lambda;
        let resid = panel.subject_mean(i) - panel.stage1_row(i).dot(&beta);
        x_hat[i] = lambda * resid / gamma1;
    }
    Ok(BlupVector {
        x_hat,
        shrinkage,
        source: BlupSource::Empirical,
    })
}
