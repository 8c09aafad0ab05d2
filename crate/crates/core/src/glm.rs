//! Stage 2: ordinary least squares and logistic IRLS with Wald intervals.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::Family;
use crate::stats::two_sided_critical;

const IRLS_MAX_ITER: usize = 50;
const IRLS_STEP_TOL: f64 = 1e-8;
const IRLS_DEVIANCE_TOL: f64 = 1e-10;
const SEPARATION_NORM: f64 = 1e3;
/// Relative size of an R diagonal below which a column counts as collinear.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct GlmFit {
    pub family: Family,
    pub coefficients: DVector<f64>,
    /// Asymptotic covariance of the coefficients.
    pub covariance: DMatrix<f64>,
    pub converged: bool,
    pub n_iterations: usize,
    /// Residual variance for the linear family, 1 for logistic.
    pub dispersion: f64,
    pub diagnostic: Option<String>,
}

impl GlmFit {
    pub fn standard_errors(&self) -> DVector<f64> {
        self.covariance.diagonal().map(|v| v.max(0.0).sqrt())
    }
}

/// QR-based least squares. Returns the coefficients and `R^{-1}`, so that
/// `(D'D)^{-1} = R^{-1} R^{-T}`.
fn least_squares(design: &DMatrix<f64>, y: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let q = design.ncols();
    let qr = design.clone().qr();
    let r = qr.r();
    let scale = (0..q)
        .map(|k| design.column(k).norm())
        .fold(0.0_f64, f64::max)
        .max(f64::MIN_POSITIVE);
    for k in 0..q {
        if r[(k, k)].abs() <= RANK_TOL * scale {
            return Err(Error::Singular { column: k });
        }
    }
    let qty = qr.q().transpose() * y;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or(Error::Singular { column: q.saturating_sub(1) })?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(q, q))
        .ok_or(Error::Singular { column: q.saturating_sub(1) })?;
    Ok((beta, r_inv))
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

fn check_shape(design: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    if design.nrows() != y.len() {
        return Err(Error::Dimension(format!(
            "design has {} rows, outcome has {}",
            design.nrows(),
            y.len()
        )));
    }
    if design.nrows() <= design.ncols() {
        return Err(Error::Unidentifiable(format!(
            "need more observations ({}) than coefficients ({})",
            design.nrows(),
            design.ncols()
        )));
    }
    Ok(())
}

/// Ordinary least squares with covariance `s^2 (D'D)^{-1}`, `s^2 = RSS / (n - q)`.
pub fn fit_linear_ols(design: &DMatrix<f64>, y: &DVector<f64>) -> Result<GlmFit> {
    check_shape(design, y)?;
    let (beta, r_inv) = least_squares(design, y)?;
    let resid = y - design * &beta;
    let dof = (design.nrows() - design.ncols()) as f64;
    let dispersion = resid.norm_squared() / dof;
    let covariance = symmetrize(&r_inv * r_inv.transpose() * dispersion);
    Ok(GlmFit {
        family: Family::Linear,
        coefficients: beta,
        covariance,
        converged: true,
        n_iterations: 1,
        dispersion,
        diagnostic: None,
    })
}

fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

fn bernoulli_deviance(y: &DVector<f64>, eta: &DVector<f64>) -> f64 {
    // -2 log L with log(1 + e^eta) evaluated stably.
    y.iter()
        .zip(eta.iter())
        .map(|(&yi, &e)| {
            let softplus = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
            2.0 * (softplus - yi * e)
        })
        .sum()
}

/// Logistic regression by iteratively reweighted least squares.
///
/// Separation is reported through `converged = false` and a diagnostic; no
/// penalization is applied.
pub fn fit_logistic_irls(design: &DMatrix<f64>, y: &DVector<f64>) -> Result<GlmFit> {
    check_shape(design, y)?;
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Data("logistic outcome must be coded 0/1".into()));
    }
    let ones = y.iter().filter(|&&v| v == 1.0).count();
    if ones == 0 || ones == y.len() {
        return Err(Error::SingleClass(format!(
            "all {} outcomes equal {}",
            y.len(),
            if ones == 0 { 0 } else { 1 }
        )));
    }
    let (n, q) = design.shape();
    let mut beta = DVector::<f64>::zeros(q);
    let mut eta = design * &beta;
    let mut deviance = bernoulli_deviance(y, &eta);
    let mut converged = false;
    let mut diagnostic = None;
    let mut iterations = 0;

    while iterations < IRLS_MAX_ITER {
        iterations += 1;
        let mut wd = design.clone();
        let mut wz = DVector::<f64>::zeros(n);
        for i in 0..n {
            let p = logistic(eta[i]);
            let w = (p * (1.0 - p)).max(1e-300);
            let sw = w.sqrt();
            wd.row_mut(i).scale_mut(sw);
            wz[i] = sw * (eta[i] + (y[i] - p) / w);
        }
        let (next, _) = least_squares(&wd, &wz)?;
        let step = (&next - &beta).amax();
        beta = next;
        eta = design * &beta;
        let next_deviance = bernoulli_deviance(y, &eta);
        let rel_change = (deviance - next_deviance).abs() / (next_deviance.abs() + 0.1);
        deviance = next_deviance;
        if beta.norm() > SEPARATION_NORM || !beta.iter().all(|b| b.is_finite()) {
            diagnostic = Some(format!(
                "coefficient norm diverged ({:.3e}); outcome is (quasi-)separated",
                beta.norm()
            ));
            break;
        }
        if step < IRLS_STEP_TOL || rel_change < IRLS_DEVIANCE_TOL {
            converged = true;
            break;
        }
    }
    if converged {
        let fitted_extreme = eta.iter().all(|&e| {
            let p = logistic(e);
            p < 1e-10 || p > 1.0 - 1e-10
        });
        if fitted_extreme {
            converged = false;
            diagnostic = Some("fitted probabilities are all 0 or 1; outcome is separated".into());
        }
    } else if diagnostic.is_none() {
        diagnostic = Some(format!("no convergence after {IRLS_MAX_ITER} iterations"));
    }

    let mut wd = design.clone();
    for i in 0..n {
        let p = logistic(eta[i]);
        wd.row_mut(i).scale_mut((p * (1.0 - p)).sqrt());
    }
    let covariance = match least_squares(&wd, &DVector::zeros(n)) {
        Ok((_, r_inv)) => symmetrize(&r_inv * r_inv.transpose()),
        Err(_) => {
            converged = false;
            diagnostic.get_or_insert_with(|| "Fisher information is singular".into());
            DMatrix::from_element(q, q, f64::NAN)
        }
    };
    Ok(GlmFit {
        family: Family::Logistic,
        coefficients: beta,
        covariance,
        converged,
        n_iterations: iterations,
        dispersion: 1.0,
        diagnostic,
    })
}

pub fn fit_glm(family: Family, design: &DMatrix<f64>, y: &DVector<f64>) -> Result<GlmFit> {
    match family {
        Family::Linear => fit_linear_ols(design, y),
        Family::Logistic => fit_logistic_irls(design, y),
    }
}

/// Per-coefficient Wald interval `beta ± z_{(1+level)/2} SE`.
pub fn wald_interval(fit: &GlmFit, level: f64) -> Result<Vec<(f64, f64)>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid("level", format!("must lie in (0, 1), got {level}")));
    }
    let z = two_sided_critical(level);
    Ok(wald_from(fit.coefficients.as_slice(), fit.standard_errors().as_slice(), z))
}

pub(crate) fn wald_from(coefficients: &[f64], se: &[f64], z: f64) -> Vec<(f64, f64)> {
    coefficients
        .iter()
        .zip(se)
        .map(|(&b, &s)| (b - z * s, b + z * s))
        .collect()
}
