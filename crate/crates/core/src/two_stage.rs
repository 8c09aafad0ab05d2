//! Composition of the stage-1 exposure proxy and the stage-2 outcome model.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::glm::{fit_glm, wald_from, GlmFit};
use crate::lme::{blup_empirical, blup_oracle, fit_random_intercept, LmeFit};
use crate::model::{Family, Method, OutcomePanel, ReplicatePanel, VarianceComponents};
use crate::stats::Z_95;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSpec {
    pub method: Method,
    pub gamma1: f64,
    /// Known measurement-model parameters; required by [`Method::BlupOracle`].
    pub vc_override: Option<VarianceComponents>,
    pub family: Family,
    /// Fit the stage-1 model with the outcome covariates as subject-level
    /// fixed effects, so the BLUP conditions on them. Empirical BLUP only.
    pub condition_on_c: bool,
}

impl PipelineSpec {
    pub fn naive(family: Family) -> Self {
        PipelineSpec {
            method: Method::Naive,
            gamma1: 1.0,
            vc_override: None,
            family,
            condition_on_c: false,
        }
    }

    pub fn blup_oracle(family: Family, vc: VarianceComponents) -> Self {
        PipelineSpec {
            method: Method::BlupOracle,
            gamma1: vc.gamma1,
            vc_override: Some(vc),
            family,
            condition_on_c: false,
        }
    }

    pub fn blup_empirical(family: Family, gamma1: f64) -> Self {
        PipelineSpec {
            method: Method::BlupEmpirical,
            gamma1,
            vc_override: None,
            family,
            condition_on_c: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma1 == 0.0 || !self.gamma1.is_finite() {
            return Err(Error::invalid("gamma1", "must be finite and nonzero"));
        }
        if self.method == Method::BlupOracle && self.vc_override.is_none() {
            return Err(Error::invalid("vc_override", "blup_oracle requires variance components"));
        }
        if self.condition_on_c && self.method != Method::BlupEmpirical {
            return Err(Error::invalid(
                "condition_on_c",
                "only supported with the empirical BLUP",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TwoStageFit {
    pub method: Method,
    /// `(beta0, beta_x, beta_c1, ..., beta_cp)`.
    pub coefficients: Vec<f64>,
    pub asymptotic_se: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub converged: bool,
    pub n_used: usize,
    pub stage1: Option<LmeFit>,
    pub diagnostic: Option<String>,
}

/// Stage-2 design `(1, proxy, C)`.
pub fn make_design(proxy: &[f64], covariates: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = proxy.len();
    if covariates.nrows() != n {
        return Err(Error::Dimension(format!(
            "exposure proxy has {} entries, covariates have {} rows",
            n,
            covariates.nrows()
        )));
    }
    let p = covariates.ncols();
    Ok(DMatrix::from_fn(n, 2 + p, |r, c| match c {
        0 => 1.0,
        1 => proxy[r],
        _ => covariates[(r, c - 2)],
    }))
}

/// Sensitivity of the empirical BLUP to the stage-1 fixed effects.
struct Stage1Sensitivity {
    /// `d x_hat_i / d delta`, one row per panel subject.
    jacobian: DMatrix<f64>,
    /// Asymptotic covariance of the stage-1 fixed effects.
    covariance: DMatrix<f64>,
}

/// GLS covariance of the stage-1 fixed effects at the fitted variance components.
fn stage1_covariance(panel: &ReplicatePanel, fit: &LmeFit) -> Option<DMatrix<f64>> {
    let q = panel.stage1_width();
    let mut info = DMatrix::zeros(q, q);
    for i in 0..panel.n_subjects() {
        let a = panel.stage1_row(i);
        let var_mean = fit.tau2 + fit.sigma2 / panel.observed_count(i) as f64;
        info.ger(1.0 / var_mean, &a, &a, 1.0);
    }
    info.cholesky().map(|c| c.inverse()).filter(|m| m.iter().all(|v| v.is_finite()))
}

/// BLUP of the total exposure when stage 1 conditions on subject-level covariates.
fn blup_conditioned(
    panel: &ReplicatePanel,
    covariates: &DMatrix<f64>,
    gamma1: f64,
) -> Result<(DVector<f64>, LmeFit, Option<Stage1Sensitivity>)> {
    let n = panel.n_subjects();
    let p = covariates.ncols();
    let a = DMatrix::from_fn(n, 1 + p, |r, c| if c == 0 { 1.0 } else { covariates[(r, c - 1)] });
    let conditioned = panel.clone().with_stage1_covariates(a.clone())?;
    let fit = fit_random_intercept(&conditioned)?;
    let residual_blup = blup_empirical(&conditioned, &fit, gamma1)?;
    let beta = DVector::from_column_slice(&fit.fixed_effects);
    let centers = a.row_mean();
    let x_hat = DVector::from_fn(n, |i, _| {
        let fixed = (a.row(i) - &centers).dot(&beta.transpose());
        fixed / gamma1 + residual_blup.x_hat[i]
    });
    let sensitivity = stage1_covariance(&conditioned, &fit).map(|covariance| Stage1Sensitivity {
        jacobian: DMatrix::from_fn(n, 1 + p, |i, c| {
            (a[(i, c)] - centers[c] - residual_blup.shrinkage[i] * a[(i, c)]) / gamma1
        }),
        covariance,
    });
    Ok((x_hat, fit, sensitivity))
}

/// Adds the first-order contribution of stage-1 fixed-effect uncertainty to
/// the stage-2 covariance: `G V G'` with `G = -beta_x (D'WD)^{-1} D'W S`.
fn propagate_stage1(glm: &mut GlmFit, design: &DMatrix<f64>, sens: &Stage1Sensitivity, rows: &[usize]) {
    if !glm.converged || glm.coefficients.iter().any(|b| !b.is_finite()) || glm.dispersion <= 0.0 {
        return;
    }
    let bread = &glm.covariance / glm.dispersion;
    let weights: Vec<f64> = match glm.family {
        Family::Linear => vec![1.0; design.nrows()],
        Family::Logistic => (design * &glm.coefficients)
            .iter()
            .map(|eta| {
                let p = 1.0 / (1.0 + (-eta).exp());
                p * (1.0 - p)
            })
            .collect(),
    };
    let s = DMatrix::from_fn(rows.len(), sens.jacobian.ncols(), |r, c| sens.jacobian[(rows[r], c)] * weights[r]);
    let g = &bread * design.transpose() * s * (-glm.coefficients[1]);
    glm.covariance += &g * &sens.covariance * g.transpose();
}

/// Runs both stages. The panels must list the same subjects in the same order.
///
/// Subjects with a non-finite outcome or covariate are dropped from stage 2;
/// stage 1 always uses every subject's replicates. For the empirical BLUP the
/// stage-2 covariance includes a delta-method term for the estimated stage-1
/// fixed effects; the variance components are treated as known.
pub fn estimate(panel: &ReplicatePanel, outcomes: &OutcomePanel, spec: &PipelineSpec) -> Result<TwoStageFit> {
    spec.validate()?;
    if panel.subject_ids() != outcomes.subject_ids.as_slice() {
        return Err(Error::Dimension(
            "replicate and outcome panels list different subjects".into(),
        ));
    }
    let complete: Vec<usize> = (0..outcomes.len())
        .filter(|&i| {
            outcomes.y[i].is_finite() && outcomes.covariates.row(i).iter().all(|v| v.is_finite())
        })
        .collect();

    let (proxy, stage1, sensitivity) = match spec.method {
        Method::Naive => (panel.subject_means(), None, None),
        Method::BlupOracle => {
            let vc = spec.vc_override.as_ref().expect("validated");
            (blup_oracle(panel, vc)?.x_hat, None, None)
        }
        Method::BlupEmpirical if spec.condition_on_c => {
            let sub = panel.select(&complete)?;
            let cov = outcomes.covariates.select_rows(complete.iter());
            let (x_hat, fit, sens) = blup_conditioned(&sub, &cov, spec.gamma1)?;
            // Scatter back so the index space matches the full panel.
            let mut full = DVector::from_element(panel.n_subjects(), f64::NAN);
            let sens = sens.map(|s| {
                let mut jacobian = DMatrix::from_element(panel.n_subjects(), s.jacobian.ncols(), f64::NAN);
                for (k, &i) in complete.iter().enumerate() {
                    jacobian.set_row(i, &s.jacobian.row(k));
                }
                Stage1Sensitivity { jacobian, ..s }
            });
            for (k, &i) in complete.iter().enumerate() {
                full[i] = x_hat[k];
            }
            (full, Some(fit), sens)
        }
        Method::BlupEmpirical => {
            let fit = fit_random_intercept(panel)?;
            if !fit.converged {
                return Ok(unconverged(spec.method, complete.len(), Some(fit)));
            }
            let blup = blup_empirical(panel, &fit, spec.gamma1)?;
            let sens = stage1_covariance(panel, &fit).map(|covariance| Stage1Sensitivity {
                jacobian: DMatrix::from_fn(panel.n_subjects(), 1, |i, _| -blup.shrinkage[i] / spec.gamma1),
                covariance,
            });
            (blup.x_hat, Some(fit), sens)
        }
    };

    let proxy_used: Vec<f64> = complete.iter().map(|&i| proxy[i]).collect();
    let cov_used = outcomes.covariates.select_rows(complete.iter());
    let y_used = DVector::from_iterator(complete.len(), complete.iter().map(|&i| outcomes.y[i]));
    let design = make_design(&proxy_used, &cov_used)?;
    let mut glm = fit_glm(spec.family, &design, &y_used)?;
    if let Some(sens) = &sensitivity {
        propagate_stage1(&mut glm, &design, sens, &complete);
    }
    Ok(assemble(spec.method, glm, complete.len(), stage1))
}

fn unconverged(method: Method, n_used: usize, stage1: Option<LmeFit>) -> TwoStageFit {
    TwoStageFit {
        method,
        coefficients: Vec::new(),
        asymptotic_se: Vec::new(),
        ci_lower: Vec::new(),
        ci_upper: Vec::new(),
        converged: false,
        n_used,
        stage1,
        diagnostic: Some("stage-1 fit did not converge".into()),
    }
}

fn assemble(method: Method, glm: GlmFit, n_used: usize, stage1: Option<LmeFit>) -> TwoStageFit {
    let coefficients: Vec<f64> = glm.coefficients.iter().copied().collect();
    let se: Vec<f64> = glm.standard_errors().iter().copied().collect();
    let ci = wald_from(&coefficients, &se, Z_95);
    TwoStageFit {
        method,
        ci_lower: ci.iter().map(|c| c.0).collect(),
        ci_upper: ci.iter().map(|c| c.1).collect(),
        coefficients,
        asymptotic_se: se,
        converged: glm.converged,
        n_used,
        stage1,
        diagnostic: glm.diagnostic,
    }
}
