//! Domain types and compound-symmetry covariance algebra.
//!
//! The replicate model is `W_ij = gamma0 + gamma1 * X_i + U_ij` with
//! exchangeable within-subject errors: `Var(U_ij) = sigma_u2` and
//! `Cov(U_ij, U_ik) = rho * sigma_u2`. Marginally each subject's replicate
//! vector is compound symmetric with between-subject variance
//! `v_b = gamma1^2 sigma_x2 + rho sigma_u2` and within-subject variance
//! `v_w = (1 - rho) sigma_u2`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

/// Outcome-model family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Linear,
    Logistic,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Linear => "linear",
            Family::Logistic => "logistic",
        })
    }
}

/// How the stage-2 exposure proxy is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// BLUP computed from known (generating or externally calibrated) variance components.
    BlupOracle,
    /// BLUP computed from a fitted random-intercept model.
    BlupEmpirical,
    /// Plain per-subject mean of the observed replicates.
    Naive,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::BlupOracle => "blup_oracle",
            Method::BlupEmpirical => "blup_empirical",
            Method::Naive => "naive",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Full parameterization of one simulation cell.
///
/// Spreads are given as standard deviations; [`Scenario::variance_components`]
/// converts them to variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub family: Family,
    pub n: usize,
    #[serde(rename = "J")]
    pub j: usize,
    pub gamma0: f64,
    pub gamma1: f64,
    pub mu_x: f64,
    pub sigma_x: f64,
    pub mu_c: f64,
    pub sigma_c: f64,
    pub sigma_u: f64,
    pub rho: f64,
    pub rho_xc: f64,
    pub beta0: f64,
    pub beta_x: f64,
    pub beta_c: f64,
    #[serde(default)]
    pub sigma_eps: f64,
    #[serde(default)]
    pub p_miss: f64,
    #[serde(default = "default_reps")]
    pub n_reps: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_reps() -> usize {
    1000
}

impl Scenario {
    /// Continuous-outcome reference setting with `gamma1 = 1`, `rho = 0.1`,
    /// `rho_xc = 0`, `n = 500`, 7 replicates.
    pub fn reference_linear() -> Self {
        Scenario {
            family: Family::Linear,
            n: 500,
            j: 7,
            gamma0: 1.0,
            gamma1: 1.0,
            mu_x: 0.0,
            sigma_x: 2.0,
            mu_c: 1.0,
            sigma_c: 1.0,
            sigma_u: 1.0,
            rho: 0.1,
            rho_xc: 0.0,
            beta0: 10.0,
            beta_x: 2.95,
            beta_c: 3.0,
            sigma_eps: 1.0,
            p_miss: 0.0,
            n_reps: 1000,
            seed: 20_240_101,
        }
    }

    /// Binary-outcome reference setting; identical to the linear one except
    /// for the outcome coefficients.
    pub fn reference_logistic() -> Self {
        Scenario {
            family: Family::Logistic,
            beta0: 0.1,
            beta_x: 0.1,
            beta_c: 0.1,
            ..Self::reference_linear()
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn finite(field: &'static str, v: f64) -> Result<()> {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(field, "must be finite"))
            }
        }
        for (field, v) in [
            ("gamma0", self.gamma0),
            ("gamma1", self.gamma1),
            ("mu_x", self.mu_x),
            ("mu_c", self.mu_c),
            ("beta0", self.beta0),
            ("beta_x", self.beta_x),
            ("beta_c", self.beta_c),
        ] {
            finite(field, v)?;
        }
        if self.n < 3 {
            return Err(Error::invalid("n", format!("need at least 3 subjects, got {}", self.n)));
        }
        if self.j < 1 {
            return Err(Error::invalid("J", "need at least one replicate"));
        }
        // Zero spreads are accepted for error-free and no-signal limits.
        for (field, v) in [
            ("sigma_x", self.sigma_x),
            ("sigma_u", self.sigma_u),
            ("sigma_eps", self.sigma_eps),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(field, format!("must be >= 0, got {v}")));
            }
        }
        if !(self.sigma_c > 0.0 && self.sigma_c.is_finite()) {
            return Err(Error::invalid("sigma_c", format!("must be > 0, got {}", self.sigma_c)));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::invalid("rho", format!("must lie in [0, 1), got {}", self.rho)));
        }
        if !(self.rho_xc > -1.0 && self.rho_xc < 1.0) {
            return Err(Error::invalid(
                "rho_xc",
                format!("must lie in (-1, 1), got {}", self.rho_xc),
            ));
        }
        if !(0.0..1.0).contains(&self.p_miss) {
            return Err(Error::invalid("p_miss", format!("must lie in [0, 1), got {}", self.p_miss)));
        }
        if self.n_reps < 1 {
            return Err(Error::invalid("n_reps", "need at least one replication"));
        }
        Ok(())
    }

    /// Stable identifier used for reporting and RNG substream derivation.
    pub fn scenario_id(&self) -> String {
        format!(
            "{}-g{}-rho{}-rxc{}-n{}-J{}-pm{}",
            self.family, self.gamma1, self.rho, self.rho_xc, self.n, self.j, self.p_miss
        )
    }

    /// Generating variance components. Fails when `sigma_u = 0` since the
    /// within-subject variance must be positive.
    pub fn variance_components(&self) -> Result<VarianceComponents> {
        VarianceComponents::new(
            self.gamma0,
            self.gamma1,
            self.sigma_x * self.sigma_x,
            self.sigma_u * self.sigma_u,
            self.rho,
        )
    }

    /// True outcome coefficients in design order `(beta0, beta_x, beta_c)`.
    pub fn true_coefficients(&self) -> [f64; 3] {
        [self.beta0, self.beta_x, self.beta_c]
    }

    /// `Var(W̄_i)` for a subject with `replicates` observed days.
    pub fn var_subject_mean(&self, replicates: usize) -> f64 {
        let jf = replicates as f64;
        self.gamma1 * self.gamma1 * self.sigma_x * self.sigma_x
            + self.sigma_u * self.sigma_u * (1.0 + (jf - 1.0) * self.rho) / jf
    }
}

/// Measurement-model parameters, stored as variances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub gamma0: f64,
    pub gamma1: f64,
    pub sigma_x2: f64,
    pub sigma_u2: f64,
    pub rho: f64,
}

impl VarianceComponents {
    pub fn new(gamma0: f64, gamma1: f64, sigma_x2: f64, sigma_u2: f64, rho: f64) -> Result<Self> {
        if !gamma0.is_finite() || !gamma1.is_finite() {
            return Err(Error::invalid("gamma", "must be finite"));
        }
        if !(sigma_x2 >= 0.0 && sigma_x2.is_finite()) {
            return Err(Error::invalid("sigma_x2", format!("must be >= 0, got {sigma_x2}")));
        }
        if !(sigma_u2 > 0.0 && sigma_u2.is_finite()) {
            return Err(Error::invalid("sigma_u2", format!("must be > 0, got {sigma_u2}")));
        }
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::invalid("rho", format!("must lie in [0, 1), got {rho}")));
        }
        Ok(VarianceComponents {
            gamma0,
            gamma1,
            sigma_x2,
            sigma_u2,
            rho,
        })
    }

    /// Variance of the latent signal on the measurement scale, `gamma1^2 sigma_x2`.
    pub fn signal_variance(&self) -> f64 {
        self.gamma1 * self.gamma1 * self.sigma_x2
    }

    /// Between-subject variance of the compound-symmetric marginal.
    pub fn v_b(&self) -> f64 {
        self.signal_variance() + self.rho * self.sigma_u2
    }

    /// Within-subject variance.
    pub fn v_w(&self) -> f64 {
        (1.0 - self.rho) * self.sigma_u2
    }
}

/// Exchangeable error covariance `Sigma_u` of size `j x j`.
pub fn build_sigma_u(vc: &VarianceComponents, j: usize) -> DMatrix<f64> {
    let off = vc.rho * vc.sigma_u2;
    DMatrix::from_fn(j, j, |r, c| if r == c { vc.sigma_u2 } else { off })
}

/// Marginal covariance of one subject's replicate vector,
/// `gamma1^2 sigma_x2 11' + Sigma_u = v_w I + v_b 11'`.
pub fn build_marginal_cov(vc: &VarianceComponents, j: usize) -> DMatrix<f64> {
    let signal = vc.signal_variance();
    let diag = signal + vc.sigma_u2;
    let off = signal + vc.rho * vc.sigma_u2;
    DMatrix::from_fn(j, j, |r, c| if r == c { diag } else { off })
}

/// Per-subject replicate measurements with a missingness mask.
///
/// Row `i` holds subject `i`; column `j` holds replicate `j`. Entries whose
/// mask is `false` are ignored by every computation.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicatePanel {
    subject_ids: Vec<String>,
    values: DMatrix<f64>,
    observed: DMatrix<bool>,
    stage1_covariates: Option<DMatrix<f64>>,
}

impl ReplicatePanel {
    pub fn new(
        subject_ids: Vec<String>,
        values: DMatrix<f64>,
        observed: DMatrix<bool>,
        stage1_covariates: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let n = values.nrows();
        if subject_ids.len() != n {
            return Err(Error::Dimension(format!(
                "{} subject ids for {} panel rows",
                subject_ids.len(),
                n
            )));
        }
        if observed.shape() != values.shape() {
            return Err(Error::Dimension(format!(
                "mask shape {:?} differs from value shape {:?}",
                observed.shape(),
                values.shape()
            )));
        }
        for i in 0..n {
            let mut count = 0;
            for j in 0..values.ncols() {
                if observed[(i, j)] {
                    count += 1;
                    if !values[(i, j)].is_finite() {
                        return Err(Error::Data(format!(
                            "subject `{}` replicate {} is not finite",
                            subject_ids[i], j
                        )));
                    }
                }
            }
            if count == 0 {
                return Err(Error::Data(format!(
                    "subject `{}` has no observed replicates",
                    subject_ids[i]
                )));
            }
        }
        if let Some(a) = &stage1_covariates {
            if a.nrows() != n || a.ncols() == 0 {
                return Err(Error::Dimension(format!(
                    "stage-1 covariates have shape {:?}, expected {} rows",
                    a.shape(),
                    n
                )));
            }
            if a.column(0).iter().any(|&v| v != 1.0) {
                return Err(Error::invalid(
                    "stage1_covariates",
                    "first column must be identically 1",
                ));
            }
        }
        Ok(ReplicatePanel {
            subject_ids,
            values,
            observed,
            stage1_covariates,
        })
    }

    /// Fully observed panel with generated ids `s0, s1, ...`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let j = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != j) {
            return Err(Error::Dimension("rows have unequal length".into()));
        }
        let values = DMatrix::from_fn(n, j, |r, c| rows[r][c]);
        let ids = (0..n).map(|i| format!("s{i}")).collect();
        Self::new(ids, values, DMatrix::from_element(n, j, true), None)
    }

    pub fn with_mask(mut self, observed: DMatrix<bool>) -> Result<Self> {
        self.observed = observed;
        Self::new(self.subject_ids, self.values, self.observed, self.stage1_covariates)
    }

    pub fn with_stage1_covariates(self, a: DMatrix<f64>) -> Result<Self> {
        Self::new(self.subject_ids, self.values, self.observed, Some(a))
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn observed(&self) -> &DMatrix<bool> {
        &self.observed
    }

    pub fn stage1_covariates(&self) -> Option<&DMatrix<f64>> {
        self.stage1_covariates.as_ref()
    }

    pub fn n_subjects(&self) -> usize {
        self.values.nrows()
    }

    /// Number of replicate slots (the panel width).
    pub fn max_replicates(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_fully_observed(&self) -> bool {
        self.observed.iter().all(|&o| o)
    }

    /// Observed replicate values for subject `i`.
    pub fn observed_values(&self, i: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.values.ncols())
            .filter(move |&j| self.observed[(i, j)])
            .map(move |j| self.values[(i, j)])
    }

    pub fn observed_count(&self, i: usize) -> usize {
        (0..self.values.ncols()).filter(|&j| self.observed[(i, j)]).count()
    }

    pub fn subject_mean(&self, i: usize) -> f64 {
        let (sum, count) = self
            .observed_values(i)
            .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
        sum / count as f64
    }

    /// Per-subject means of the observed replicates.
    pub fn subject_means(&self) -> DVector<f64> {
        DVector::from_iterator(self.n_subjects(), (0..self.n_subjects()).map(|i| self.subject_mean(i)))
    }

    /// Rows of the stage-1 fixed-effect design; intercept only when absent.
    pub fn stage1_row(&self, i: usize) -> DVector<f64> {
        match &self.stage1_covariates {
            Some(a) => a.row(i).transpose(),
            None => DVector::from_element(1, 1.0),
        }
    }

    pub fn stage1_width(&self) -> usize {
        self.stage1_covariates.as_ref().map_or(1, |a| a.ncols())
    }

    /// Subset of rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let ids = rows.iter().map(|&r| self.subject_ids[r].clone()).collect();
        let values = self.values.select_rows(rows.iter());
        let observed = DMatrix::from_fn(rows.len(), self.values.ncols(), |r, c| {
            self.observed[(rows[r], c)]
        });
        let a = self.stage1_covariates.as_ref().map(|a| a.select_rows(rows.iter()));
        Self::new(ids, values, observed, a)
    }
}

/// Subject-level outcomes and error-free covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomePanel {
    pub subject_ids: Vec<String>,
    pub y: DVector<f64>,
    pub covariates: DMatrix<f64>,
    pub covariate_names: Vec<String>,
}

impl OutcomePanel {
    pub fn new(
        subject_ids: Vec<String>,
        y: DVector<f64>,
        covariates: DMatrix<f64>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        if subject_ids.len() != y.len() || covariates.nrows() != y.len() {
            return Err(Error::Dimension(format!(
                "{} ids, {} outcomes, {} covariate rows",
                subject_ids.len(),
                y.len(),
                covariates.nrows()
            )));
        }
        if covariate_names.len() != covariates.ncols() {
            return Err(Error::Dimension(format!(
                "{} covariate names for {} columns",
                covariate_names.len(),
                covariates.ncols()
            )));
        }
        Ok(OutcomePanel {
            subject_ids,
            y,
            covariates,
            covariate_names,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vc(gamma1: f64, sigma_x2: f64, sigma_u2: f64, rho: f64) -> VarianceComponents {
        VarianceComponents::new(1.0, gamma1, sigma_x2, sigma_u2, rho).unwrap()
    }

    #[test]
    fn sigma_u_uncorrelated_is_identity() {
        let m = build_sigma_u(&vc(1.0, 1.0, 1.0, 0.0), 3);
        assert_eq!(m, DMatrix::identity(3, 3));
    }

    #[test]
    fn sigma_u_two_by_two() {
        let m = build_sigma_u(&vc(1.0, 1.0, 1.0, 0.1), 2);
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 1.0]));
    }

    #[test]
    fn sigma_u_eigenvalues_match_exchangeable_formula() {
        let m = build_sigma_u(&vc(1.0, 1.0, 4.0, 0.3), 3);
        let mut eig: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (got, want) in eig.iter().zip([2.8, 2.8, 6.4]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn marginal_cov_hand_values() {
        let m = build_marginal_cov(&vc(1.0, 4.0, 1.0, 0.1), 2);
        assert!((m[(0, 0)] - 5.0).abs() < 1e-15);
        assert!((m[(0, 1)] - 4.1).abs() < 1e-15);
        assert!((m[(1, 0)] - 4.1).abs() < 1e-15);
    }

    #[test]
    fn marginal_cov_without_signal_is_identity() {
        let m = build_marginal_cov(&vc(0.0, 7.0, 1.0, 0.0), 3);
        assert_eq!(m, DMatrix::identity(3, 3));
    }

    #[test]
    fn ones_is_eigenvector_of_marginal_cov() {
        let v = vc(1.3, 2.0, 0.7, 0.25);
        for j in 1..=8 {
            let m = build_marginal_cov(&v, j);
            let ones = DVector::from_element(j, 1.0);
            let expect = v.v_w() + j as f64 * v.v_b();
            let prod = &m * &ones;
            assert!(prod.iter().all(|x| (x - expect).abs() < 1e-12));
        }
    }

    #[test]
    fn panel_rejects_empty_subject() {
        let values = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let mask = DMatrix::from_row_slice(2, 2, &[true, true, false, false]);
        let err = ReplicatePanel::new(vec!["a".into(), "b".into()], values, mask, None);
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn panel_rejects_stage1_without_intercept() {
        let p = ReplicatePanel::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 2.0, 0.1]);
        assert!(p.with_stage1_covariates(a).is_err());
    }

    #[test]
    fn scenario_validation() {
        let mut s = Scenario::reference_linear();
        assert!(s.validate().is_ok());
        s.rho = 1.0;
        assert!(s.validate().is_err());
        s = Scenario::reference_linear();
        s.rho_xc = -1.0;
        assert!(s.validate().is_err());
        s = Scenario::reference_linear();
        s.n = 2;
        assert!(s.validate().is_err());
    }

    #[test]
    fn var_subject_mean_reference_value() {
        let s = Scenario::reference_linear();
        assert!((s.var_subject_mean(7) - (4.0 + 1.6 / 7.0)).abs() < 1e-14);
    }
}
