//! Measurement-error correction for replicate exposure data.
//!
//! Stage 1 fits a random-intercept model to each subject's replicate
//! measurements and forms the best linear unbiased predictor (BLUP) of the
//! latent exposure. Stage 2 regresses the outcome on the BLUP and error-free
//! covariates. The crate also carries a Monte Carlo harness, closed-form
//! large-sample limits, device-agreement diagnostics and CSV/TOML I/O.

pub mod agreement;
pub mod config;
pub mod error;
pub mod fixture;
pub mod glm;
pub mod io;
pub mod lme;
pub mod model;
pub mod oracle;
pub mod sim;
pub mod stats;
pub mod study;
pub mod two_stage;

pub use error::{Error, Result};
pub use glm::{fit_linear_ols, fit_logistic_irls, wald_interval, GlmFit};
pub use lme::{
    blup_empirical, blup_oracle, fit_balanced_anova, fit_random_intercept, fit_reml_profiled, BlupSource,
    BlupVector, LmeFit,
};
pub use model::{
    build_marginal_cov, build_sigma_u, Family, Method, OutcomePanel, ReplicatePanel, Scenario, VarianceComponents,
};
pub use oracle::{blup_slope_limit, brute_force_limit, naive_slope_limit, PopulationLimit, PopulationMoments};
pub use sim::{generate_dataset, run_monte_carlo, scenario_grid, GridAxes, McSummary, MethodSpec};
pub use two_stage::{estimate, make_design, PipelineSpec, TwoStageFit};
