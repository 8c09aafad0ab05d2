//! Runs a configured grid and renders its tables, figure data and report.

use std::fmt::Write as _;
use std::io::Write;

use crate::config::{ReferenceValue, StudyConfig};
use crate::error::{Error, Result};
use crate::lme::BlupSource;
use crate::model::{Family, Scenario};
use crate::oracle::{blup_limits, naive_limits, PopulationLimit};
use crate::sim::{run_monte_carlo, McSummary, PARAMETER_NAMES};

pub const SUMMARY_HEADER: [&str; 18] = [
    "scenario_id",
    "family",
    "n",
    "J",
    "gamma1",
    "rho",
    "rho_xc",
    "p_miss",
    "method",
    "parameter",
    "true_value",
    "mean_estimate",
    "mean_asymptotic_se",
    "empirical_se",
    "relative_bias_pct",
    "coverage_pct",
    "n_reps",
    "n_converged",
];

pub const FIG_KEYS: [&str; 6] = ["family", "rho", "rho_xc", "method", "gamma1", "n"];

/// Tolerance for agreement with a reference value or an analytic limit:
/// three Monte Carlo SEs or 0.5% of the target, whichever is larger.
pub const AGREEMENT_MC_SES: f64 = 3.0;
pub const AGREEMENT_REL: f64 = 0.005;

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioResult {
    pub scenario: Scenario,
    pub summaries: Vec<McSummary>,
}

/// Runs every scenario of the configuration on the current rayon pool.
pub fn run_study(cfg: &StudyConfig) -> Result<Vec<ScenarioResult>> {
    cfg.scenarios()
        .into_iter()
        .map(|scenario| {
            let summaries = run_monte_carlo(&scenario, &cfg.methods)?;
            Ok(ScenarioResult { scenario, summaries })
        })
        .collect()
}

pub fn run_study_with_threads(cfg: &StudyConfig, threads: usize) -> Result<Vec<ScenarioResult>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::config("threads", e.to_string()))?;
    pool.install(|| run_study(cfg))
}

/// True if any (scenario, method) cell has no converged replication.
pub fn has_failed_cells(results: &[ScenarioResult]) -> bool {
    results
        .iter()
        .any(|r| r.summaries.iter().any(|s| s.n_converged == 0))
}

fn num(v: f64) -> String {
    format!("{v}")
}

pub fn write_summary<W: Write>(results: &[ScenarioResult], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SUMMARY_HEADER)?;
    for r in results {
        let s = &r.scenario;
        for m in &r.summaries {
            for p in &m.parameters {
                w.write_record([
                    m.scenario_id.clone(),
                    s.family.to_string(),
                    s.n.to_string(),
                    s.j.to_string(),
                    num(s.gamma1),
                    num(s.rho),
                    num(s.rho_xc),
                    num(s.p_miss),
                    m.method.clone(),
                    p.parameter.clone(),
                    num(p.true_value),
                    num(p.mean_estimate),
                    num(p.mean_asymptotic_se),
                    num(p.empirical_se),
                    num(p.relative_bias_pct),
                    num(p.coverage_pct),
                    m.n_reps.to_string(),
                    m.n_converged.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-cell `beta_x` metric keyed by figure facet.
fn write_figdata<W: Write>(
    results: &[ScenarioResult],
    writer: W,
    column: &str,
    pick: impl Fn(&crate::sim::ParameterSummary) -> f64,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = FIG_KEYS.to_vec();
    header.push(column);
    w.write_record(&header)?;
    for r in results {
        let s = &r.scenario;
        for m in &r.summaries {
            if let Some(p) = m.parameter("beta_x") {
                w.write_record([
                    s.family.to_string(),
                    num(s.rho),
                    num(s.rho_xc),
                    m.method.clone(),
                    num(s.gamma1),
                    s.n.to_string(),
                    num(pick(p)),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_fig_bias<W: Write>(results: &[ScenarioResult], writer: W) -> Result<()> {
    write_figdata(results, writer, "relative_bias_pct", |p| p.relative_bias_pct)
}

pub fn write_fig_coverage<W: Write>(results: &[ScenarioResult], writer: W) -> Result<()> {
    write_figdata(results, writer, "coverage_pct", |p| p.coverage_pct)
}

/// Per-cell status: `ok`, `partial` (some replications failed) or `failed`.
pub fn write_status<W: Write>(results: &[ScenarioResult], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["scenario_id", "method", "status", "n_failed", "first_failure"])?;
    for r in results {
        for m in &r.summaries {
            let failed = m.n_reps - m.n_converged;
            let status = match (m.n_converged, failed) {
                (0, _) => "failed",
                (_, 0) => "ok",
                _ => "partial",
            };
            w.write_record([
                m.scenario_id.clone(),
                m.method.clone(),
                status.to_string(),
                failed.to_string(),
                m.first_failure.clone().unwrap_or_default(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Closed-form large-sample limit for a summary row, when one exists.
pub fn analytic_limit(s: &Scenario, method: &str) -> Option<PopulationLimit> {
    if s.family != Family::Linear {
        return None;
    }
    match method {
        "naive" => naive_limits(s).ok(),
        "blup_oracle" => blup_limits(s, BlupSource::Oracle).ok(),
        "blup_empirical" => blup_limits(s, BlupSource::Empirical).ok(),
        _ => None,
    }
}

fn within(value: f64, target: f64, mc_se: f64) -> bool {
    (value - target).abs() <= (AGREEMENT_MC_SES * mc_se).max(AGREEMENT_REL * target.abs())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceCheck {
    pub scenario_id: String,
    pub method: String,
    pub parameter: String,
    pub reference: f64,
    pub mc_mean: f64,
    pub mc_se: f64,
    pub analytic: Option<f64>,
    pub agrees_with_reference: bool,
    pub agrees_with_analytic: Option<bool>,
}

impl ReferenceCheck {
    pub fn verdict(&self) -> String {
        match (self.agrees_with_reference, self.agrees_with_analytic) {
            (true, _) => "agrees with reference".into(),
            (false, Some(true)) => format!(
                "DIVERGES from reference {}; matches analytic limit {:.4}",
                self.reference,
                self.analytic.unwrap_or(f64::NAN)
            ),
            (false, Some(false)) => format!(
                "DIVERGES from reference {} and from analytic limit {:.4}",
                self.reference,
                self.analytic.unwrap_or(f64::NAN)
            ),
            (false, None) => format!("DIVERGES from reference {}", self.reference),
        }
    }
}

pub fn reference_checks(results: &[ScenarioResult], refs: &[ReferenceValue]) -> Vec<ReferenceCheck> {
    let mut out = Vec::new();
    for r in results {
        for m in &r.summaries {
            for rv in refs.iter().filter(|rv| rv.matches(&r.scenario, &m.method)) {
                let Some(p) = m.parameter(&rv.parameter) else { continue };
                let mc_se = p.mc_se(m.n_converged);
                let k = PARAMETER_NAMES.iter().position(|&n| n == rv.parameter).unwrap_or(1);
                let analytic = analytic_limit(&r.scenario, &m.method).map(|l| l.as_array()[k]);
                out.push(ReferenceCheck {
                    scenario_id: m.scenario_id.clone(),
                    method: m.method.clone(),
                    parameter: rv.parameter.clone(),
                    reference: rv.value,
                    mc_mean: p.mean_estimate,
                    mc_se,
                    analytic,
                    agrees_with_reference: within(p.mean_estimate, rv.value, mc_se),
                    agrees_with_analytic: analytic.map(|a| within(p.mean_estimate, a, mc_se)),
                });
            }
        }
    }
    out
}

/// Plain-text run report: analytic limits next to Monte Carlo means, then
/// every reference comparison with its verdict.
pub fn render_report(results: &[ScenarioResult], checks: &[ReferenceCheck]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Monte Carlo run report");
    let _ = writeln!(
        out,
        "# agreement tolerance: max({AGREEMENT_MC_SES} Monte Carlo SE, {}% of target)",
        AGREEMENT_REL * 100.0
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "## beta_x: Monte Carlo mean vs large-sample limit");
    for r in results {
        for m in &r.summaries {
            let Some(p) = m.parameter("beta_x") else { continue };
            let limit = analytic_limit(&r.scenario, &m.method).map(|l| l.beta_x);
            let _ = writeln!(
                out,
                "{:<40} {:<18} mean={:.4} mc_se={:.4} limit={} converged={}/{}",
                m.scenario_id,
                m.method,
                p.mean_estimate,
                p.mc_se(m.n_converged),
                limit.map_or("n/a".into(), |l| format!("{l:.4}")),
                m.n_converged,
                m.n_reps
            );
        }
    }
    if !checks.is_empty() {
        let _ = writeln!(out);
        let _ = writeln!(out, "## reference comparisons");
        for c in checks {
            let _ = writeln!(
                out,
                "{:<40} {:<18} {:<7} mean={:.4} reference={} -> {}",
                c.scenario_id,
                c.method,
                c.parameter,
                c.mc_mean,
                c.reference,
                c.verdict()
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{MethodSpec, ParameterSummary};

    fn fake(s: Scenario, method: &str, mean: f64) -> ScenarioResult {
        let parameters = PARAMETER_NAMES
            .iter()
            .map(|&name| ParameterSummary {
                parameter: name.into(),
                true_value: 1.0,
                mean_estimate: mean,
                mean_asymptotic_se: 0.03,
                empirical_se: 0.035,
                relative_bias_pct: 0.0,
                coverage_pct: 95.0,
            })
            .collect();
        ScenarioResult {
            summaries: vec![McSummary {
                scenario_id: s.scenario_id(),
                method: method.into(),
                parameters,
                n_reps: 1000,
                n_converged: 1000,
                first_failure: None,
            }],
            scenario: s,
        }
    }

    #[test]
    fn divergent_reference_is_flagged() {
        let s = Scenario::reference_linear();
        let res = vec![fake(s, "naive", 2.7905)];
        let refs = vec![ReferenceValue {
            family: None,
            gamma1: Some(1.0),
            rho: Some(0.1),
            rho_xc: Some(0.0),
            n: Some(500),
            method: "naive".into(),
            parameter: "beta_x".into(),
            value: 2.834,
        }];
        let checks = reference_checks(&res, &refs);
        assert_eq!(checks.len(), 1);
        assert!(!checks[0].agrees_with_reference);
        assert_eq!(checks[0].agrees_with_analytic, Some(true));
        assert!(render_report(&res, &checks).contains("DIVERGES from reference 2.834"));
    }

    #[test]
    fn summary_row_count() {
        let s = Scenario {
            n: 30,
            n_reps: 5,
            ..Scenario::reference_linear()
        };
        let summaries = run_monte_carlo(&s, &MethodSpec::standard_set()).unwrap();
        let res = vec![ScenarioResult { scenario: s, summaries }];
        let mut buf = Vec::new();
        write_summary(&res, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 4 * 3);
        assert_eq!(text.lines().next().unwrap(), SUMMARY_HEADER.join(","));
    }
}
