//! Data generation and the Monte Carlo study.
//!
//! Every replication draws from its own ChaCha stream keyed by
//! `(seed, scenario_id, replication, stream)`, so results do not depend on
//! the order or the number of threads that execute replications.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Family, Method, OutcomePanel, ReplicatePanel, Scenario};
use crate::two_stage::{estimate, PipelineSpec, TwoStageFit};

pub const PARAMETER_NAMES: [&str; 3] = ["beta0", "beta_x", "beta_c"];

const STREAM_DATA: u64 = 0;
const STREAM_MASK: u64 = 1;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Independent RNG for one `(seed, scenario, replication, stream)` cell.
pub fn substream(seed: u64, scenario_id: &str, rep_index: u64, stream: u64) -> ChaCha12Rng {
    let mut state = seed ^ fnv1a(scenario_id.as_bytes()).rotate_left(17);
    let mut rep_state = rep_index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    state ^= splitmix64(&mut rep_state);
    state = state.wrapping_add(stream.wrapping_mul(0xA24B_AED4_963E_E407));
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedDataset {
    pub x: DVector<f64>,
    pub panel: ReplicatePanel,
    pub outcomes: OutcomePanel,
    pub scenario_id: String,
    pub rep_index: u64,
}

impl GeneratedDataset {
    /// Order-sensitive hash over the bit patterns of all generated values.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut feed = |v: u64| {
            for b in v.to_le_bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        self.x.iter().for_each(|v| feed(v.to_bits()));
        self.panel.values().iter().for_each(|v| feed(v.to_bits()));
        self.panel.observed().iter().for_each(|&o| feed(o as u64));
        self.outcomes.y.iter().for_each(|v| feed(v.to_bits()));
        self.outcomes.covariates.iter().for_each(|v| feed(v.to_bits()));
        h
    }
}

/// Draws one dataset from the replicate and outcome models.
pub fn generate_dataset(scenario: &Scenario, rep_index: u64) -> Result<GeneratedDataset> {
    scenario.validate()?;
    let id = scenario.scenario_id();
    let mut rng = substream(scenario.seed, &id, rep_index, STREAM_DATA);
    let (n, j) = (scenario.n, scenario.j);
    let s = scenario;
    let cross = (1.0 - s.rho_xc * s.rho_xc).sqrt();
    let shared = s.rho.sqrt();
    let own = (1.0 - s.rho).sqrt();

    let mut x = DVector::zeros(n);
    let mut c = DMatrix::zeros(n, 1);
    let mut values = DMatrix::zeros(n, j);
    let mut y = DVector::zeros(n);
    for i in 0..n {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        let xi = s.mu_x + s.sigma_x * z1;
        let ci = s.mu_c + s.sigma_c * (s.rho_xc * z1 + cross * z2);
        x[i] = xi;
        c[(i, 0)] = ci;
        let subject_factor: f64 = rng.sample(StandardNormal);
        for r in 0..j {
            let z: f64 = rng.sample(StandardNormal);
            let u = s.sigma_u * (shared * subject_factor + own * z);
            values[(i, r)] = s.gamma0 + s.gamma1 * xi + u;
        }
        let eta = s.beta0 + s.beta_x * xi + s.beta_c * ci;
        y[i] = match s.family {
            Family::Linear => eta + s.sigma_eps * rng.sample::<f64, _>(StandardNormal),
            Family::Logistic => {
                let p = 1.0 / (1.0 + (-eta).exp());
                if rng.random::<f64>() < p {
                    1.0
                } else {
                    0.0
                }
            }
        };
    }

    let mut observed = DMatrix::from_element(n, j, true);
    if s.p_miss > 0.0 {
        let mut mask_rng = substream(s.seed, &id, rep_index, STREAM_MASK);
        for i in 0..n {
            loop {
                for r in 0..j {
                    observed[(i, r)] = mask_rng.random::<f64>() >= s.p_miss;
                }
                if (0..j).any(|r| observed[(i, r)]) {
                    break;
                }
            }
        }
    }

    let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
    let panel = ReplicatePanel::new(ids.clone(), values, observed, None)?;
    let outcomes = OutcomePanel::new(ids, y, c, vec!["c".into()])?;
    Ok(GeneratedDataset {
        x,
        panel,
        outcomes,
        scenario_id: id,
        rep_index,
    })
}

/// A method as named in a study configuration; resolved against each
/// scenario's generating parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub method: Method,
    #[serde(default)]
    pub condition_on_c: bool,
}

impl MethodSpec {
    pub fn new(method: Method) -> Self {
        MethodSpec {
            method,
            condition_on_c: false,
        }
    }

    pub fn label(&self) -> String {
        if self.condition_on_c {
            format!("{}_cc", self.method)
        } else {
            self.method.to_string()
        }
    }

    /// BLUP arms receive the true `gamma1`, and the oracle arm the true
    /// variance components; the naive arm uses the raw subject mean.
    pub fn resolve(&self, scenario: &Scenario) -> Result<PipelineSpec> {
        let mut spec = match self.method {
            Method::Naive => PipelineSpec::naive(scenario.family),
            Method::BlupOracle => PipelineSpec::blup_oracle(scenario.family, scenario.variance_components()?),
            Method::BlupEmpirical => PipelineSpec::blup_empirical(scenario.family, scenario.gamma1),
        };
        spec.condition_on_c = self.condition_on_c;
        spec.validate()?;
        Ok(spec)
    }

    /// The four arms of the bundled continuous and binary studies.
    pub fn standard_set() -> Vec<MethodSpec> {
        vec![
            MethodSpec::new(Method::Naive),
            MethodSpec::new(Method::BlupOracle),
            MethodSpec::new(Method::BlupEmpirical),
            MethodSpec {
                method: Method::BlupEmpirical,
                condition_on_c: true,
            },
        ]
    }
}

/// Outcome of one method in one replication.
#[derive(Debug, Clone, PartialEq)]
pub enum MethodOutcome {
    Fitted(TwoStageFit),
    Failed(String),
}

impl MethodOutcome {
    pub fn converged_fit(&self) -> Option<&TwoStageFit> {
        match self {
            MethodOutcome::Fitted(f) if f.converged && f.coefficients.len() == 3 => Some(f),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub rep_index: u64,
    pub dataset_checksum: u64,
    pub outcomes: Vec<MethodOutcome>,
}

/// Generates one dataset and runs every method on it.
pub fn run_replication(scenario: &Scenario, methods: &[PipelineSpec], rep_index: u64) -> Result<ReplicationRecord> {
    let data = generate_dataset(scenario, rep_index)?;
    let outcomes = methods
        .iter()
        .map(|spec| match estimate(&data.panel, &data.outcomes, spec) {
            Ok(fit) => MethodOutcome::Fitted(fit),
            Err(e) => MethodOutcome::Failed(e.to_string()),
        })
        .collect();
    Ok(ReplicationRecord {
        rep_index,
        dataset_checksum: data.checksum(),
        outcomes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterSummary {
    pub parameter: String,
    pub true_value: f64,
    pub mean_estimate: f64,
    pub mean_asymptotic_se: f64,
    /// Standard deviation of the point estimates across replications.
    pub empirical_se: f64,
    pub relative_bias_pct: f64,
    pub coverage_pct: f64,
}

impl ParameterSummary {
    /// Monte Carlo standard error of `mean_estimate`.
    pub fn mc_se(&self, n_converged: usize) -> f64 {
        self.empirical_se / (n_converged.max(1) as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McSummary {
    pub scenario_id: String,
    pub method: String,
    pub parameters: Vec<ParameterSummary>,
    pub n_reps: usize,
    pub n_converged: usize,
    /// First failure message, when any replication failed.
    pub first_failure: Option<String>,
}

impl McSummary {
    pub fn parameter(&self, name: &str) -> Option<&ParameterSummary> {
        self.parameters.iter().find(|p| p.parameter == name)
    }
}

/// Running sums for one method; merged in replication order.
#[derive(Debug, Clone, Default)]
struct Accumulator {
    n: usize,
    sum: [f64; 3],
    sum_sq: [f64; 3],
    sum_se: [f64; 3],
    covered: [usize; 3],
    first_failure: Option<String>,
}

impl Accumulator {
    fn push(&mut self, outcome: &MethodOutcome, truth: &[f64; 3]) {
        match outcome.converged_fit() {
            Some(fit) => {
                self.n += 1;
                for k in 0..3 {
                    let b = fit.coefficients[k];
                    self.sum[k] += b;
                    self.sum_sq[k] += b * b;
                    self.sum_se[k] += fit.asymptotic_se[k];
                    if fit.ci_lower[k] <= truth[k] && truth[k] <= fit.ci_upper[k] {
                        self.covered[k] += 1;
                    }
                }
            }
            None => {
                if self.first_failure.is_none() {
                    self.first_failure = Some(match outcome {
                        MethodOutcome::Failed(msg) => msg.clone(),
                        MethodOutcome::Fitted(f) => f
                            .diagnostic
                            .clone()
                            .unwrap_or_else(|| "did not converge".into()),
                    });
                }
            }
        }
    }

    fn finish(self, scenario_id: &str, method: String, truth: &[f64; 3], n_reps: usize) -> McSummary {
        let nf = self.n as f64;
        let parameters = (0..3)
            .map(|k| {
                if self.n == 0 {
                    return ParameterSummary {
                        parameter: PARAMETER_NAMES[k].into(),
                        true_value: truth[k],
                        mean_estimate: f64::NAN,
                        mean_asymptotic_se: f64::NAN,
                        empirical_se: f64::NAN,
                        relative_bias_pct: f64::NAN,
                        coverage_pct: f64::NAN,
                    };
                }
                let mean = self.sum[k] / nf;
                let var = if self.n > 1 {
                    ((self.sum_sq[k] - nf * mean * mean) / (nf - 1.0)).max(0.0)
                } else {
                    0.0
                };
                ParameterSummary {
                    parameter: PARAMETER_NAMES[k].into(),
                    true_value: truth[k],
                    mean_estimate: mean,
                    mean_asymptotic_se: self.sum_se[k] / nf,
                    empirical_se: var.sqrt(),
                    relative_bias_pct: 100.0 * (mean - truth[k]).abs() / truth[k].abs(),
                    coverage_pct: 100.0 * self.covered[k] as f64 / nf,
                }
            })
            .collect();
        McSummary {
            scenario_id: scenario_id.to_string(),
            method,
            parameters,
            n_reps,
            n_converged: self.n,
            first_failure: self.first_failure,
        }
    }
}

/// Runs the Monte Carlo study for one scenario on the current rayon pool.
///
/// All methods see the same datasets. Replication results are collected in
/// index order before reduction, so summaries are bitwise reproducible.
pub fn run_monte_carlo(scenario: &Scenario, methods: &[MethodSpec]) -> Result<Vec<McSummary>> {
    scenario.validate()?;
    if methods.is_empty() {
        return Err(Error::config("methods", "at least one method is required"));
    }
    let specs: Vec<PipelineSpec> = methods
        .iter()
        .map(|m| m.resolve(scenario))
        .collect::<Result<_>>()?;
    let records: Vec<Result<ReplicationRecord>> = (0..scenario.n_reps as u64)
        .into_par_iter()
        .map(|r| run_replication(scenario, &specs, r))
        .collect();

    let truth = scenario.true_coefficients();
    let mut acc = vec![Accumulator::default(); methods.len()];
    for record in records {
        let record = record?;
        for (a, outcome) in acc.iter_mut().zip(&record.outcomes) {
            a.push(outcome, &truth);
        }
    }
    let id = scenario.scenario_id();
    Ok(acc
        .into_iter()
        .zip(methods)
        .map(|(a, m)| a.finish(&id, m.label(), &truth, scenario.n_reps))
        .collect())
}

/// [`run_monte_carlo`] on a dedicated pool of `threads` workers.
pub fn run_monte_carlo_with_threads(scenario: &Scenario, methods: &[MethodSpec], threads: usize) -> Result<Vec<McSummary>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::config("threads", e.to_string()))?;
    pool.install(|| run_monte_carlo(scenario, methods))
}

/// Factor levels crossed by [`scenario_grid`]. Empty axes keep the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxes {
    #[serde(default)]
    pub rho: Vec<f64>,
    #[serde(default)]
    pub rho_xc: Vec<f64>,
    #[serde(default)]
    pub gamma1: Vec<f64>,
    #[serde(default)]
    pub n: Vec<usize>,
    #[serde(default)]
    pub p_miss: Vec<f64>,
}

impl GridAxes {
    pub fn reference_linear() -> Self {
        GridAxes {
            rho: vec![0.1, 0.3],
            rho_xc: vec![0.0, 0.5],
            gamma1: vec![1.0, 2.0],
            n: vec![50, 100, 500],
            p_miss: Vec::new(),
        }
    }

    pub fn reference_logistic() -> Self {
        GridAxes {
            n: vec![100, 200, 500],
            ..Self::reference_linear()
        }
    }
}

/// Cross product of the grid levels over `base`, ordered by
/// `gamma1, rho, rho_xc, p_miss, n`.
pub fn scenario_grid(base: &Scenario, axes: &GridAxes) -> Vec<Scenario> {
    fn levels<T: Copy>(axis: &[T], base: T) -> Vec<T> {
        if axis.is_empty() {
            vec![base]
        } else {
            axis.to_vec()
        }
    }
    let mut out = Vec::new();
    for &gamma1 in &levels(&axes.gamma1, base.gamma1) {
        for &rho in &levels(&axes.rho, base.rho) {
            for &rho_xc in &levels(&axes.rho_xc, base.rho_xc) {
                for &p_miss in &levels(&axes.p_miss, base.p_miss) {
                    for &n in &levels(&axes.n, base.n) {
                        out.push(Scenario {
                            gamma1,
                            rho,
                            rho_xc,
                            p_miss,
                            n,
                            ..base.clone()
                        });
                    }
                }
            }
        }
    }
    out
}
