//! End-to-end acceptance checks. Runs as a plain binary so every check
//! prints a PASS/FAIL line; exits nonzero if any check fails.

use std::collections::HashMap;
use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::Command;

use blupcal::fixture::{two_device_fixture, FixtureParams};
use blupcal::lme::BlupSource;
use blupcal::oracle::{blup_slope_limit, brute_force_limit, naive_slope_limit};
use blupcal::{
    blup_oracle, build_marginal_cov, fit_balanced_anova, fit_reml_profiled, io, run_monte_carlo, Method, MethodSpec,
    PipelineSpec, ReplicatePanel, Scenario, VarianceComponents,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const BIN: &str = env!("CARGO_BIN_EXE_blupcal");
const CONFIGS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/configs");

type Row = HashMap<String, String>;

struct Run {
    rows: Vec<Row>,
    report: String,
}

impl Run {
    fn one(&self, filter: &[(&str, &str)]) -> &Row {
        let hits: Vec<&Row> = self
            .rows
            .iter()
            .filter(|r| filter.iter().all(|(k, v)| r[*k] == *v))
            .collect();
        assert_eq!(hits.len(), 1, "expected exactly one row for {filter:?}");
        hits[0]
    }
}

fn f(row: &Row, col: &str) -> f64 {
    row[col].parse().unwrap()
}

fn simulate(config_text: &str, dir: &Path, threads: Option<&str>) -> Run {
    fs::create_dir_all(dir).unwrap();
    let cfg = dir.join("study.toml");
    fs::write(&cfg, config_text).unwrap();
    let out = dir.join("out");
    let mut cmd = Command::new(BIN);
    cmd.args(["simulate", "--config"]).arg(&cfg).arg("--out").arg(&out);
    if let Some(k) = threads {
        cmd.args(["--threads", k]);
    }
    let status = cmd.status().unwrap();
    assert!(status.success(), "simulate failed: {status}");
    let mut rdr = csv::Reader::from_path(out.join("summary.csv")).unwrap();
    let rows = rdr.deserialize().map(|r| r.unwrap()).collect();
    Run {
        rows,
        report: fs::read_to_string(out.join("report.txt")).unwrap(),
    }
}

/// A bundled study restricted to `n = 500`.
fn bundled_at_500(name: &str, grid_line: &str) -> String {
    let text = fs::read_to_string(Path::new(CONFIGS).join(name)).unwrap();
    assert!(text.contains(grid_line), "{name} lacks `{grid_line}`");
    text.replace(grid_line, "n = [500]")
}

struct Outcome {
    id: usize,
    pass: bool,
    detail: String,
}

fn report(results: &mut Vec<Outcome>, id: usize, pass: bool, detail: String) {
    println!(
        "criterion {id:>2} [{}] {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    results.push(Outcome { id, pass, detail });
}

fn sel<'a>(g: &'a str, rho: &'a str, rxc: &'a str, method: &'a str, param: &'a str) -> [(&'a str, &'a str); 5] {
    [
        ("gamma1", g),
        ("rho", rho),
        ("rho_xc", rxc),
        ("method", method),
        ("parameter", param),
    ]
}

fn criterion_1(lin: &Run) -> (bool, String) {
    let r = lin.one(&sel("2", "0.1", "0", "naive", "beta_x"));
    let m = f(r, "mean_estimate");
    ((1.450..=1.470).contains(&m), format!("naive gamma1=2 mean beta_x = {m:.4}, need [1.450, 1.470]"))
}

fn criterion_2(lin: &Run) -> (bool, String) {
    let mut worst: (f64, String) = (0.0, String::new());
    for g in ["1", "2"] {
        for rho in ["0.1", "0.3"] {
            for (param, target) in [("beta_x", 2.95), ("beta_c", 3.0)] {
                let m = f(lin.one(&sel(g, rho, "0", "blup_oracle", param)), "mean_estimate");
                let rel = (m - target).abs() / target;
                if rel >= worst.0 {
                    worst = (rel, format!("{param} gamma1={g} rho={rho}: {m:.4}"));
                }
            }
        }
    }
    (
        worst.0 < 0.01,
        format!("blup_oracle worst deviation {:.3}% ({}), need < 1%", 100.0 * worst.0, worst.1),
    )
}

fn criterion_3(lin: &Run) -> (bool, String) {
    let mut ok = true;
    let mut blup = Vec::new();
    for g in ["1", "2"] {
        for rho in ["0.1", "0.3"] {
            let c = f(lin.one(&sel(g, rho, "0", "blup_oracle", "beta_x")), "coverage_pct");
            ok &= (93.0..=98.0).contains(&c);
            blup.push(c);
        }
    }
    let mut naive = Vec::new();
    for rho in ["0.1", "0.3"] {
        let c = f(lin.one(&sel("2", rho, "0", "naive", "beta_x")), "coverage_pct");
        ok &= c <= 1.0;
        naive.push(c);
    }
    (
        ok,
        format!("blup_oracle beta_x coverage {blup:?} in [93, 98]; naive gamma1=2 coverage {naive:?} <= 1"),
    )
}

fn criterion_4(bin: &Run) -> (bool, String) {
    let naive = f(bin.one(&sel("2", "0.1", "0", "naive", "beta_x")), "mean_estimate");
    let blup = f(bin.one(&sel("2", "0.1", "0", "blup_oracle", "beta_x")), "mean_estimate");
    (
        (0.043..=0.053).contains(&naive) && (0.095..=0.107).contains(&blup),
        format!("logistic naive gamma1=2 {naive:.4} in [0.043, 0.053]; blup_oracle {blup:.4} in [0.095, 0.107]"),
    )
}

fn criterion_5(lin: &Run, bin: &Run) -> (bool, String) {
    let mut worst = (0.0, String::new());
    let mut cells = 0;
    for run in [lin, bin] {
        for r in run.rows.iter().filter(|r| r["method"].starts_with("blup")) {
            let (a, e) = (f(r, "mean_asymptotic_se"), f(r, "empirical_se"));
            let rel = (a - e).abs() / e;
            cells += 1;
            if rel >= worst.0 {
                worst = (rel, format!("{} {} {}", r["scenario_id"], r["method"], r["parameter"]));
            }
        }
    }
    (
        worst.0 < 0.20,
        format!("{cells} BLUP rows at n=500, worst |ASE-ESE|/ESE = {:.3} ({}), need < 0.20", worst.0, worst.1),
    )
}

fn criterion_6(lin: &Run) -> (bool, String) {
    let m = f(lin.one(&sel("1", "0.1", "0", "naive", "beta_x")), "mean_estimate");
    let flagged = lin.report.lines().any(|l| {
        l.contains("linear-g1-rho0.1-rxc0-n500") && l.contains(" naive ") && l.contains("DIVERGES from reference 2.834")
    });
    (
        (m - 2.7905).abs() <= 0.02 && flagged,
        format!("naive gamma1=1 mean beta_x = {m:.4} (limit 2.7905 +/- 0.02); divergence from 2.834 flagged: {flagged}"),
    )
}

fn criterion_7() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xB1_0B);
    let mut worst_blup: f64 = 0.0;
    for _ in 0..1000 {
        let j = rng.random_range(1..=10);
        let vc = VarianceComponents::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(0.2..3.0) * if rng.random::<bool>() { 1.0 } else { -1.0 },
            rng.random_range(0.05..10.0),
            rng.random_range(0.05..10.0),
            rng.random_range(0.0..0.95),
        )
        .unwrap();
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..j).map(|_| rng.random_range(-10.0..10.0)).collect())
            .collect();
        let panel = ReplicatePanel::from_rows(&rows).unwrap();
        let blup = blup_oracle(&panel, &vc).unwrap();
        let vinv = build_marginal_cov(&vc, j).cholesky().unwrap().inverse();
        let ones = DVector::from_element(j, 1.0);
        let signal = vc.gamma1 * vc.gamma1 * vc.sigma_x2;
        let k_matrix = signal * (ones.transpose() * &vinv * &ones)[(0, 0)];
        for (i, row) in rows.iter().enumerate() {
            let centered = DVector::from_iterator(j, row.iter().map(|w| w - vc.gamma0));
            // BLUP of gamma1 * X_i, divided back onto the latent scale.
            let x_matrix = signal * (ones.transpose() * &vinv * centered)[(0, 0)] / vc.gamma1;
            worst_blup = worst_blup
                .max((blup.shrinkage[i] - k_matrix).abs())
                .max((blup.x_hat[i] - x_matrix).abs() / x_matrix.abs().max(1.0));
        }
    }

    let mut worst_anova: f64 = 0.0;
    let mut panels = 0;
    while panels < 100 {
        let (n, j) = (rng.random_range(3..40), rng.random_range(2..9));
        let tau = rng.random_range(0.5..3.0);
        let sigma = rng.random_range(0.2..2.0);
        let mu = rng.random_range(-5.0..5.0);
        let mut values = DMatrix::zeros(n, j);
        for i in 0..n {
            let b = tau * normal(&mut rng);
            for r in 0..j {
                values[(i, r)] = mu + b + sigma * normal(&mut rng);
            }
        }
        let rows: Vec<Vec<f64>> = (0..n).map(|i| values.row(i).iter().copied().collect()).collect();
        let panel = ReplicatePanel::from_rows(&rows).unwrap();
        let anova = fit_balanced_anova(&panel).unwrap();
        if anova.tau2 <= 0.0 {
            // ANOVA truncates at the boundary; REML is compared on interior panels only.
            continue;
        }
        let reml = fit_reml_profiled(&panel).unwrap();
        worst_anova = worst_anova
            .max((anova.tau2 - reml.tau2).abs() / anova.tau2.max(1.0))
            .max((anova.sigma2 - reml.sigma2).abs() / anova.sigma2.max(1.0))
            .max((anova.gamma0_hat() - reml.gamma0_hat()).abs());
        panels += 1;
    }
    (
        worst_blup <= 1e-10 && worst_anova <= 1e-6,
        format!(
            "closed form vs V^-1 over 1000 draws: {worst_blup:.2e} (<= 1e-10); ANOVA vs REML over 100 panels: {worst_anova:.2e} (<= 1e-6)"
        ),
    )
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn criterion_8() -> (bool, String) {
    const N: usize = 1_000_000;
    let mut worst = (0.0, String::new());
    for gamma1 in [1.0, 2.0] {
        for rho in [0.1, 0.3] {
            for rho_xc in [0.0, 0.5] {
                let s = Scenario {
                    gamma1,
                    rho,
                    rho_xc,
                    ..Scenario::reference_linear()
                };
                let naive = naive_slope_limit(&s).unwrap();
                let bf = brute_force_limit(&s, &PipelineSpec::naive(s.family), N).unwrap();
                let z = (bf.coefficients[1] - naive).abs() / bf.asymptotic_se[1];
                if z >= worst.0 {
                    worst = (z, format!("naive g{gamma1} rho{rho} rxc{rho_xc}"));
                }
                let (bx, bc) = blup_slope_limit(&s, BlupSource::Oracle).unwrap();
                let spec = PipelineSpec::blup_oracle(s.family, s.variance_components().unwrap());
                let bf = brute_force_limit(&s, &spec, N).unwrap();
                for (k, lim) in [(1, bx), (2, bc)] {
                    let z = (bf.coefficients[k] - lim).abs() / bf.asymptotic_se[k];
                    if z >= worst.0 {
                        worst = (z, format!("blup_oracle coef {k} g{gamma1} rho{rho} rxc{rho_xc}"));
                    }
                }
            }
        }
    }
    (
        worst.0 <= 3.0,
        format!("8 cells, n=1e6: worst |brute - limit| = {:.2} SE ({}), need <= 3", worst.0, worst.1),
    )
}

fn criterion_9(dir: &Path) -> (bool, String) {
    // Determinism across thread counts.
    let small = fs::read_to_string(Path::new(CONFIGS).join("continuous.toml"))
        .unwrap()
        .replace("n = [50, 100, 500]", "n = [60]")
        .replace("n_reps = 1000", "n_reps = 40");
    let a = simulate(&small, &dir.join("t1"), Some("1"));
    let b = simulate(&small, &dir.join("t4"), Some("4"));
    let bytes = |d: &str| fs::read(dir.join(d).join("out/summary.csv")).unwrap();
    let deterministic = bytes("t1") == bytes("t4") && a.rows.len() == 8 * 4 * 3 && a.rows == b.rows;

    // MCAR robustness of the empirical BLUP.
    let methods = [MethodSpec::new(Method::BlupEmpirical)];
    let full = Scenario::reference_linear();
    let masked = Scenario { p_miss: 0.15, ..full.clone() };
    let bias = |s: &Scenario| {
        run_monte_carlo(s, &methods).unwrap()[0]
            .parameter("beta_x")
            .unwrap()
            .relative_bias_pct
    };
    let (b0, b15) = (bias(&full), bias(&masked));
    let mcar = (b15 - b0).abs() < 1.0;

    // Attenuation: analytic limit strictly decreasing along each axis.
    let base = Scenario::reference_linear();
    let limit = |s: Scenario| naive_slope_limit(&s).unwrap();
    let strictly_decreasing = |xs: Vec<f64>| xs.windows(2).all(|w| w[1] < w[0]);
    let in_rho = strictly_decreasing((0..10).map(|k| limit(Scenario { rho: 0.09 * k as f64, ..base.clone() })).collect());
    let in_su = strictly_decreasing(
        (1..=10).map(|k| limit(Scenario { sigma_u: 0.3 * k as f64, ..base.clone() })).collect(),
    );
    let in_g = strictly_decreasing(
        (0..10).map(|k| limit(Scenario { gamma1: 1.0 + 0.25 * k as f64, ..base.clone() })).collect(),
    );
    // Monte Carlo confirmation on the same three axes.
    let mc = |s: Scenario| {
        let s = Scenario { n_reps: 200, ..s };
        run_monte_carlo(&s, &[MethodSpec::new(Method::Naive)]).unwrap()[0]
            .parameter("beta_x")
            .unwrap()
            .mean_estimate
    };
    let mc_ok = strictly_decreasing(vec![
        mc(Scenario { rho: 0.0, ..base.clone() }),
        mc(Scenario { rho: 0.3, ..base.clone() }),
        mc(Scenario { rho: 0.6, ..base.clone() }),
    ]) && strictly_decreasing(vec![
        mc(Scenario { sigma_u: 0.5, ..base.clone() }),
        mc(Scenario { sigma_u: 1.0, ..base.clone() }),
        mc(Scenario { sigma_u: 2.0, ..base.clone() }),
    ]) && strictly_decreasing(vec![
        mc(Scenario { gamma1: 1.0, ..base.clone() }),
        mc(Scenario { gamma1: 1.5, ..base.clone() }),
        mc(Scenario { gamma1: 2.0, ..base.clone() }),
    ]);
    let mono = in_rho && in_su && in_g && mc_ok;
    (
        deterministic && mcar && mono,
        format!(
            "threads 1 vs 4 identical: {deterministic}; MCAR bias shift {:.3} pp (< 1): {mcar}; monotone in rho/sigma_u/gamma1: {mono}",
            (b15 - b0).abs()
        ),
    )
}

fn analyze(dir: &Path, method: &str) -> serde_json::Value {
    let out = dir.join(format!("analyze_{method}.json"));
    let status = Command::new(BIN)
        .arg("analyze")
        .arg("--replicates")
        .arg(dir.join("device_a.csv"))
        .arg("--outcomes")
        .arg(dir.join("outcomes.csv"))
        .args(["--family", "linear", "--outcome", "bmi", "--covariates", "age,female"])
        .args(["--gamma1", "1", "--method", method, "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success(), "analyze {method} failed");
    serde_json::from_reader(File::open(out).unwrap()).unwrap()
}

fn criterion_10(dir: &Path) -> (bool, String) {
    fs::create_dir_all(dir).unwrap();
    let fx = two_device_fixture(&FixtureParams::default()).unwrap();
    io::write_replicates(&fx.device_a, File::create(dir.join("device_a.csv")).unwrap()).unwrap();
    io::write_replicates(&fx.device_b, File::create(dir.join("device_b.csv")).unwrap()).unwrap();
    io::write_outcomes(&fx.bmi, "bmi", File::create(dir.join("outcomes.csv")).unwrap()).unwrap();

    let bx = |v: &serde_json::Value| v["coefficients"][1]["estimate"].as_f64().unwrap();
    let naive = bx(&analyze(dir, "naive"));
    let blup = bx(&analyze(dir, "blup"));

    let out = dir.join("compare.json");
    let status = Command::new(BIN)
        .arg("compare")
        .arg("--device-a")
        .arg(dir.join("device_a.csv"))
        .arg("--device-b")
        .arg(dir.join("device_b.csv"))
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let cmp: serde_json::Value = serde_json::from_reader(File::open(out).unwrap()).unwrap();
    let r = cmp["pearson_r"].as_f64().unwrap();
    (
        naive > 0.0 && blup > naive && (r - 0.64).abs() <= 0.03,
        format!("analyze naive beta_x {naive:.5} < blup {blup:.5}, both > 0; compare r = {r:.4} (0.64 +/- 0.03)"),
    )
}

fn main() {
    let scratch = tempfile::tempdir().unwrap();
    let dir: PathBuf = scratch.path().to_path_buf();
    let mut results = Vec::new();

    let lin = simulate(
        &bundled_at_500("continuous.toml", "n = [50, 100, 500]"),
        &dir.join("linear"),
        None,
    );
    let bin = simulate(
        &bundled_at_500("binary.toml", "n = [100, 200, 500]"),
        &dir.join("binary"),
        None,
    );

    let checks: Vec<(usize, Box<dyn Fn() -> (bool, String) + '_>)> = vec![
        (1, Box::new(|| criterion_1(&lin))),
        (2, Box::new(|| criterion_2(&lin))),
        (3, Box::new(|| criterion_3(&lin))),
        (4, Box::new(|| criterion_4(&bin))),
        (5, Box::new(|| criterion_5(&lin, &bin))),
        (6, Box::new(|| criterion_6(&lin))),
        (7, Box::new(criterion_7)),
        (8, Box::new(criterion_8)),
        (9, Box::new(|| criterion_9(&dir.join("c9")))),
        (10, Box::new(|| criterion_10(&dir.join("c10")))),
    ];
    for (id, check) in checks {
        let (pass, detail) = check();
        report(&mut results, id, pass, detail);
    }

    let failed: Vec<_> = results.iter().filter(|o| !o.pass).collect();
    println!("acceptance: {}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        for o in &failed {
            eprintln!("failed criterion {}: {}", o.id, o.detail);
        }
        std::process::exit(1);
    }
}
