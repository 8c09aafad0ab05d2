use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use blupcal::config::StudyConfig;
use blupcal::lme::BlupSource;
use blupcal::oracle::{blup_slope_limit, brute_force_limit, naive_slope_limit};
use blupcal::stats::wald_p_value;
use blupcal::study::{
    has_failed_cells, reference_checks, render_report, run_study, run_study_with_threads, write_fig_bias,
    write_fig_coverage, write_status, write_summary,
};
use blupcal::{agreement, io, Error, Family, PipelineSpec};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_PARTIAL: u8 = 4;

#[derive(Parser)]
#[command(name = "blupcal", version, about = "Two-stage BLUP measurement-error correction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte Carlo grid and write summary tables.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "BLUPCAL_THREADS")]
        threads: Option<usize>,
    },
    /// Fit the two-stage model to replicate and outcome CSVs.
    Analyze {
        #[arg(long)]
        replicates: PathBuf,
        #[arg(long)]
        outcomes: PathBuf,
        #[arg(long, value_enum, default_value = "linear")]
        family: FamilyArg,
        #[arg(long)]
        outcome: String,
        #[arg(long, value_delimiter = ',')]
        covariates: Vec<String>,
        #[arg(long, default_value_t = 1.0)]
        gamma1: f64,
        #[arg(long, value_enum, default_value = "blup")]
        method: MethodArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Agreement between two devices over shared subjects.
    Compare {
        #[arg(long)]
        device_a: PathBuf,
        #[arg(long)]
        device_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print large-sample limits for every scenario in a config.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        /// Also fit one replication with this many subjects per scenario.
        #[arg(long)]
        brute_force: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Linear,
    Logistic,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Linear => Family::Linear,
            FamilyArg::Logistic => Family::Logistic,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Blup,
    Naive,
}

enum Failure {
    Config(String),
    Data(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn load_config(path: &Path) -> Result<StudyConfig, Failure> {
    StudyConfig::from_path(path).map_err(|e| Failure::Config(e.to_string()))
}

fn simulate(config: &Path, out: &Path, threads: Option<usize>) -> Result<bool, Failure> {
    let cfg = load_config(config)?;
    if threads == Some(0) {
        return Err(Failure::Config("invalid value for `threads`: must be at least 1".into()));
    }
    std::fs::create_dir_all(out)?;
    let results = match threads {
        Some(k) => run_study_with_threads(&cfg, k)?,
        None => run_study(&cfg)?,
    };
    write_summary(&results, create(&out.join("summary.csv"))?)?;
    write_fig_bias(&results, create(&out.join("figdata_bias.csv"))?)?;
    write_fig_coverage(&results, create(&out.join("figdata_coverage.csv"))?)?;
    write_status(&results, create(&out.join("status.csv"))?)?;
    let checks = reference_checks(&results, &cfg.reference);
    let report = render_report(&results, &checks);
    create(&out.join("report.txt"))?.write_all(report.as_bytes())?;
    for c in checks.iter().filter(|c| !c.agrees_with_reference) {
        eprintln!("note: {} {} {}: {}", c.scenario_id, c.method, c.parameter, c.verdict());
    }
    Ok(!has_failed_cells(&results))
}

fn p_label(p: f64) -> String {
    if p < 0.001 {
        "<0.001".into()
    } else {
        format!("{p:.3}")
    }
}

#[allow(clippy::too_many_arguments)]
fn analyze(
    replicates: &Path,
    outcomes: &Path,
    family: Family,
    outcome: &str,
    covariates: &[String],
    gamma1: f64,
    method: MethodArg,
    out: &Path,
) -> Result<(), Failure> {
    if gamma1 == 0.0 || !gamma1.is_finite() {
        return Err(Failure::Config("invalid value for `gamma1`: must be finite and nonzero".into()));
    }
    let panel = io::read_replicates(open(replicates)?)?;
    let outcome_panel = io::read_outcomes(open(outcomes)?, outcome, covariates)?;
    let (panel, outcome_panel) = io::align(&panel, &outcome_panel)?;
    let spec = match method {
        MethodArg::Blup => PipelineSpec::blup_empirical(family, gamma1),
        MethodArg::Naive => PipelineSpec::naive(family),
    };
    let fit = blupcal::estimate(&panel, &outcome_panel, &spec)?;

    let mut names = vec!["intercept".to_string(), "x".to_string()];
    names.extend(covariates.iter().cloned());
    let rows: Vec<_> = names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let (b, se) = (fit.coefficients[k], fit.asymptotic_se[k]);
            let z = b / se;
            let p = wald_p_value(z);
            json!({
                "name": name,
                "estimate": b,
                "se": se,
                "z": z,
                "p_value": p,
                "p_value_label": p_label(p),
                "ci_lower": fit.ci_lower[k],
                "ci_upper": fit.ci_upper[k],
            })
        })
        .collect();
    let stage1 = fit.stage1.as_ref().map(|s| {
        json!({
            "gamma0": s.gamma0_hat(),
            "tau2": s.tau2,
            "sigma2": s.sigma2,
            "converged": s.converged,
        })
    });
    let doc = json!({
        "method": fit.method.as_str(),
        "family": family.to_string(),
        "outcome": outcome,
        "gamma1": gamma1,
        "n_used": fit.n_used,
        "converged": fit.converged,
        "coefficients": rows,
        "stage1": stage1,
        "diagnostic": fit.diagnostic,
        "notes": [
            "standard errors are Wald SEs; for blup they add a delta-method term for the estimated exposure mean, treating variance components as known",
            "the blup exposure is centered at the estimated population mean; x is per unit of the replicate measure",
        ],
    });
    write_json(out, &doc)
}

fn write_json(out: &Path, doc: &serde_json::Value) -> Result<(), Failure> {
    let mut w = create(out)?;
    serde_json::to_writer_pretty(&mut w, doc).map_err(|e| Failure::Data(e.to_string()))?;
    writeln!(w)?;
    Ok(())
}

fn compare(a: &Path, b: &Path, out: &Path) -> Result<(), Failure> {
    let pa = io::read_replicates(open(a)?)?;
    let pb = io::read_replicates(open(b)?)?;
    let report = agreement::compare(&pa, &pb)?;
    let doc = serde_json::to_value(&report).map_err(|e| Failure::Data(e.to_string()))?;
    write_json(out, &doc)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

fn oracle(config: &Path, brute_force: Option<usize>) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let mut header = format!(
        "{:<44} {:>8} {:>10} {:>10} {:>10} {:>10}",
        "scenario_id", "naive_bx", "oracle_bx", "oracle_bc", "emp_bx", "emp_bc"
    );
    if brute_force.is_some() {
        header.push_str(&format!(" {:>16} {:>16}", "bf_naive_bx(se)", "bf_oracle_bx(se)"));
    }
    println!("{header}");
    for s in cfg.scenarios() {
        let naive = naive_slope_limit(&s).ok();
        let oracle = blup_slope_limit(&s, BlupSource::Oracle).ok();
        let emp = blup_slope_limit(&s, BlupSource::Empirical).ok();
        let mut line = format!(
            "{:<44} {:>8} {:>10} {:>10} {:>10} {:>10}",
            s.scenario_id(),
            fmt_opt(naive),
            fmt_opt(oracle.map(|o| o.0)),
            fmt_opt(oracle.map(|o| o.1)),
            fmt_opt(emp.map(|o| o.0)),
            fmt_opt(emp.map(|o| o.1)),
        );
        if let Some(n) = brute_force {
            let naive_bf = brute_force_limit(&s, &PipelineSpec::naive(s.family), n)?;
            let oracle_spec = PipelineSpec::blup_oracle(s.family, s.variance_components()?);
            let oracle_bf = brute_force_limit(&s, &oracle_spec, n)?;
            for fit in [naive_bf, oracle_bf] {
                line.push_str(&format!(
                    " {:>16}",
                    format!("{:.4}({:.4})", fit.coefficients[1], fit.asymptotic_se[1])
                ));
            }
        }
        println!("{line}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate { config, out, threads } => simulate(&config, &out, threads).map(|complete| {
            if !complete {
                eprintln!("warning: some scenario/method cells had no converged replication; see status.csv");
            }
            complete
        }),
        Command::Analyze {
            replicates,
            outcomes,
            family,
            outcome,
            covariates,
            gamma1,
            method,
            out,
        } => analyze(
            &replicates,
            &outcomes,
            family.into(),
            &outcome,
            &covariates,
            gamma1,
            method,
            &out,
        )
        .map(|_| true),
        Command::Compare { device_a, device_b, out } => compare(&device_a, &device_b, &out).map(|_| true),
        Command::Oracle { config, brute_force } => oracle(&config, brute_force).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_PARTIAL),
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_DATA)
        }
    }
}
