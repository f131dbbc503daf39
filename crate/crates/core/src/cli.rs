//! Command-line front end.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | I/O or other runtime error |
//! | 2 | usage or configuration error |
//! | 3 | a QP subproblem was infeasible |
//! | 4 | no convergence within the iteration limit |
//! | 5 | QP backend failure or final certification failed |
//! | 6 | validation found a violation |
//! | 7 | solution does not belong to the given configuration |

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::ProblemConfig;
use crate::curvature::{mu_monte_carlo, CurvatureBound, SampleDomain};
use crate::error::{Error, Result};
use crate::ocp::{certify, CertificationReport, SolutionCertificate, Tube};
use crate::qp::ClarabelSolver;
use crate::sqp::{solve_with, write_log_jsonl, FailureKind};
use crate::validation::{monte_carlo, write_rollouts_csv, RolloutReport, Sampling, ValidationPlan};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_NOT_CONVERGED: i32 = 4;
pub const EXIT_NOT_CERTIFIED: i32 = 5;
pub const EXIT_VIOLATION: i32 = 6;
pub const EXIT_STALE: i32 = 7;

#[derive(Debug, Parser)]
#[command(name = "nlsls", version, about = "Robust nonlinear optimal control with system level synthesis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the robust program; writes solution.json, tubes.csv and iterations.jsonl.
    Solve(SolveArgs),
    /// Roll out a certified policy under sampled disturbances; writes report.json and rollouts.csv.
    Validate(ValidateArgs),
    /// Monte-Carlo estimate of the curvature diagonal, printed as JSON.
    MuEstimate(MuArgs),
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// closed_loop, open_loop or nominal.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Convergence tolerance on the primal-dual step.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Defaults to `<out>/solution.json`.
    #[arg(long)]
    pub solution: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub rollouts: usize,
    /// uniform, vertex or worst_axis.
    #[arg(long, default_value = "uniform")]
    pub mode: String,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct MuArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write `<out>/mu.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

struct Failure(i32, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::InvalidArgument(_) | Error::Dimension { .. } => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        };
        Failure(code, e.to_string())
    }
}

type CliResult = std::result::Result<(), Failure>;

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn solve(args: &SolveArgs) -> CliResult {
    let mut cfg = ProblemConfig::load(&args.config)?;
    if let Some(m) = &args.mode {
        cfg.mode = m.parse()?;
    }
    if let Some(n) = args.max_iters {
        cfg.sqp.max_iters = n;
    }
    if let Some(t) = args.tol {
        cfg.sqp.conv_tol = t;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let problem = cfg.build()?;
    fs::create_dir_all(&args.out).map_err(Error::from)?;
    let result = solve_with(&problem, &cfg.sqp, &ClarabelSolver::default(), |r| {
        log::info!("iteration {}: |dy| {:.3e} |dnu| {:.3e} violation {:.3e}", r.iteration, r.step_primal, r.step_dual, r.violation)
    });
    let log = match &result {
        Ok(s) => &s.log,
        Err(f) => &f.log,
    };
    write_log_jsonl(log, create(&args.out.join("iterations.jsonl"))?)?;
    match result {
        Ok(sol) => {
            let mut cert = sol.certificate;
            cert.config_hash = Some(cfg.problem_hash());
            fs::write(args.out.join("solution.json"), cert.to_json()?).map_err(Error::from)?;
            let tube = Tube::build(&cert, &problem.effective_e(), &problem.mu)?;
            tube.write_csv(create(&args.out.join("tubes.csv"))?)?;
            println!(
                "certified {} solution: {} iterations, {:.2} s, objective {:.6}, max tube half-width {:.4e}",
                cert.mode,
                sol.log.len(),
                sol.seconds,
                cert.objective,
                tube.max_width()
            );
            Ok(())
        }
        Err(f) => {
            let code = match f.kind {
                FailureKind::Infeasible => EXIT_INFEASIBLE,
                FailureKind::NotConverged => EXIT_NOT_CONVERGED,
                FailureKind::QpFailure | FailureKind::NotCertified => EXIT_NOT_CERTIFIED,
            };
            Err(Failure(code, f.to_string()))
        }
    }
}

#[derive(Serialize)]
struct ValidationOutput<'a> {
    config_hash: String,
    sampling: Sampling,
    rollouts: usize,
    seed: u64,
    certification: &'a CertificationReport,
    report: &'a RolloutReport,
}

fn validate(args: &ValidateArgs) -> CliResult {
    let mut cfg = ProblemConfig::load(&args.config)?;
    let path = args.solution.clone().unwrap_or_else(|| args.out.join("solution.json"));
    let text = fs::read_to_string(&path).map_err(Error::from)?;
    let sol = SolutionCertificate::from_json(&text)?;
    cfg.mode = sol.mode;
    let hash = cfg.problem_hash();
    if sol.config_hash.as_deref() != Some(hash.as_str()) {
        return Err(Failure(EXIT_STALE, format!("{} was not produced from {}", path.display(), args.config.display())));
    }
    let sampling: Sampling = args.mode.parse()?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let problem = cfg.build()?;
    let cert = certify(&sol, &problem, cfg.sqp.cert_tol)?;
    let plan = ValidationPlan { batches: vec![(sampling, args.rollouts)], seed, ..Default::default() };
    let (report, trajs) = monte_carlo(&problem, &sol, &plan)?;
    fs::create_dir_all(&args.out).map_err(Error::from)?;
    let out = ValidationOutput { config_hash: hash, sampling, rollouts: args.rollouts, seed, certification: &cert, report: &report };
    fs::write(args.out.join("report.json"), serde_json::to_string_pretty(&out).map_err(Error::from)?).map_err(Error::from)?;
    write_rollouts_csv(&trajs, create(&args.out.join("rollouts.csv"))?)?;
    println!(
        "{} rollouts: {} constraint violations, {} tube exits, {} error-bound breaches; certificate {}",
        args.rollouts,
        report.violations,
        report.tube_exits,
        report.tau_breaches,
        if cert.passed { "valid" } else { "invalid" }
    );
    if report.is_clean() && cert.passed {
        Ok(())
    } else {
        let mut why = cert.failures.clone();
        if !report.is_clean() {
            why.push("rollouts falsify the certificate".into());
        }
        Err(Failure(EXIT_VIOLATION, why.join("; ")))
    }
}

#[derive(Serialize)]
struct MuOutput {
    #[serde(flatten)]
    bound: CurvatureBound,
    domain: SampleDomain,
}

fn mu_estimate(args: &MuArgs) -> CliResult {
    let cfg = ProblemConfig::load(&args.config)?;
    let model = cfg.build_model()?;
    let domain = cfg.estimate_domain()?;
    let est = cfg.curvature.estimate.as_ref();
    let samples = args.samples.or(est.map(|e| e.samples)).unwrap_or(10_000);
    let seed = args.seed.or(est.map(|e| e.seed)).unwrap_or(cfg.seed);
    let bound = mu_monte_carlo(model.as_ref(), &domain, samples, seed)?;
    let json = serde_json::to_string_pretty(&MuOutput { bound, domain }).map_err(Error::from)?;
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).map_err(Error::from)?;
        fs::write(dir.join("mu.json"), &json).map_err(Error::from)?;
    }
    println!("{json}");
    Ok(())
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Solve(a) => solve(a),
        Command::Validate(a) => validate(a),
        Command::MuEstimate(a) => mu_estimate(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            code
        }
    }
}
