//! `atmle` command-line front end.
//!
//! Exit codes: 0 success, 1 internal check failure, 2 input error,
//! 3 estimation failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use atmle::data::{load_csv, CsvSchema};
use atmle::estimators::{run_estimator, Estimator, EstimatorConfig};
use atmle::oracle::{run_sweep, Mutation, SweepOptions};
use atmle::simulation::{run_study, ScenarioId, ScenarioSpec, StudyConfig};
use atmle::Error;

const EXIT_CHECK: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_ESTIMATION: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "atmle",
    version,
    about = "Adaptive TMLE for trials augmented with external data"
)]
struct Cli {
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = "ATMLE_JOBS")]
    jobs: Option<usize>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate the trial ATE from a CSV file.
    Analyze(AnalyzeArgs),
    /// Run a Monte Carlo study on a built-in scenario.
    Simulate(SimulateArgs),
    /// Run the randomized exact-distribution validation sweep.
    OracleCheck(OracleArgs),
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// CSV with columns `s`, `a`, `y`, covariates `w1..wd`, optional `delta`.
    #[arg(long)]
    data: PathBuf,
    /// TOML file with an `[estimator]` section.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for `report.json` and `manifest.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = EstimatorArg::Atmle)]
    estimator: EstimatorArg,
    /// Also write per-observation influence values.
    #[arg(long)]
    influence: bool,
    /// Fold-assignment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated covariate columns.
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// TOML file with `[simulate]` and `[estimator]` sections; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for results and the manifest.
    #[arg(long)]
    out: PathBuf,
    /// One of `a`, `b`, `c`, `d`, `positivity` [default: a].
    #[arg(long)]
    scenario: Option<String>,
    /// Enrollment steepness; positivity scenario only.
    #[arg(long)]
    alpha: Option<f64>,
    /// Trial sample size [default: 500].
    #[arg(long)]
    n_rct: Option<usize>,
    /// External sample size as a multiple of the trial size [default: 3].
    #[arg(long)]
    ext_multiplier: Option<f64>,
    /// Monte Carlo replications [default: 300].
    #[arg(long)]
    reps: Option<usize>,
    /// Master seed [default: 2024].
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated estimator names.
    #[arg(long, value_enum, value_delimiter = ',')]
    estimators: Option<Vec<EstimatorArg>>,
    /// Draws used for the Monte Carlo ground truth.
    #[arg(long)]
    n_oracle: Option<usize>,
    /// Probability an outcome is missing completely at random.
    #[arg(long)]
    censoring: Option<f64>,
}

#[derive(Args, Debug)]
struct OracleArgs {
    /// Number of random distributions.
    #[arg(long, default_value_t = 50)]
    sweep: usize,
    /// Random directions per distribution.
    #[arg(long, default_value_t = 5)]
    directions: usize,
    #[arg(long, default_value_t = SweepOptions::default().seed)]
    seed: u64,
    /// Writes `oracle.json` and a manifest here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, hide = true)]
    mutation: Option<MutationArg>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum EstimatorArg {
    RctOnly,
    Tmle,
    PooledAipw,
    Atmle,
    CvAtmle,
}

impl From<EstimatorArg> for Estimator {
    fn from(e: EstimatorArg) -> Self {
        match e {
            EstimatorArg::RctOnly => Estimator::RctOnly,
            EstimatorArg::Tmle => Estimator::Tmle,
            EstimatorArg::PooledAipw => Estimator::PooledAipw,
            EstimatorArg::Atmle => Estimator::Atmle,
            EstimatorArg::CvAtmle => Estimator::CvAtmle,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MutationArg {
    FlipSharpPiSign,
}

/// File-based configuration; every field may be overridden by a flag.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    estimator: EstimatorConfig,
    data: DataSection,
    simulate: SimulateSection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DataSection {
    covariates: Option<Vec<String>>,
    external_controls_only: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SimulateSection {
    scenario: String,
    alpha: Option<f64>,
    n_rct: usize,
    ext_multiplier: f64,
    reps: usize,
    seed: u64,
    estimators: Vec<Estimator>,
    n_oracle: usize,
    censoring: f64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            scenario: "a".into(),
            alpha: None,
            n_rct: 500,
            ext_multiplier: 3.0,
            reps: 300,
            seed: 2024,
            estimators: vec![
                Estimator::RctOnly,
                Estimator::Tmle,
                Estimator::PooledAipw,
                Estimator::Atmle,
            ],
            n_oracle: 10_000_000,
            censoring: 0.0,
        }
    }
}

#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    args: Vec<String>,
    config: serde_json::Value,
    seed: Option<u64>,
    software_version: &'static str,
    input_file: Option<String>,
    input_sha256: Option<String>,
    jobs: Option<usize>,
    started_unix: u64,
    finished_unix: u64,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_input_error() {
            EXIT_INPUT
        } else {
            EXIT_ESTIMATION
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn read_config(path: Option<&Path>) -> CliResult<ConfigFile> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::input(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Failure::input(format!("{}: {e}", p.display())))
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: EXIT_ESTIMATION,
        message: format!("writing {}: {e}", path.display()),
    }
}

/// Writes every file only after all results exist.
fn write_outputs(dir: &Path, files: &[(&str, String)]) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| io_failure(&path, e))?;
    }
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> CliResult<String> {
    serde_json::to_string_pretty(v).map_err(|e| Failure {
        code: EXIT_ESTIMATION,
        message: e.to_string(),
    })
}

fn manifest(
    command: &str,
    config: serde_json::Value,
    seed: Option<u64>,
    jobs: Option<usize>,
    started: u64,
) -> RunManifest {
    RunManifest {
        command: command.into(),
        args: std::env::args().collect(),
        config,
        seed,
        software_version: env!("CARGO_PKG_VERSION"),
        input_file: None,
        input_sha256: None,
        jobs,
        started_unix: started,
        finished_unix: now(),
    }
}

fn influence_csv(report: &atmle::estimators::EstimateReport) -> String {
    let f = &report.influence;
    let mut out = String::from("row,d_total,d_pooled,d_sharp,w_part,pi_part,beta_part\n");
    for i in 0..f.d_total.len() {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            i, f.d_total[i], f.d_pooled[i], f.d_sharp[i], f.w_part[i], f.pi_part[i], f.beta_part[i]
        ));
    }
    out
}

fn cmd_analyze(args: &AnalyzeArgs, jobs: Option<usize>) -> CliResult<()> {
    let started = now();
    let mut cfg = read_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.estimator.seed = seed;
    }
    if let Some(cols) = &args.covariates {
        cfg.data.covariates = Some(cols.clone());
    }
    let bytes = fs::read(&args.data).map_err(|e| Failure::input(format!("{}: {e}", args.data.display())))?;
    let digest = format!("{:x}", Sha256::digest(&bytes));
    let schema = CsvSchema {
        covariate_columns: cfg.data.covariates.clone(),
        external_controls_only: cfg.data.external_controls_only,
    };
    let ds = load_csv(&args.data, &schema)?;
    let estimator: Estimator = args.estimator.into();
    log::info!("{} on {} rows ({} trial)", estimator.name(), ds.n(), ds.n_trial());
    let report = run_estimator(estimator, &ds, &cfg.estimator)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }

    let mut json = serde_json::to_value(&report).map_err(|e| Failure {
        code: EXIT_ESTIMATION,
        message: e.to_string(),
    })?;
    if let Some(obj) = json.as_object_mut() {
        obj.remove("influence");
    }
    let mut files = vec![("report.json", to_json(&json)?)];
    if args.influence {
        files.push(("influence.csv", influence_csv(&report)));
    }
    let config = serde_json::json!({ "estimator": estimator.name(), "file": cfg });
    let mut m = manifest("analyze", config, Some(cfg.estimator.seed), jobs, started);
    m.input_file = Some(args.data.display().to_string());
    m.input_sha256 = Some(digest);
    files.push(("manifest.json", to_json(&m)?));
    write_outputs(&args.out, &files)?;
    println!(
        "psi = {:.6}  se = {:.6}  95% CI [{:.6}, {:.6}]",
        report.psi, report.se, report.ci95[0], report.ci95[1]
    );
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs, jobs: Option<usize>) -> CliResult<()> {
    let started = now();
    let mut cfg = read_config(args.config.as_deref())?;
    let sim = &mut cfg.simulate;
    if let Some(s) = &args.scenario {
        sim.scenario = s.clone();
    }
    if args.alpha.is_some() {
        sim.alpha = args.alpha;
    }
    if let Some(v) = args.n_rct {
        sim.n_rct = v;
    }
    if let Some(v) = args.ext_multiplier {
        sim.ext_multiplier = v;
    }
    if let Some(v) = args.reps {
        sim.reps = v;
    }
    if let Some(v) = args.seed {
        sim.seed = v;
    }
    if let Some(v) = &args.estimators {
        sim.estimators = v.iter().map(|&e| e.into()).collect();
    }
    if let Some(v) = args.n_oracle {
        sim.n_oracle = v;
    }
    if let Some(v) = args.censoring {
        sim.censoring = v;
    }

    let id = ScenarioId::from_name(&sim.scenario)?;
    if !(sim.ext_multiplier.is_finite() && sim.ext_multiplier > 0.0) {
        return Err(Failure::input(format!(
            "external multiplier must be positive, got {}",
            sim.ext_multiplier
        )));
    }
    let mut spec = ScenarioSpec::new(id, sim.n_rct, sim.ext_multiplier, sim.seed);
    spec.censoring = sim.censoring;
    if id == ScenarioId::Positivity {
        spec.alpha = Some(sim.alpha.unwrap_or(0.5));
    } else {
        spec.alpha = sim.alpha;
    }
    spec.validate()?;
    let study = StudyConfig {
        scenario: spec,
        estimators: sim.estimators.clone(),
        reps: sim.reps,
        master_seed: sim.seed,
        estimator_config: cfg.estimator.clone(),
        n_oracle: sim.n_oracle,
    };
    let result = run_study(&study)?;
    let files = vec![
        ("results.csv", result.to_csv_string()?),
        ("results.json", result.to_json()?),
        (
            "manifest.json",
            to_json(&manifest(
                "simulate",
                serde_json::to_value(&cfg).unwrap_or_default(),
                Some(cfg.simulate.seed),
                jobs,
                started,
            ))?,
        ),
    ];
    write_outputs(&args.out, &files)?;
    println!(
        "{:<12} {:>6} {:>9} {:>9} {:>9} {:>8}",
        "estimator", "ok", "bias", "mse", "rel_mse", "cover"
    );
    for m in &result.metrics {
        println!(
            "{:<12} {:>6} {:>9.4} {:>9.5} {:>9} {:>8.3}",
            m.estimator.name(),
            m.reps_ok,
            m.bias,
            m.mse,
            m.relative_mse.map_or("-".to_string(), |r| format!("{r:.3}")),
            m.coverage
        );
    }
    Ok(())
}

fn cmd_oracle_check(args: &OracleArgs, jobs: Option<usize>) -> CliResult<()> {
    let started = now();
    if args.sweep == 0 {
        eprintln!("warning: --sweep 0 runs no checks");
    }
    let opts = SweepOptions {
        distributions: args.sweep,
        directions: args.directions,
        seed: args.seed,
        ..Default::default()
    };
    let mutation = args.mutation.map(|m| match m {
        MutationArg::FlipSharpPiSign => Mutation::FlipSharpPiSign,
    });
    let report = run_sweep(&opts, mutation);
    print!("{}", report.table());
    if let Some(dir) = &args.out {
        let config = serde_json::json!({ "sweep": opts, "mutation": mutation });
        write_outputs(
            dir,
            &[
                ("oracle.json", to_json(&report)?),
                (
                    "manifest.json",
                    to_json(&manifest("oracle-check", config, Some(args.seed), jobs, started))?,
                ),
            ],
        )?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_CHECK,
            message: "oracle checks failed".into(),
        })
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_INPUT } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if let Some(j) = cli.jobs {
        if j == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(EXIT_INPUT);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j).build_global() {
            log::warn!("thread pool already configured: {e}");
        }
    }
    let out = match &cli.command {
        Command::Analyze(a) => cmd_analyze(a, cli.jobs),
        Command::Simulate(a) => cmd_simulate(a, cli.jobs),
        Command::OracleCheck(a) => cmd_oracle_check(a, cli.jobs),
    };
    match out {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
