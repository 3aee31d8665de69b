use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rerand::criteria::{BalanceCriterion, CriterionKind, DesignInputs, McConfig};
use rerand::harness::{self, Scheme, SimConfig};
use rerand::population::Population;
use rerand::sampler::{self, DEFAULT_MAX_DRAWS};
use rerand::theory;
use rerand::twostage::{self, TwoStageConfig};
use rerand::{Error, RngStream};
use serde::Serialize;
use serde_json::{json, Value};

const VERSION: &str = env!("CARGO_PKG_VERSION");

fn long_version() -> &'static str {
    let profile = if cfg!(debug_assertions) { "debug" } else { "release" };
    let s = format!("{VERSION} (rerand core {}, {profile}, {}-{})", rerand::VERSION, std::env::consts::ARCH, std::env::consts::OS);
    Box::leak(s.into_boxed_str())
}

#[derive(Parser, Debug)]
#[command(name = "rerand", version = VERSION, long_version = long_version(), about = "Re-randomization designs, simulations and efficiency tables")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw one accepted assignment for a covariate table.
    Design(DesignArgs),
    /// Run a simulation grid and write one CSV row per (cell, scheme).
    Simulate(SimulateArgs),
    /// Run a pilot + re-randomized second stage on a population.
    TwoStage(TwoStageArgs),
    /// Tabulate asymptotic variance reductions of ReM.
    Theory(TheoryArgs),
    /// Generate potential outcomes from the response-surface model.
    Surface(SurfaceArgs),
    /// Estimate PRIV of a scheme on a population with known outcomes.
    Priv(PrivArgs),
}

#[derive(Args, Debug)]
struct DesignArgs {
    #[arg(long)]
    covariates: PathBuf,
    /// `rem`, `reo`, a criterion-kind JSON, a saved criterion JSON, or a path to either.
    #[arg(long)]
    criterion: String,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Needed by `--criterion reo`.
    #[arg(long)]
    beta_file: Option<PathBuf>,
    #[arg(long)]
    n_treated: Option<usize>,
    #[arg(long, default_value_t = 1_000_000)]
    mc_draws: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_DRAWS)]
    max_draws: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// JSON array of cells, or an object with a `cells` array.
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to the available parallelism.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct TwoStageArgs {
    /// TwoStageConfig JSON; may carry `seed` and `mc_draws`.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    population: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_treated: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TheoryArgs {
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// A range `a..b` (inclusive) or a comma list.
    #[arg(long, default_value = "1..20")]
    p: String,
    #[arg(long, default_value_t = 0.5)]
    r2: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SurfaceArgs {
    #[arg(long)]
    covariates: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the drawn coefficients (intercept first) as JSON.
    #[arg(long)]
    beta_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PrivArgs {
    #[arg(long)]
    population: PathBuf,
    /// `bcrd`, `rem`, `reo`, `reb-oracle`, or a scheme JSON (inline or path).
    #[arg(long)]
    scheme: String,
    /// Coefficients for `reo`; the population's projection coefficient otherwise.
    #[arg(long)]
    beta_file: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    n_accepted: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma2_beta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 100_000)]
    mc_draws: usize,
    #[arg(long)]
    n_treated: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// CLI failures: library errors plus usage problems.
#[derive(Debug)]
enum CliError {
    Usage(String),
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

const LIB_CODES: &[&str] = &[
    "degenerate_population",
    "invalid_split",
    "invalid_assignment",
    "missing_outcomes",
    "singular_covariance",
    "not_positive_definite",
    "undefined_r_squared",
    "degenerate_prior",
    "range",
    "shape",
    "acceptance_starvation",
    "calibration_failure",
    "split",
    "pilot_singular",
    "undefined_angle",
    "tuning",
    "io",
    "parse",
];

impl CliError {
    fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Lib(e) => e.code(),
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::Lib(e) => e.to_string(),
        }
    }

    /// 2 for usage errors, 10 + index for library errors.
    fn exit_status(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Lib(e) => 10 + LIB_CODES.iter().position(|c| *c == e.code()).unwrap_or(LIB_CODES.len()) as u8,
        }
    }
}

fn invocation() -> Vec<String> {
    std::env::args().collect()
}

fn meta(seed: Option<u64>, config: Value) -> Value {
    json!({
        "version": VERSION,
        "invocation": invocation(),
        "seed": seed,
        "config": config,
    })
}

fn to_value<T: Serialize>(v: &T) -> CliResult<Value> {
    serde_json::to_value(v).map_err(|e| CliError::Lib(Error::Parse(e.to_string())))
}

fn write_json(out: Option<&Path>, doc: &Value) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(doc).map_err(|e| CliError::Lib(Error::Parse(e.to_string())))?;
    s.push('\n');
    match out {
        Some(p) => fs::write(p, s).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?,
        None => std::io::stdout().write_all(s.as_bytes()).map_err(Error::from)?,
    }
    Ok(())
}

/// `# key: value` lines that prefix every CSV this tool writes.
fn csv_preamble(meta: &Value) -> String {
    let mut s = String::new();
    for key in ["version", "invocation", "seed", "config"] {
        s.push_str(&format!("# {key}: {}\n", meta[key]));
    }
    s
}

fn write_text(out: Option<&Path>, text: &[u8]) -> CliResult<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?,
        None => std::io::stdout().write_all(text).map_err(Error::from)?,
    }
    Ok(())
}

fn read_to_string(path: &Path) -> CliResult<String> {
    Ok(fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?)
}

/// Inline JSON if it starts with `{` or `[`, otherwise a file to read.
fn json_arg(raw: &str) -> CliResult<Value> {
    let text = if raw.trim_start().starts_with(['{', '[']) { raw.to_string() } else { read_to_string(Path::new(raw))? };
    serde_json::from_str(&text).map_err(|e| CliError::Lib(Error::Parse(format!("{raw}: {e}"))))
}

/// Numbers separated by commas, whitespace or newlines; a `beta` header line is skipped.
fn read_beta(path: &Path) -> CliResult<Vec<f64>> {
    let text = read_to_string(path)?;
    let mut out = Vec::new();
    for tok in text.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()) {
        match tok.parse::<f64>() {
            Ok(v) if v.is_finite() => out.push(v),
            Ok(_) => return Err(Error::Parse(format!("{}: non-finite coefficient", path.display())).into()),
            Err(_) if out.is_empty() && tok.chars().next().is_some_and(|c| c.is_alphabetic()) => {}
            Err(_) => return Err(Error::Parse(format!("{}: '{tok}' is not a number", path.display())).into()),
        }
    }
    if out.is_empty() {
        return Err(Error::Parse(format!("{}: no coefficients found", path.display())).into());
    }
    Ok(out)
}

fn parse_p_list(raw: &str) -> CliResult<Vec<usize>> {
    let bad = || CliError::Usage(format!("--p expects 'a..b' or a comma list, got '{raw}'"));
    if let Some((a, b)) = raw.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if a == 0 || b < a {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    raw.split(',').map(|t| t.trim().parse::<usize>().ok().filter(|&p| p > 0).ok_or_else(bad)).collect()
}

fn design(args: &DesignArgs) -> CliResult<()> {
    let pop = Population::from_csv_path(&args.covariates, args.n_treated)?;
    let mc = McConfig { draws: args.mc_draws, seed: args.seed };
    let criterion = match args.criterion.as_str() {
        "rem" => {
            let inputs = DesignInputs::from_population(&pop)?;
            rerand::build_criterion(&CriterionKind::Rem, &inputs, args.alpha, &mc)?
        }
        "reo" => {
            let path = args.beta_file.as_ref().ok_or_else(|| CliError::Usage("--criterion reo needs --beta-file".into()))?;
            let inputs = DesignInputs::from_population(&pop)?;
            rerand::build_criterion(&CriterionKind::Reo { beta: read_beta(path)? }, &inputs, args.alpha, &mc)?
        }
        raw => {
            let v = json_arg(raw)?;
            if v.get("lambda_matrix").is_some() {
                BalanceCriterion::from_json(&v.to_string())?
            } else {
                let kind: CriterionKind = serde_json::from_value(v).map_err(|e| Error::Parse(format!("criterion: {e}")))?;
                let inputs = DesignInputs::from_population(&pop)?;
                rerand::build_criterion(&kind, &inputs, args.alpha, &mc)?
            }
        }
    };
    let (assignments, stats) = sampler::sample_accepted(&pop, &criterion, 1, RngStream::new(args.seed, 0), args.max_draws, 1)?;
    let w = &assignments[0];
    let distance = sampler::assignment_distance(&pop, &criterion, w)?;
    let config = json!({
        "covariates": args.covariates,
        "criterion": args.criterion,
        "alpha": criterion.alpha,
        "n": pop.n(),
        "n_treated": pop.n_treated(),
        "mc_draws": args.mc_draws,
        "max_draws": args.max_draws,
    });
    let doc = json!({
        "meta": meta(Some(args.seed), config),
        "assignment": w.as_slice(),
        "distance": distance,
        "threshold": criterion.threshold,
        "stats": to_value(&stats)?,
        "criterion": to_value(&criterion)?,
    });
    write_json(args.out.as_deref(), &doc)
}

fn simulate(args: &SimulateArgs) -> CliResult<()> {
    let v = json_arg(&args.grid.to_string_lossy())?;
    let cells = match v {
        Value::Object(mut m) if m.contains_key("cells") => m.remove("cells").unwrap_or(Value::Null),
        other => other,
    };
    let configs: Vec<SimConfig> = serde_json::from_value(cells).map_err(|e| Error::Parse(format!("grid: {e}")))?;
    if configs.is_empty() {
        return Err(CliError::Usage("grid has no cells".into()));
    }
    let threads = args.threads.unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    let rows = harness::run_grid(&configs, args.seed, threads)?;
    let mut buf = csv_preamble(&meta(Some(args.seed), json!({ "cells": to_value(&configs)?, "threads": threads }))).into_bytes();
    harness::write_grid_csv(&rows, &mut buf)?;
    write_text(Some(&args.out), &buf)
}

fn two_stage(args: &TwoStageArgs) -> CliResult<()> {
    let mut v = json_arg(&args.config.to_string_lossy())?;
    let obj = v.as_object_mut().ok_or_else(|| Error::Parse("two-stage config must be a JSON object".into()))?;
    let file_seed = obj.remove("seed").and_then(|s| s.as_u64());
    let mc_draws = obj.remove("mc_draws").and_then(|s| s.as_u64()).unwrap_or(100_000) as usize;
    let config: TwoStageConfig = serde_json::from_value(v).map_err(|e| Error::Parse(format!("two-stage config: {e}")))?;
    let seed = args.seed.or(file_seed).unwrap_or(0);
    let pop = Population::from_csv_path(&args.population, args.n_treated)?;
    let mc = McConfig { draws: mc_draws, seed };
    let result = twostage::run_two_stage(&pop, &config, &mc, RngStream::new(seed, 0))?;
    let cfg = json!({ "two_stage": to_value(&config)?, "mc_draws": mc_draws, "population": args.population });
    let doc = json!({ "meta": meta(Some(seed), cfg), "result": to_value(&result)? });
    write_json(args.out.as_deref(), &doc)
}

fn theory_table(args: &TheoryArgs) -> CliResult<()> {
    let ps = parse_p_list(&args.p)?;
    let mut buf = csv_preamble(&meta(None, json!({ "alpha": args.alpha, "p": ps, "r2": args.r2 }))).into_bytes();
    buf.extend_from_slice(b"alpha,p,r_squared,v_value,priasv,method\n");
    for p in ps {
        let r = theory::priasv_rem(args.alpha, p, args.r2)?;
        buf.extend_from_slice(format!("{},{},{},{},{},analytic\n", r.alpha, r.p, r.r_squared, r.v_value, r.priasv).as_bytes());
    }
    write_text(args.out.as_deref(), &buf)
}

fn surface(args: &SurfaceArgs) -> CliResult<()> {
    let cov = Population::from_csv_path(&args.covariates, None)?;
    let mut rng = RngStream::new(args.seed, 0).rng();
    let (pop, beta) = harness::gen_response_surface(&cov, &mut rng)?;
    let cfg = json!({
        "covariates": args.covariates,
        "noise_variance": harness::SURFACE_NOISE_VAR,
        "noise_note": "the outcome noise parameter 3 is read as a variance",
    });
    let m = meta(Some(args.seed), cfg);
    let mut buf = csv_preamble(&m).into_bytes();
    pop.write_csv(&mut buf)?;
    write_text(Some(&args.out), &buf)?;
    if let Some(path) = &args.beta_out {
        write_json(Some(path), &json!({ "meta": m, "beta": beta.as_slice() }))?;
    }
    Ok(())
}

fn parse_scheme(raw: &str, beta: Option<Vec<f64>>) -> CliResult<Scheme> {
    Ok(match raw {
        "bcrd" => Scheme::Bcrd,
        "rem" => Scheme::Rem,
        "reo" => Scheme::Reo { beta },
        "reb-oracle" | "reb_oracle" => Scheme::RebOracle,
        other => serde_json::from_value(json_arg(other)?).map_err(|e| Error::Parse(format!("scheme: {e}")))?,
    })
}

fn priv_cmd(args: &PrivArgs) -> CliResult<()> {
    let pop = Population::from_csv_path(&args.population, args.n_treated)?;
    let beta = args.beta_file.as_deref().map(read_beta).transpose()?;
    let scheme = parse_scheme(&args.scheme, beta)?;
    let mc = McConfig { draws: args.mc_draws, seed: args.seed };
    let two_stage_mc = McConfig { draws: args.mc_draws.min(10_000), seed: args.seed };
    let design = scheme.resolve(&pop, args.alpha, args.sigma2_beta, &mc, &two_stage_mc)?;
    let result = harness::estimate_priv(&pop, &design, args.n_accepted, RngStream::new(args.seed, 0), args.threads)?;
    let cfg = json!({
        "population": args.population,
        "scheme": to_value(&scheme)?,
        "n_accepted": args.n_accepted,
        "alpha": args.alpha,
        "sigma2_beta": args.sigma2_beta,
        "threads": args.threads,
        "mc_draws": args.mc_draws,
    });
    let doc = json!({ "meta": meta(Some(args.seed), cfg), "result": to_value(&result)? });
    write_json(args.out.as_deref(), &doc)
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Design(a) => design(a),
        Command::Simulate(a) => simulate(a),
        Command::TwoStage(a) => two_stage(a),
        Command::Theory(a) => theory_table(a),
        Command::Surface(a) => surface(a),
        Command::Priv(a) => priv_cmd(a),
    }
}

fn fail(err: CliError) -> ExitCode {
    let doc = json!({
        "error": { "code": err.code(), "message": err.message() },
        "version": VERSION,
        "invocation": invocation(),
    });
    eprintln!("{doc}");
    ExitCode::from(err.exit_status())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            return fail(CliError::Usage(first));
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}
