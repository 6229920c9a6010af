//! `lmmci`: fit linear mixed models and compute confidence intervals from the
//! command line.

mod config;
mod report;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use lmmci::bootstrap::{BootScheme, BootstrapError};
use lmmci::data::{read_csv, simulate, write_csv, DataError, LongitudinalDataset, SimulationDesignSpec};
use lmmci::estimation::{
    fit_with, to_reported, EstimationError, FitMethod, FitOptions, FitResult, ParameterNames,
};
use lmmci::formula::{parse_formula, FormulaError};
use lmmci::intervals::{confint, CiMethod, CiOptions, CiTable, IntervalError, ParamSelector};
use lmmci::numerics::RandomStream;
use lmmci::robust::{fit_robust, RobustConfig};

use config::FileConfig;

#[derive(Debug, Parser)]
#[command(name = "lmmci", version, about = "Linear mixed models with bootstrap and Wald confidence intervals")]
struct Cli {
    /// JSON file with settings; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model and print estimates.
    Fit(FitArgs),
    /// Confidence intervals by Wald, percentile bootstrap or BCa.
    Confint(ConfintArgs),
    /// Simulate a two-arm longitudinal dataset and write it as CSV.
    Simulate(SimulateArgs),
    /// Fit two estimators and print them side by side.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
struct InputArgs {
    /// Long-format CSV file.
    #[arg(long)]
    data: Option<PathBuf>,

    /// Model formula, e.g. "pos ~ treat * time + (time | id)".
    #[arg(long)]
    formula: Option<String>,

    /// Output format: text, json or csv.
    #[arg(long, value_parser = ["text", "json", "csv"])]
    output: Option<String>,

    /// Tuning constant of the robust weights.
    #[arg(long)]
    k: Option<f64>,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    input: InputArgs,

    /// Estimator: ml, reml or robust.
    #[arg(long, value_parser = ["ml", "reml", "robust"], ignore_case = true)]
    method: Option<String>,
}

#[derive(Debug, Args)]
struct CiArgs {
    /// Interval method: wald, boot or bca.
    #[arg(long, value_parser = ["wald", "boot", "bca"], ignore_case = true)]
    method: Option<String>,

    /// Bootstrap scheme: wild or parametric.
    #[arg(long, value_parser = ["wild", "parametric"], ignore_case = true)]
    boot_type: Option<String>,

    /// Number of bootstrap resamples.
    #[arg(long)]
    nsim: Option<usize>,

    /// Confidence level in (0, 1).
    #[arg(long)]
    level: Option<f64>,

    /// Parameters to report, by 1-based index or name, comma separated.
    #[arg(long, value_delimiter = ',')]
    parm: Option<Vec<String>>,

    /// Cluster variable (required with --method bca).
    #[arg(long)]
    cluster_id: Option<String>,

    #[arg(long)]
    seed: Option<u64>,

    /// Worker threads (default: available parallelism).
    #[arg(long, env = "LMMCI_THREADS")]
    threads: Option<usize>,

    /// Write the bootstrap estimate matrix to this CSV file.
    #[arg(long)]
    bootstrap_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ConfintArgs {
    #[command(flatten)]
    input: InputArgs,

    /// Estimator of the original fit: ml, reml or robust.
    #[arg(long, value_parser = ["ml", "reml", "robust"], ignore_case = true)]
    estimator: Option<String>,

    #[command(flatten)]
    ci: CiArgs,

    /// Compare against a saved JSON result; exits with 3 on any difference.
    #[arg(long)]
    verify: Option<PathBuf>,

    /// Add thread count and wall time to the JSON output.
    #[arg(long)]
    provenance: bool,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Simulation design as JSON (default: the 60-cluster two-arm design).
    #[arg(long)]
    design: Option<PathBuf>,

    /// Output CSV path.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Overrides the seed in the design.
    #[arg(long)]
    seed: Option<u64>,

    /// Output format for the printed truth: text or json.
    #[arg(long, value_parser = ["text", "json"])]
    output: Option<String>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// Two estimators, e.g. `ml robust`.
    #[arg(num_args = 0..=2)]
    methods: Vec<String>,

    #[command(flatten)]
    input: InputArgs,

    /// Also compute intervals for both fits.
    #[arg(long)]
    confint: bool,

    #[command(flatten)]
    ci: CiArgs,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
enum CliError {
    /// Bad flags, unreadable or invalid input (exit 2).
    Usage(String),
    /// Estimation or resampling failed (exit 3).
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<FormulaError> for CliError {
    fn from(e: FormulaError) -> Self {
        CliError::Usage(format!("formula: {e}"))
    }
}

impl From<EstimationError> for CliError {
    fn from(e: EstimationError) -> Self {
        match e {
            EstimationError::RankDeficient
            | EstimationError::DimensionMismatch(_)
            | EstimationError::TooFewClusters { .. }
            | EstimationError::InvalidParameters(_) => CliError::Usage(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<BootstrapError> for CliError {
    fn from(e: BootstrapError) -> Self {
        match e {
            BootstrapError::Invalid(_) => CliError::Usage(e.to_string()),
            BootstrapError::Data(d) => d.into(),
            BootstrapError::Estimation(inner) => inner.into(),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<IntervalError> for CliError {
    fn from(e: IntervalError) -> Self {
        match e {
            IntervalError::Bootstrap(b) => b.into(),
            IntervalError::Numerics(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p).map_err(CliError::Usage)?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Fit(a) => cmd_fit(a, file),
        Command::Confint(a) => cmd_confint(a, file),
        Command::Simulate(a) => cmd_simulate(a, file),
        Command::Compare(a) => cmd_compare(a, file),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Output {
    Text,
    Json,
    Csv,
}

fn parse_output(s: Option<String>) -> Result<Output, CliError> {
    match s.as_deref().map(str::to_ascii_lowercase).as_deref() {
        None | Some("text") => Ok(Output::Text),
        Some("json") => Ok(Output::Json),
        Some("csv") => Ok(Output::Csv),
        Some(other) => Err(usage(format!("unknown output format `{other}`"))),
    }
}

/// Data, formula and output settings after merging flags over the file.
#[derive(Debug, Serialize)]
struct InputSettings {
    data: PathBuf,
    formula: String,
    #[serde(skip)]
    output: Output,
    k: f64,
}

fn resolve_input(a: InputArgs, file: &FileConfig) -> Result<InputSettings, CliError> {
    let data = a.data.or_else(|| file.data.clone()).ok_or_else(|| usage("--data is required"))?;
    let formula = a.formula.or_else(|| file.formula.clone()).ok_or_else(|| usage("--formula is required"))?;
    let k = a.k.or(file.k).unwrap_or(RobustConfig::default().k);
    Ok(InputSettings { data, formula, output: parse_output(a.output.or_else(|| file.output.clone()))?, k })
}

fn load_data(input: &InputSettings) -> Result<LongitudinalDataset, CliError> {
    let formula = parse_formula(&input.formula)?;
    Ok(read_csv(&input.data, &formula)?)
}

fn parse_method(s: &str) -> Result<FitMethod, CliError> {
    s.parse::<FitMethod>().map_err(CliError::Usage)
}

fn robust_config(k: f64) -> RobustConfig {
    RobustConfig { k, ..RobustConfig::default() }
}

fn run_fit(data: &LongitudinalDataset, method: FitMethod, k: f64) -> Result<FitResult, CliError> {
    Ok(match method {
        FitMethod::Robust => fit_robust(data, &robust_config(k))?,
        m => fit_with(data, m, &FitOptions::default())?,
    })
}

/// Writes to stdout; a closed pipe (e.g. `| head`) ends output quietly.
fn emit(text: &str) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(usage(format!("writing output: {e}"))),
        _ => Ok(()),
    }
}

macro_rules! out {
    ($($t:tt)*) => { emit(&format!($($t)*))? };
}

macro_rules! outln {
    () => { emit("\n")? };
    ($($t:tt)*) => {{
        let mut line = format!($($t)*);
        line.push('\n');
        emit(&line)?
    }};
}

fn print_json(v: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).map_err(|e| CliError::Numerical(e.to_string()))?;
    outln!("{text}");
    Ok(())
}

fn not_converged(fit: &FitResult) -> Result<(), CliError> {
    if fit.converged {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("{} fit did not converge", fit.method)))
    }
}

fn cmd_fit(a: FitArgs, file: FileConfig) -> Result<(), CliError> {
    let method = parse_method(a.method.as_deref().or(file.method.as_deref()).unwrap_or("ml"))?;
    let input = resolve_input(a.input, &file)?;
    let data = load_data(&input)?;
    let fit = run_fit(&data, method, input.k)?;
    match input.output {
        Output::Text => out!("{}", report::fit_text(&fit, &data)),
        Output::Csv => out!("{}", report::fit_csv(&fit)),
        Output::Json => print_json(&json!({
            "command": "fit",
            "config": { "input": &input, "method": method },
            "fit": report::FitReport::new(&fit, &data),
        }))?,
    }
    not_converged(&fit)
}

/// Interval settings after merging flags over the file.
#[derive(Debug, Serialize)]
struct CiSettings {
    method: CiMethod,
    boot_type: BootScheme,
    nsim: usize,
    level: f64,
    parm: Option<Vec<ParamSelector>>,
    cluster_id: Option<String>,
    seed: u64,
    #[serde(skip)]
    threads: usize,
    #[serde(skip)]
    bootstrap_csv: Option<PathBuf>,
}

fn default_threads() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn resolve_ci(a: CiArgs, file: &FileConfig, method_from_file: bool) -> Result<CiSettings, CliError> {
    let defaults = CiOptions::default();
    let file_method = if method_from_file { file.method.clone() } else { None };
    let method = match a.method.or(file_method) {
        Some(m) => m.parse::<CiMethod>().map_err(CliError::Usage)?,
        None => defaults.method,
    };
    let boot_type = match a.boot_type.or_else(|| file.boot_type.clone()) {
        Some(b) => b.parse::<BootScheme>().map_err(CliError::Usage)?,
        None => defaults.boot_type,
    };
    let parm = match a.parm {
        Some(v) => Some(v.iter().map(|s| s.parse::<ParamSelector>().expect("infallible")).collect()),
        None => file.parm.clone(),
    };
    let threads = a.threads.or(file.threads).unwrap_or_else(default_threads);
    if threads == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    Ok(CiSettings {
        method,
        boot_type,
        nsim: a.nsim.or(file.nsim).unwrap_or(defaults.nsim),
        level: a.level.or(file.level).unwrap_or(defaults.level),
        parm,
        cluster_id: a.cluster_id.or_else(|| file.cluster_id.clone()),
        seed: a.seed.or(file.seed).unwrap_or(defaults.seed),
        threads,
        bootstrap_csv: a.bootstrap_csv.or_else(|| file.bootstrap_csv.clone()),
    })
}

fn ci_options(s: &CiSettings, k: f64) -> CiOptions {
    CiOptions {
        method: s.method,
        boot_type: s.boot_type,
        nsim: s.nsim,
        level: s.level,
        parm: s.parm.clone(),
        cluster_id: s.cluster_id.clone(),
        seed: s.seed,
        threads: s.threads,
        robust: robust_config(k),
    }
}

fn write_bootstrap_csv(path: &Path, table: &CiTable) -> Result<(), CliError> {
    let Some(full) = &table.full_results else { return Ok(()) };
    let file = std::fs::File::create(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let mut w = std::io::BufWriter::new(file);
    full.bootstrap_estimates.write_csv(&mut w).and_then(|_| w.flush()).map_err(|e| usage(e.to_string()))
}

fn ci_header(table: &CiTable) -> String {
    match (table.method, &table.full_results) {
        (CiMethod::Wald, _) => format!("Wald intervals, level {}", table.level),
        (m, Some(full)) => {
            let run = &full.bootstrap_estimates;
            let kind = if m == CiMethod::Bca { "BCa" } else { "Percentile" };
            format!(
                "{kind} {} bootstrap intervals, level {}, {} resamples ({} failed), seed {}",
                run.scheme, table.level, run.requested_b, run.n_failed, run.seed
            )
        }
        (m, None) => format!("{m} intervals, level {}", table.level),
    }
}

fn cmd_confint(a: ConfintArgs, file: FileConfig) -> Result<(), CliError> {
    let started = Instant::now();
    let estimator = parse_method(a.estimator.as_deref().or(file.estimator.as_deref()).unwrap_or("ml"))?;
    let input = resolve_input(a.input, &file)?;
    let ci = resolve_ci(a.ci, &file, true)?;
    let verify = a.verify.or_else(|| file.verify.clone());
    let options = ci_options(&ci, input.k);
    options.validate()?;
    let data = load_data(&input)?;
    let fit = run_fit(&data, estimator, input.k)?;
    not_converged(&fit)?;
    let table = confint(&fit, &data, &options)?;
    if let Some(path) = &ci.bootstrap_csv {
        write_bootstrap_csv(path, &table)?;
    }
    let mut doc = json!({
        "command": "confint",
        "config": { "input": &input, "estimator": estimator, "ci": &ci },
        "fit": report::FitReport::new(&fit, &data),
        "ci_table": {
            "method": table.method,
            "boot_type": table.boot_type,
            "level": table.level,
            "labels": &table.labels,
            "rows": &table.rows,
            "warnings": &table.warnings,
        },
    });
    if let Some(full) = &table.full_results {
        doc["full_results"] = serde_json::to_value(full).map_err(|e| CliError::Numerical(e.to_string()))?;
    }
    if a.provenance {
        doc["timing"] = json!({ "threads": ci.threads, "elapsed_seconds": started.elapsed().as_secs_f64() });
    }
    match input.output {
        Output::Text => {
            outln!("{}", ci_header(&table));
            out!("{}", table.render_text());
            for w in &table.warnings {
                eprintln!("warning: {w}");
            }
        }
        Output::Csv => out!("{}", table.render_csv()),
        Output::Json => print_json(&doc)?,
    }
    if let Some(path) = verify {
        verify_against(&path, &doc)?;
        eprintln!("verify: results match {}", path.display());
    }
    Ok(())
}

/// Exact comparison of interval rows and bootstrap estimates with a saved
/// JSON result.
fn verify_against(path: &Path, current: &Value) -> Result<(), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let saved: Value = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    for pointer in ["/ci_table/rows", "/full_results/bootstrap_estimates/estimates", "/fit/parameters"] {
        if saved.pointer(pointer) != current.pointer(pointer) {
            return Err(CliError::Numerical(format!(
                "verification against {} failed: `{pointer}` differs",
                path.display()
            )));
        }
    }
    Ok(())
}

fn cmd_simulate(a: SimulateArgs, file: FileConfig) -> Result<(), CliError> {
    let mut spec = match a.design.or_else(|| file.design.clone()) {
        Some(p) => {
            let text = std::fs::read_to_string(&p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<SimulationDesignSpec>(&text)
                .map_err(|e| usage(format!("invalid design {}: {e}", p.display())))?
        }
        None => SimulationDesignSpec::medsim(),
    };
    if let Some(seed) = a.seed.or(file.seed) {
        spec.seed = seed;
    }
    let out = a.out.or_else(|| file.out.clone()).ok_or_else(|| usage("--out is required"))?;
    let output = parse_output(a.output.or_else(|| file.output.clone()))?;
    let design = spec.resolve()?;
    let mut rng = RandomStream::new(spec.seed, 0);
    let sim = simulate(&design, &mut rng)?;
    write_csv(&sim.dataset, &out)?;
    let names = ParameterNames::from_dataset(&sim.dataset);
    let truth = to_reported(&design.truth, &names);
    let swapped: Vec<&str> = sim.swapped_clusters.iter().map(|&i| sim.dataset.clusters[i].id.as_str()).collect();
    match output {
        Output::Json => print_json(&json!({
            "command": "simulate",
            "config": { "design": &spec, "out": &out },
            "truth": truth.names.iter().zip(&truth.values)
                .map(|(n, v)| json!({ "name": n, "value": v })).collect::<Vec<_>>(),
            "rows": sim.dataset.total_rows(),
            "swapped_clusters": swapped,
        }))?,
        _ => {
            outln!(
                "Wrote {} rows in {} clusters to {}",
                sim.dataset.total_rows(),
                sim.dataset.n(),
                out.display()
            );
            outln!("True parameters:");
            let w = truth.names.iter().map(|n| n.len()).max().unwrap_or(0);
            for (n, v) in truth.names.iter().zip(&truth.values) {
                outln!("  {n:<w$}  {}", lmmci::intervals::format_sig(*v, 6));
            }
            if !swapped.is_empty() {
                outln!("Relabelled clusters: {}", swapped.join(", "));
            }
        }
    }
    Ok(())
}

fn cmd_compare(a: CompareArgs, file: FileConfig) -> Result<(), CliError> {
    let methods = if a.methods.is_empty() { file.methods.clone().unwrap_or_default() } else { a.methods };
    if methods.len() != 2 {
        return Err(usage("compare needs exactly two methods, e.g. `compare ml robust`"));
    }
    let methods = [parse_method(&methods[0])?, parse_method(&methods[1])?];
    let input = resolve_input(a.input, &file)?;
    let ci = resolve_ci(a.ci, &file, false)?;
    let data = load_data(&input)?;
    let fits = [run_fit(&data, methods[0], input.k)?, run_fit(&data, methods[1], input.k)?];
    for f in &fits {
        not_converged(f)?;
    }
    let tables = if a.confint {
        let options = ci_options(&ci, input.k);
        Some([confint(&fits[0], &data, &options)?, confint(&fits[1], &data, &options)?])
    } else {
        None
    };
    match input.output {
        Output::Json => {
            let mut doc = json!({
                "command": "compare",
                "config": { "input": &input, "methods": methods, "ci": a.confint.then_some(&ci) },
                "fits": fits.iter().map(|f| report::FitReport::new(f, &data)).collect::<Vec<_>>(),
            });
            if let Some(t) = &tables {
                doc["ci_tables"] = json!(t.iter().map(|t| json!({
                    "method": t.method, "boot_type": t.boot_type, "level": t.level,
                    "labels": &t.labels, "rows": &t.rows,
                })).collect::<Vec<_>>());
            }
            print_json(&doc)?;
        }
        _ => {
            out!("{}", report::compare_text(&[&fits[0], &fits[1]]));
            if let Some(t) = &tables {
                outln!();
                outln!("{}", ci_header(&t[0]));
                let labels: Vec<String> = methods.iter().map(|m| m.to_string()).collect();
                out!("{}", report::compare_ci_text(&labels, t));
            }
        }
    }
    Ok(())
}
