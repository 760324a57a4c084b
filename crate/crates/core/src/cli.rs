//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::catalog::{self, Catalog};
use crate::metrics::{write_csv, MetricsError, MetricsRecord};
use crate::protocols::ProtocolKind;
use crate::runner::{self, CellOptions, RunError};
use crate::scenarios::{cell_matrix, ScenarioConfig, ScenarioKind, SizePreset};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_IO: i32 = 2;

pub const OUT_ENV: &str = "PCNSIM_OUT";
pub const RESULTS_FILE: &str = "results.csv";
pub const CONFIG_FILE: &str = "results.config.json";
pub const DEFAULTS_FILE: &str = "results.defaults.json";

#[derive(Debug, Parser)]
#[command(name = "pcnsim", version, about = "Payment channel network routing simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one cell and write a one-row results.csv.
    Run(RunArgs),
    /// Run every scenario × size × protocol × seed cell.
    Matrix(RunArgs),
    /// Query the protocol catalog.
    Catalog {
        #[command(subcommand)]
        query: CatalogQuery,
    },
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum CatalogQuery {
    Shortlist,
    Selected,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON scenario config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub size: Option<String>,
    #[arg(long)]
    pub protocol: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub seeds: Option<u64>,
    #[arg(long)]
    pub payments: Option<usize>,
    /// Output directory (overridden by PCNSIM_OUT).
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Write the event trace next to the results.
    #[arg(long)]
    pub trace: bool,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Io(e.to_string())
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn parse_name<T: std::str::FromStr>(raw: &Option<String>) -> Result<Option<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    raw.as_deref()
        .map(|s| s.parse::<T>().map_err(|e| CliError::Config(e.to_string())))
        .transpose()
}

/// Resolves config file plus overrides into a validated cell config.
pub fn resolve_config(args: &RunArgs) -> Result<ScenarioConfig, CliError> {
    let scenario = parse_name::<ScenarioKind>(&args.scenario)?;
    let size = parse_name::<SizePreset>(&args.size)?;
    let protocol = parse_name::<ProtocolKind>(&args.protocol)?;
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => ScenarioConfig::default(),
    };
    if let Some(v) = scenario {
        cfg.scenario = v;
    }
    if let Some(v) = size {
        cfg.size = v;
    }
    if let Some(v) = protocol {
        cfg.protocol = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.seeds {
        cfg.seeds = v;
    }
    if let Some(v) = args.payments {
        cfg.payments = Some(v);
    }
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

fn out_dir(args: &RunArgs) -> PathBuf {
    match std::env::var_os(OUT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => args.out.clone(),
    }
}

/// Dotted paths of the leaves of `cfg` that still hold the built-in default.
pub fn defaulted_fields(cfg: &ScenarioConfig) -> Vec<String> {
    fn walk(prefix: &str, got: &serde_json::Value, def: &serde_json::Value, out: &mut Vec<String>) {
        match (got, def) {
            (serde_json::Value::Object(g), serde_json::Value::Object(d)) => {
                for (k, v) in g {
                    let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    if let Some(dv) = d.get(k) {
                        walk(&path, v, dv, out);
                    }
                }
            }
            _ if got == def => out.push(prefix.to_string()),
            _ => {}
        }
    }
    let got = serde_json::to_value(cfg).expect("config serializes");
    let def = serde_json::to_value(ScenarioConfig::default()).expect("config serializes");
    let mut out = Vec::new();
    walk("", &got, &def, &mut out);
    out
}

fn prepare_out(dir: &Path, cfg: &ScenarioConfig) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = dir.join(CONFIG_FILE);
    let json = serde_json::to_string_pretty(cfg).expect("config serializes");
    fs::write(&path, json + "\n").map_err(|e| io_err(&path, e))?;
    let path = dir.join(DEFAULTS_FILE);
    let json = serde_json::to_string_pretty(&defaulted_fields(cfg)).expect("list serializes");
    fs::write(&path, json + "\n").map_err(|e| io_err(&path, e))
}

fn trace_name(cfg: &ScenarioConfig) -> String {
    format!("trace_{}_{}_{}_{}.log", cfg.scenario, cfg.size, cfg.protocol, cfg.seed)
}

fn run_traced(cfg: &ScenarioConfig, dir: &Path) -> Result<MetricsRecord, CliError> {
    let opts = CellOptions { trace: true, audit: false };
    let out = runner::run_cell_with(cfg, opts)?;
    let path = dir.join(trace_name(cfg));
    let mut text = String::new();
    for rec in out.report.trace.iter().flatten() {
        text.push_str(&rec.to_string());
        text.push('\n');
    }
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok(out.record)
}

fn run_one(args: &RunArgs) -> Result<PathBuf, CliError> {
    let cfg = resolve_config(args)?;
    let dir = out_dir(args);
    prepare_out(&dir, &cfg)?;
    let record = if args.trace {
        run_traced(&cfg, &dir)?
    } else {
        runner::run_cell(&cfg)?
    };
    let path = dir.join(RESULTS_FILE);
    write_csv(&[record], &path)?;
    Ok(path)
}

fn run_matrix(args: &RunArgs) -> Result<PathBuf, CliError> {
    let base = resolve_config(args)?;
    if base.seeds == 0 {
        return Err(CliError::Config("seeds must be at least 1".into()));
    }
    let dir = out_dir(args);
    prepare_out(&dir, &base)?;
    let cells = cell_matrix(&base);
    let jobs = args.jobs.max(1);
    let results = if args.trace {
        runner::map_cells(&cells, jobs, |c| run_traced(c, &dir))?
    } else {
        runner::map_cells(&cells, jobs, |c| runner::run_cell(c).map_err(CliError::from))?
    };
    let records = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let path = dir.join(RESULTS_FILE);
    write_csv(&records, &path)?;
    Ok(path)
}

fn run_catalog(query: CatalogQuery, out: &mut dyn Write) -> Result<(), CliError> {
    let cat = Catalog::shipped();
    let names: Vec<&str> = match query {
        CatalogQuery::Shortlist => catalog::shortlist(&cat),
        CatalogQuery::Selected => catalog::selected(&cat).map_err(|e| CliError::Config(e.to_string()))?,
    };
    for n in names {
        writeln!(out, "{n}").map_err(|e| CliError::Io(e.to_string()))?;
    }
    Ok(())
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Run(args) => {
            let path = run_one(args)?;
            writeln!(out, "{}", path.display()).map_err(|e| CliError::Io(e.to_string()))
        }
        Command::Matrix(args) => {
            let path = run_matrix(args)?;
            writeln!(out, "{}", path.display()).map_err(|e| CliError::Io(e.to_string()))
        }
        Command::Catalog { query } => run_catalog(*query, out),
    }
}

/// Parses `argv` (including the program name), runs, and returns the exit code.
pub fn main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    match execute(&cli, &mut stdout.lock()) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
