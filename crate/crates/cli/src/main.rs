use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nested_eig::commands::{self, PilotFile};
use nested_eig::{CliError, RunConfig};
use nuisance_eig::design;
use nuisance_eig::EstimatorKind;

#[derive(Parser, Debug)]
#[command(
    name = "nested-eig",
    version,
    about = "Expected information gain with nuisance parameters"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads. Results do not depend on this value.
    #[arg(long, global = true, env = "NESTED_EIG_THREADS")]
    threads: Option<usize>,

    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(long, global = true)]
    tol: Option<f64>,

    #[arg(long, global = true)]
    alpha: Option<f64>,

    /// Pilot constants written by `pilot`.
    #[arg(long, global = true)]
    constants: Option<PathBuf>,

    /// Estimator for `allocate` when no configuration is given.
    #[arg(long, global = true)]
    estimator: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate the bias and variance constants.
    Pilot,
    /// Print the optimal sample sizes for a tolerance.
    Allocate,
    /// Run an estimator to tolerance and append a CSV row.
    Estimate,
    /// Evaluate the EIG over a design grid.
    Sweep,
    /// Coordinate ascent on the design.
    Optimize,
    /// Count tolerance violations against the analytic EIG.
    Consistency,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.tol {
        cfg.tol = t;
    }
    if let Some(a) = cli.alpha {
        cfg.alpha = a;
    }
    if let Some(kind) = &cli.estimator {
        cfg.estimator = parse_estimator(kind)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_estimator(name: &str) -> Result<EstimatorKind, CliError> {
    serde_json::from_value(serde_json::Value::String(name.to_owned()))
        .map_err(|_| CliError::Config(format!("unknown estimator `{name}`")))
}

fn load_constants(path: &Path) -> Result<PilotFile, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    PilotFile::from_json(&text)
}

fn init_threads(n: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = n {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text)
        .map_err(|e| CliError::Estimation(format!("cannot write {}: {e}", path.display())))
}

/// Writes to `out` when given, else to stdout.
fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Command::Allocate = cli.command {
        init_threads(cli.threads)?;
        return allocate(cli);
    }
    let cfg = load_config(cli)?;
    init_threads(cli.threads.or(cfg.threads))?;
    let out = cli.out.clone().or_else(|| cfg.output.clone());
    let out = out.as_deref();
    match cli.command {
        Command::Pilot => emit(out, &(commands::pilot(&cfg)?.to_json() + "\n")),
        Command::Estimate => {
            let constants = cli.constants.as_deref().map(load_constants).transpose()?;
            let row = commands::estimate(&cfg, constants.as_ref().map(|f| &f.constants))?;
            let header = commands::estimate_csv_header(row.xi.len());
            let line = row.csv_line();
            match out {
                Some(p) => append_row(p, &header, &line),
                None => {
                    print!("{header}{line}");
                    Ok(())
                }
            }
        }
        Command::Sweep => emit(out, &design::sweep_csv(&commands::sweep(&cfg)?)),
        Command::Optimize => {
            let outcome = commands::optimize(&cfg)?;
            let xi: Vec<String> = outcome.xi.iter().map(f64::to_string).collect();
            eprintln!("final design: {}", xi.join(","));
            emit(out, &design::trace_csv(&outcome.trace))
        }
        Command::Consistency => emit(out, &commands::consistency(&cfg)?.to_csv()),
        Command::Allocate => unreachable!(),
    }
}

fn allocate(cli: &Cli) -> Result<(), CliError> {
    let cfg = cli.config.as_ref().map(|_| load_config(cli)).transpose()?;
    let path = cli
        .constants
        .as_ref()
        .ok_or_else(|| CliError::Config("--constants is required".into()))?;
    let file = load_constants(path)?;
    let tol = cli
        .tol
        .or(cfg.as_ref().map(|c| c.tol))
        .ok_or_else(|| CliError::Config("--tol is required".into()))?;
    let alpha = cli.alpha.or(cfg.as_ref().map(|c| c.alpha)).unwrap_or(0.05);
    let kind = match (&cli.estimator, &cfg) {
        (Some(name), _) => parse_estimator(name)?,
        (None, Some(c)) => c.estimator,
        (None, None) => EstimatorKind::Dlmc2is,
    };
    let a = commands::allocate(&file.constants, tol, alpha, kind)?;
    let text = serde_json::to_string_pretty(&a).expect("allocation serializes") + "\n";
    print!("{text}");
    if let Some(p) = &cli.out {
        write_file(p, &text)?;
    }
    Ok(())
}

/// Appends `line`, writing `header` first when the file is new or empty.
fn append_row(path: &Path, header: &str, line: &str) -> Result<(), CliError> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CliError::Estimation(format!("cannot open {}: {e}", path.display())))?;
    let text = if fresh {
        format!("{header}{line}")
    } else {
        line.to_owned()
    };
    f.write_all(text.as_bytes())
        .map_err(|e| CliError::Estimation(format!("cannot write {}: {e}", path.display())))
}
