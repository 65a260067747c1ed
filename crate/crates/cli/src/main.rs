mod commands;
mod config;
mod output;

use clap::{Parser, Subcommand};
use commands::Failure;
use config::RunConfig;
use serde_json::json;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "qpt", version, about = "Quasi-periodic Schrodinger transport experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Continued fraction expansion of alpha.
    Cf(RunArgs),
    /// Admissible denominator subsequence and scale windows.
    Admissible(RunArgs),
    /// Lyapunov exponent, rotation number and gaps on an energy grid.
    Scan(RunArgs),
    /// Reducibility iteration at one energy.
    Kam(RunArgs),
    /// Wave packet moments over time.
    Evolve(RunArgs),
    /// Correlation coefficients of the spectral transform.
    Correlations(RunArgs),
    /// Moments against the correlation lower bound.
    Report(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// JSON config document; `--key value` pairs override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0.., value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Cf(_) => "cf",
        Command::Admissible(_) => "admissible",
        Command::Scan(_) => "scan",
        Command::Kam(_) => "kam",
        Command::Evolve(_) => "evolve",
        Command::Correlations(_) => "correlations",
        Command::Report(_) => "report",
    }
}

fn report_failure(f: &Failure) -> ExitCode {
    let (record, code) = match f {
        Failure::Config(msg) => (json!({"kind": "ConfigInvalid", "module": "cli", "message": msg, "detail": null}), 2),
        Failure::Compute { module, message, detail } => {
            (json!({"kind": "ComputeError", "module": module, "message": message, "detail": detail}), 3)
        }
    };
    eprintln!("{record}");
    ExitCode::from(code)
}

fn thread_pool() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("QPT_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Config(format!("QPT_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), Failure> {
    thread_pool()?;
    let name = command_name(&cli.command);
    let args = match &cli.command {
        Command::Cf(a)
        | Command::Admissible(a)
        | Command::Scan(a)
        | Command::Kam(a)
        | Command::Evolve(a)
        | Command::Correlations(a)
        | Command::Report(a) => a,
    };
    let mut path = args.config.clone();
    let mut overrides = Vec::with_capacity(args.overrides.len());
    let mut it = args.overrides.iter();
    while let Some(flag) = it.next() {
        if flag == "--config" {
            let p = it.next().ok_or_else(|| Failure::Config("--config needs a path".into()))?;
            path = Some(PathBuf::from(p));
        } else {
            overrides.push(flag.clone());
        }
    }
    let cfg = RunConfig::load(path.as_deref(), &overrides).map_err(Failure::Config)?;
    let artifacts = match name {
        "cf" => commands::cf(&cfg),
        "admissible" => commands::admissible_cmd(&cfg),
        "scan" => commands::scan(&cfg),
        "kam" => commands::kam(&cfg),
        "evolve" => commands::evolve_cmd(&cfg),
        "correlations" => commands::correlations(&cfg),
        _ => commands::report(&cfg),
    }?;
    let io_failure = |e: std::io::Error| Failure::Compute { module: "cli", message: e.to_string(), detail: format!("{e:?}") };
    match &cfg.output {
        Some(dir) => output::commit(dir, &artifacts).map_err(io_failure),
        None => std::io::stdout().lock().write_all(&artifacts[0].bytes).map_err(io_failure),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report_failure(&f),
    }
}
