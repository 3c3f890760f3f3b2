use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mesoflow_cli::{parse_config, run_experiment, write_outputs, CliError, ModelKind};

/// Run one transport-network experiment described by a JSON configuration.
#[derive(Debug, Parser)]
#[command(name = "mesoflow", version)]
struct Args {
    /// Model to run.
    #[arg(value_enum)]
    model: ModelKind,
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; falls back to MESOFLOW_THREADS, then all cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory (a config `output` entry takes precedence).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn env_threads() -> Result<Option<usize>, CliError> {
    match std::env::var("MESOFLOW_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .map(Some)
            .ok_or_else(|| CliError::Config(vec![format!("MESOFLOW_THREADS must be a positive integer, got `{v}`")])),
        Err(_) => Ok(None),
    }
}

fn execute(args: &Args) -> Result<PathBuf, CliError> {
    let parsed = parse_config(&args.config, Some(args.model))?;
    for w in &parsed.warnings {
        eprintln!("warning: {w}");
    }
    let cfg = parsed.config;
    if args.threads == Some(0) {
        return Err(CliError::Config(vec!["--threads must be positive".into()]));
    }
    let threads = match cfg.threads.or(args.threads) {
        Some(n) => Some(n),
        None => env_threads()?,
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(vec![format!("cannot start {n} threads: {e}")]))?;
    }
    let dir = cfg.output.clone().or_else(|| args.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let run = run_experiment(&cfg)?;
    let manifest = write_outputs(&run, &cfg, &dir)?;
    println!("{}", serde_json::to_string(&run.summary["result"]).unwrap_or_default());
    eprintln!("wrote {} files to {}", manifest.files.len() + 1, dir.display());
    Ok(dir)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(&args) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
