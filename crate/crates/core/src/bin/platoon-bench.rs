use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use platoon::cli::{
    describe_matrix, emit_plot_data, parse_config, run_matrix, PlotKind, OUTPUT_ENV,
};
use platoon::error::BenchError;

/// Run a benchmark matrix of platoon controllers.
///
/// Exit status: 0 when every run completed, 1 when a run failed or outputs
/// could not be written, 2 on a configuration error.
#[derive(Debug, Parser)]
#[command(name = "platoon-bench", version)]
struct Args {
    /// JSON benchmark configuration.
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory; overrides the configuration and the environment.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Parallel runs.
    #[arg(long, short, default_value_t = 1)]
    workers: usize,
    /// Replace every seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Print the expanded matrix and exit.
    #[arg(long)]
    dry_run: bool,
    /// Skip writing plot data.
    #[arg(long)]
    no_plots: bool,
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let level = match args.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let text = match std::fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read {}: {e}", args.config.display());
            return ExitCode::from(2);
        }
    };
    let cfg = match parse_config(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    let cfg = match args.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    let ids = match describe_matrix(&cfg) {
        Ok(ids) => ids,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    println!("{} runs", ids.len());
    if args.dry_run {
        for id in ids {
            println!("{id}");
        }
        return ExitCode::SUCCESS;
    }

    let out = args
        .output
        .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| cfg.output.clone());
    let outcome = match run_matrix(&cfg, &out, args.workers) {
        Ok(o) => o,
        Err(e @ BenchError::Config(_)) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };
    if !args.no_plots && outcome.failures < outcome.runs {
        for kind in [PlotKind::Trajectory, PlotKind::Sweep] {
            if let Err(e) = emit_plot_data(&out, kind) {
                eprintln!("plot data: {e}");
                return ExitCode::from(1);
            }
        }
    }
    println!(
        "{} runs, {} baselines, {} failed; results in {}",
        outcome.runs,
        outcome.baselines,
        outcome.failures,
        out.display()
    );
    ExitCode::from(outcome.exit_code() as u8)
}
