use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mtsparse::envs::resolve_tasks;
use mtsparse::exp::{aggregate_dir, run_experiment, ExperimentConfig};
use mtsparse::Error;

#[derive(Parser)]
#[command(
    name = "mtsparse",
    about = "Sparse multi-task PPO experiments",
    after_help = "Relative output_dir values are resolved against $MTSPARSE_OUTPUT_ROOT when it is set."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train every seed of a config and log one CSV per run.
    Run {
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
    },
    /// Aggregate run CSVs under a directory into JSON and SVG figures.
    Aggregate {
        dir: PathBuf,
        /// Defaults to `<dir>/aggregate`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the task constants of a benchmark as JSON.
    DumpTasks { benchmark: String },
}

fn exit_for(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Config(_) | Error::Json(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run { config, jobs, seed_offset } => {
            let cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return exit_for(&e),
            };
            match run_experiment(&cfg, jobs, seed_offset) {
                Ok(m) if m.all_completed() => {
                    log::info!("{} runs written to {}", m.runs.len(), cfg.resolved_output().display());
                    ExitCode::SUCCESS
                }
                Ok(m) => {
                    let failed = m.runs.iter().filter(|r| r.error.is_some()).count();
                    eprintln!("error: {failed} of {} runs failed, see manifest.json", m.runs.len());
                    ExitCode::from(1)
                }
                Err(e) => exit_for(&e),
            }
        }
        Cmd::Aggregate { dir, out } => {
            let out = out.unwrap_or_else(|| dir.join("aggregate"));
            match aggregate_dir(&dir, &out) {
                Ok(a) => {
                    log::info!("{} treatment(s) aggregated into {}", a.treatments.len(), out.display());
                    ExitCode::SUCCESS
                }
                Err(e) => exit_for(&e),
            }
        }
        Cmd::DumpTasks { benchmark } => match resolve_tasks(&benchmark) {
            Ok(tasks) => {
                let recs = mtsparse::envs::task_records(&tasks);
                println!("{}", serde_json::to_string_pretty(&recs).expect("task records serialize"));
                ExitCode::SUCCESS
            }
            Err(e) => exit_for(&e),
        },
    }
}
