//! `chainslam` — run posture-estimation scenarios, recompute metrics from a
//! run log, and export maps.
//!
//! Exit codes: 0 success, 1 usage/parse/filesystem error, 2 numerical abort.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use chainslam::metrics::metrics;
use chainslam::runlog::read_csv;
use chainslam::runner::{run_to_dir, RunError};
use chainslam::scenario::{golden, Scenario};

#[derive(Parser)]
#[command(name = "chainslam", about = "Articulated-chain posture estimation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate and estimate a scenario, writing logs into an output directory
    Run {
        /// Scenario file path, or a bundled name: fixed5, fixed20, free20, consistency5
        scenario: String,
        /// Output directory (created if missing)
        #[arg(short, long)]
        output: PathBuf,
        /// Override the scenario's random seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Recompute the metrics summary from a run log CSV and print it
    Metrics {
        /// Path to run_log.csv
        runlog: PathBuf,
    },
    /// Export the map of a finished run, optionally as ASCII PLY
    ExportMap {
        /// Run output directory containing map.txt
        dir: PathBuf,
        /// Write PLY instead of bare `x y z` lines
        #[arg(long)]
        ply: bool,
        /// Output file (stdout when omitted)
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

fn load_scenario(spec: &str) -> Result<Scenario, String> {
    let path = Path::new(spec);
    if path.exists() {
        Scenario::from_path(path).map_err(|e| format!("{spec}: {e}"))
    } else if let Some(s) = golden(spec) {
        Ok(s)
    } else {
        Err(format!(
            "{spec}: no such file or bundled scenario (bundled: fixed5, fixed20, free20, consistency5)"
        ))
    }
}

fn usage_error(msg: &str) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are successful exits; everything else is usage
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };

    match cli.command {
        Command::Run { scenario, output, seed } => {
            let mut scenario = match load_scenario(&scenario) {
                Ok(s) => s,
                Err(msg) => return usage_error(&msg),
            };
            if let Some(seed) = seed {
                scenario.run.seed = seed;
            }
            if let Err(e) = scenario.validate() {
                return usage_error(&format!("invalid scenario: {e}"));
            }
            match run_to_dir(&scenario, &output) {
                Ok(out) => {
                    print!("{}", out.metrics.to_text());
                    ExitCode::SUCCESS
                }
                Err(RunError::Estimator(e)) => {
                    eprintln!("numerical abort: {e}");
                    ExitCode::from(2)
                }
                Err(e) => usage_error(&e.to_string()),
            }
        }
        Command::Metrics { runlog } => {
            let file = match fs::File::open(&runlog) {
                Ok(f) => f,
                Err(e) => return usage_error(&format!("{}: {e}", runlog.display())),
            };
            match read_csv(file) {
                Ok(rows) => {
                    print!("{}", metrics(&rows).to_text());
                    ExitCode::SUCCESS
                }
                Err(e) => usage_error(&format!("{}: {e}", runlog.display())),
            }
        }
        Command::ExportMap { dir, ply, output } => {
            let map_path = dir.join("map.txt");
            let text = match fs::read_to_string(&map_path) {
                Ok(t) => t,
                Err(e) => return usage_error(&format!("{}: {e}", map_path.display())),
            };
            let body = if ply {
                let count = text.lines().count();
                format!(
                    "ply\nformat ascii 1.0\nelement vertex {count}\n\
                     property double x\nproperty double y\nproperty double z\n\
                     end_header\n{text}"
                )
            } else {
                text
            };
            let result = match output {
                Some(path) => fs::write(&path, body).map_err(|e| format!("{}: {e}", path.display())),
                None => std::io::stdout()
                    .write_all(body.as_bytes())
                    .map_err(|e| e.to_string()),
            };
            match result {
                Ok(()) => ExitCode::SUCCESS,
                Err(msg) => usage_error(&msg),
            }
        }
    }
}
