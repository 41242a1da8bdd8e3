//! Command line: `train`, `verify`, `sweep`, `export`.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use super::config::{load_config, Preset, OUTPUT_ROOT_VAR};
use super::sweep::{export_csv, run_sweep, GridSpec, RunStats, SUMMARY_WINDOW};
use super::train::train_all;
use crate::error::{Error, Result};
use crate::oracle::verify::{run_verify, EstimatorFns, Suite, VerifyOptions};

#[derive(Debug, Parser)]
#[command(
    name = "capo",
    version,
    about = "Curvature-aware policy optimization on synthetic token tasks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one run per seed.
    Train {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// Comma-separated seeds, replacing `run.seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Output root; defaults to `run.output_dir`, then $CAPO_OUTPUT_ROOT, then `runs`.
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// `key=value` config override, repeatable.
        #[arg(short = 's', long = "set")]
        overrides: Vec<String>,
        /// Continue from existing checkpoints.
        #[arg(long)]
        resume: bool,
    },
    /// Run the numerical property batteries.
    Verify {
        #[arg(long, value_enum, default_value = "all")]
        suite: Suite,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        fuzz_cases: Option<usize>,
        /// Also write the report as JSON lines.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train the cross product of a grid's axes.
    Sweep {
        #[arg(short, long)]
        grid: PathBuf,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(short = 's', long = "set")]
        overrides: Vec<String>,
    },
    /// Export a run's metrics to CSV.
    Export {
        /// Run directory containing metrics.jsonl.
        #[arg(short, long)]
        run: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn default_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Parses `args` (including the program name) and runs the command. Returns the exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(command: Command) -> Result<u8> {
    match command {
        Command::Train {
            config,
            preset,
            seeds,
            output,
            mut overrides,
            resume,
        } => {
            if !seeds.is_empty() {
                let list: Vec<String> = seeds.iter().map(u64::to_string).collect();
                overrides.push(format!("run.seeds=[{}]", list.join(",")));
            }
            let cfg = load_config(config.as_deref(), preset, &overrides)?;
            let root = output.unwrap_or_else(|| cfg.output_root());
            for run in train_all(&cfg, &root, resume)? {
                let s = RunStats::from_records(&run.records, SUMMARY_WINDOW);
                let j = run
                    .final_record()
                    .exact_j
                    .map(|j| format!("{j:.4}"))
                    .unwrap_or_else(|| "-".into());
                println!(
                    "seed {:>4}  final reward {:.4}  exact J {}  mean rejection {:.4}  -> {}",
                    run.seed,
                    s.final_reward,
                    j,
                    s.mean_rejection_rate,
                    run.dir.display()
                );
            }
            Ok(0)
        }
        Command::Verify {
            suite,
            seed,
            instances,
            fuzz_cases,
            json,
        } => {
            let d = VerifyOptions::default();
            let opts = VerifyOptions {
                seed: seed.unwrap_or(d.seed),
                instances: instances.unwrap_or(d.instances),
                fuzz_cases: fuzz_cases.unwrap_or(d.fuzz_cases),
            };
            let report = run_verify(suite, EstimatorFns::default(), &opts)?;
            for c in &report.checks {
                println!(
                    "{:<5} {:<10} {:<28} measured {:>10.3e}  tol {:>8.1e}  {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.suite,
                    c.name,
                    c.measured,
                    c.tolerance,
                    c.detail
                );
            }
            if let Some(path) = json {
                let mut text = String::new();
                for c in &report.checks {
                    text.push_str(
                        &serde_json::to_string(c).map_err(|e| Error::Data(e.to_string()))?,
                    );
                    text.push('\n');
                }
                std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            }
            Ok(if report.passed() { 0 } else { 1 })
        }
        Command::Sweep {
            grid,
            preset,
            output,
            overrides,
        } => {
            let spec = GridSpec::load(&grid)?;
            let root = output.unwrap_or_else(default_root);
            let res = run_sweep(&spec, preset, &overrides, &root)?;
            println!(
                "{} cells, {} runs -> {}",
                res.cells.len(),
                res.runs.len(),
                root.display()
            );
            Ok(0)
        }
        Command::Export { run, out } => {
            let n = export_csv(&run, &out)?;
            println!("{n} rows -> {}", out.display());
            Ok(0)
        }
    }
}
