use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pflow_lab::{emit_plot, resolve_jobs, run_experiment, ExperimentConfig, LabError, PlotSpec};

#[derive(Parser)]
#[command(name = "lab", version, about = "Run and check sampler experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write report.json, metrics.csv and plot.svg.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; LAB_JOBS takes precedence.
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check a config and list every problem found.
    Validate { config: PathBuf },
    /// Plot two columns of a metrics table.
    Plot {
        metrics: PathBuf,
        #[arg(long)]
        x: String,
        #[arg(long)]
        y: String,
        /// Column that splits rows into series.
        #[arg(long)]
        group: Option<String>,
        #[arg(long)]
        log_log: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the config JSON schema.
    Schema,
}

const FAIL: u8 = 1;
const ERROR: u8 = 2;

fn base_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn run(cli: Cli) -> Result<ExitCode, LabError> {
    match cli.command {
        Command::Run { config, out, jobs, seed } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let env = std::env::var("LAB_JOBS").ok();
            let jobs = resolve_jobs(jobs, env.as_deref())?;
            let base = base_dir(&config);
            let dir = out
                .or_else(|| cfg.output_dir.as_ref().map(|d| base.join(d)))
                .unwrap_or_else(|| PathBuf::from("out"));
            let output = run_experiment(&cfg, &base, jobs)?;
            output.write(&dir)?;
            for rule in &output.report.rules {
                println!("{} {}: {}", if rule.pass { "PASS" } else { "FAIL" }, rule.name, rule.detail);
            }
            println!("wrote {}", dir.display());
            Ok(if output.report.pass { ExitCode::SUCCESS } else { ExitCode::from(FAIL) })
        }
        Command::Validate { config } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let errors = cfg.validate(&base_dir(&config));
            if errors.is_empty() {
                println!("{}: ok", config.display());
                Ok(ExitCode::SUCCESS)
            } else {
                Err(LabError::Config(errors))
            }
        }
        Command::Plot { metrics, x, y, group, log_log, out } => {
            let spec = PlotSpec {
                group,
                log_x: log_log,
                log_y: log_log,
                ..PlotSpec::log_log(&x, &y)
            };
            let out = out.unwrap_or_else(|| metrics.with_file_name("plot.svg"));
            emit_plot(&metrics, &spec, &out)?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Schema => {
            print!("{}", pflow_lab::SCHEMA);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(ERROR)
        }
    }
}
