//! Experiment runner for the deterministic sampler analysis: configs,
//! acceptance rules, metrics tables and plots.

// `!(x > 0.0)` style checks are meant to reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod experiments;
pub mod fit;
pub mod plot;
pub mod report;

pub use config::{ExperimentConfig, ExperimentKind, SCHEMA};
pub use error::{LabError, Result};
pub use experiments::run_experiment;
pub use fit::{fit_order, SlopeFit};
pub use plot::{emit_plot, PlotSpec};
pub use report::{RunOutput, RunReport};

/// Worker count: `LAB_JOBS` when set, else `requested`, else all cores.
pub fn resolve_jobs(requested: Option<usize>, env: Option<&str>) -> Result<usize> {
    if let Some(v) = env {
        return match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(LabError::Input(format!("LAB_JOBS must be a positive integer, got `{v}`"))),
        };
    }
    Ok(requested
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)))
}
