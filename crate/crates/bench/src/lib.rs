//! Benchmark harness for the featbank write strategies: scenario files,
//! labelled runs, capacity sweeps and strategy comparisons, reported as CSV
//! or JSON plot data.

pub mod config;
pub mod report;
pub mod runner;

use std::path::Path;

use featbank::simstream::{generate, read_trace, ScenarioError, Sequence, TraceError};
use featbank::{BankError, SequenceError};
use thiserror::Error;

pub use config::{bundled, load_scenario, parse_scenario, ConfigError, BUNDLED};
pub use report::{linear_fit, FrameRow, RunReport, Summary, SCHEMA_VERSION};
pub use runner::{
    mean_read_seconds, parallel_map, run_jobs, run_report, sweep_table, thread_cap, Job, RunOptions, SweepRow,
    THREADS_ENV,
};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("{path}: {source}")]
    Trace { path: String, source: TraceError },
    #[error(transparent)]
    Sequence(#[from] SequenceError),
    #[error("writing {path}: {source}")]
    Output { path: String, source: std::io::Error },
}

impl BenchError {
    /// 1 usage, 2 data, 3 internal.
    pub fn exit_code(&self) -> u8 {
        match self {
            BenchError::Usage(_) => 1,
            BenchError::Config(_) | BenchError::Scenario(_) | BenchError::Trace { .. } => 2,
            BenchError::Output { .. } => 3,
            BenchError::Sequence(e) => match e {
                SequenceError::Config(_) => 1,
                SequenceError::Grid(_)
                | SequenceError::TooShort(_)
                | SequenceError::NonIncreasingFrame { .. }
                | SequenceError::AnnotationOutsideSequence { .. }
                | SequenceError::MissingAnnotation { .. }
                | SequenceError::MixedDims { .. } => 2,
                SequenceError::Bank(
                    BankError::CeilingExceeded { .. }
                    | BankError::CapacityTooSmall { .. }
                    | BankError::DimensionMismatch { .. }
                    | BankError::ValueChannels { .. }
                    | BankError::NoObjects(_)
                    | BankError::NoSupport(_),
                ) => 2,
                SequenceError::Bank(_) | SequenceError::Predictor(_) => 3,
            },
        }
    }
}

/// Where a run's frames come from.
#[derive(Clone, Debug, PartialEq)]
pub enum Input {
    Trace(String),
    /// A scenario file path or bundled scenario name.
    Scenario(String),
}

/// Loads the labelled sequences of one input.
///
/// A scenario yields `seeds` sequences with consecutive seeds starting at
/// `seed` (or the file's own seed); a trace yields exactly one.
pub fn load_input(input: &Input, seed: Option<u64>, seeds: usize) -> Result<Vec<(String, Sequence<f32>)>, BenchError> {
    if seeds == 0 {
        return Err(BenchError::Usage("--seeds must be at least 1".into()));
    }
    match input {
        Input::Trace(path) => {
            if seeds > 1 {
                return Err(BenchError::Usage("--seeds applies to --scenario inputs only".into()));
            }
            let seq = read_trace(Path::new(path)).map_err(|source| BenchError::Trace {
                path: path.clone(),
                source,
            })?;
            Ok(vec![(format!("trace={path}"), seq)])
        }
        Input::Scenario(name) => {
            let mut scenario = load_scenario(name)?;
            let first = seed.unwrap_or(scenario.rng_seed);
            (0..seeds as u64)
                .map(|i| {
                    scenario.rng_seed = first + i;
                    Ok((format!("seed={}", scenario.rng_seed), generate::<f32>(&scenario)?))
                })
                .collect()
        }
    }
}
