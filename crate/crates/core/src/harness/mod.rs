//! Scenario runner behind the `rtg` command-line tool.
//!
//! A scenario file names one experiment kind and its parameters; running it
//! writes CSV (dense data), JSON (metrics) and SVG (plots) into
//! `<out>/<scenario name>/`. Every report carries the SHA-256 of the scenario
//! text and the seed(s) used. The file format is documented in
//! `docs/formats.md`.

pub mod bench;
pub mod config;
mod experiments;
pub mod report;

use std::path::{Path, PathBuf};

use serde_json::json;
use thiserror::Error;

pub use bench::{machine_info, throughput_bench, BenchStats, MachineInfo};
pub use config::{ExperimentKind, Scenario};
pub use experiments::{strategy_setup, StrategySetup};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{}:{line}:{column}: parse error: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{}:{line}: invalid scenario: {message}", path.display())]
    Invalid { path: PathBuf, line: usize, message: String },
    #[error("file not found: {}", path.display())]
    FileNotFound { path: PathBuf },
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario {scenario} failed: {message}")]
    Run { scenario: String, message: String },
}

impl HarnessError {
    pub(crate) fn from_io(path: &Path, e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            HarnessError::FileNotFound { path: path.to_path_buf() }
        } else {
            HarnessError::Io {
                path: path.to_path_buf(),
                source: e,
            }
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Parse { .. } => "parse",
            HarnessError::Invalid { .. } => "invalid",
            HarnessError::FileNotFound { .. } => "file_not_found",
            HarnessError::Io { .. } => "io",
            HarnessError::Run { .. } => "run",
        }
    }

    /// Machine-readable form: `{"error": {"kind": ..., "message": ..., ...}}`
    /// with `path`, `line` and `column` where known.
    pub fn record(&self) -> serde_json::Value {
        let mut e = json!({ "kind": self.kind(), "message": self.to_string() });
        let o = e.as_object_mut().expect("object");
        match self {
            HarnessError::Parse { path, line, column, .. } => {
                o.insert("path".into(), json!(path.display().to_string()));
                o.insert("line".into(), json!(line));
                o.insert("column".into(), json!(column));
            }
            HarnessError::Invalid { path, line, .. } => {
                o.insert("path".into(), json!(path.display().to_string()));
                o.insert("line".into(), json!(line));
            }
            HarnessError::FileNotFound { path } | HarnessError::Io { path, .. } => {
                o.insert("path".into(), json!(path.display().to_string()));
            }
            HarnessError::Run { scenario, .. } => {
                o.insert("scenario".into(), json!(scenario));
            }
        }
        json!({ "error": e })
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Output root; the scenario's `[output] dir` (or `out`) when `None`.
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Write the blend QPs of the last accepted window.
    pub dump_qp: bool,
}

/// What a scenario run produced.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub scenario: String,
    pub kind: ExperimentKind,
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
    /// Contents of the main JSON report.
    pub report: serde_json::Value,
}

/// Directory a scenario writes into.
pub fn output_dir(scenario: &Scenario, opts: &RunOptions) -> PathBuf {
    let root = match (&opts.out_dir, scenario.file.output.as_ref().and_then(|o| o.dir.as_deref())) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) => scenario.resolve(d),
        (None, None) => PathBuf::from("out"),
    };
    root.join(scenario.name())
}

/// Loads, validates and runs the scenario at `path`.
pub fn run_scenario(path: &Path, opts: &RunOptions) -> Result<RunSummary, HarnessError> {
    let scenario = Scenario::load(path)?.with_seed_override(opts.seed);
    run_loaded(&scenario, opts)
}

pub fn run_loaded(scenario: &Scenario, opts: &RunOptions) -> Result<RunSummary, HarnessError> {
    let out_dir = output_dir(scenario, opts);
    std::fs::create_dir_all(&out_dir).map_err(|e| HarnessError::from_io(&out_dir, e))?;
    experiments::run(scenario, &out_dir, opts)
}

/// Parses and validates without running.
pub fn validate_scenario(path: &Path) -> Result<Scenario, HarnessError> {
    Scenario::load(path)
}
