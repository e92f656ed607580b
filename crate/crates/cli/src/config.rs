//! Run configuration: a TOML file merged with command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("field `{field}`: {message}")]
    Invalid { field: &'static str, message: String },
}

fn invalid(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Simulate,
    Solve,
    Scan,
    JumpDemo,
    Oracle,
    Reproduce,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Solve => "solve",
            Command::Scan => "scan",
            Command::JumpDemo => "jump-demo",
            Command::Oracle => "oracle",
            Command::Reproduce => "reproduce",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    pub rtol: Option<f64>,
    pub atol: Option<f64>,
    pub newton_tol: Option<f64>,
    pub jump_tol: Option<f64>,
    pub event_tol: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemParams {
    pub final_time: Option<f64>,
    pub target: Option<[f64; 3]>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleParams {
    pub iterations: Option<usize>,
    pub seed: Option<u64>,
    pub intervals: Option<usize>,
    pub penalty_weight: Option<f64>,
    pub reset_count: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpParams {
    pub pre_state: Option<[f64; 3]>,
    pub pre_costate: Option<[f64; 3]>,
}

/// File schema. Every field is optional here; [`RunConfig::validate`] checks
/// what each command needs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Option<Command>,
    pub example: Option<String>,
    pub output_dir: Option<PathBuf>,
    pub initial_state: Option<Vec<f64>>,
    /// Shooting decision `[p0, final-jump parameters]`; defaults to the
    /// example's seed for the reset count.
    pub decision: Option<Vec<f64>>,
    pub reset_count: Option<usize>,
    pub n_max: Option<usize>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub problem: ProblemParams,
    #[serde(default)]
    pub oracle: OracleParams,
    #[serde(default)]
    pub jump: JumpParams,
}

pub const DEFAULT_EXAMPLE: &str = "bouncing_ball_internal";

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn example_id(&self) -> &str {
        self.example.as_deref().unwrap_or(DEFAULT_EXAMPLE)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    /// Checks field ranges and the fields the command requires.
    pub fn validate(&self) -> Result<Command, ConfigError> {
        let command = self
            .command
            .ok_or_else(|| invalid("command", "missing (one of simulate, solve, scan, jump-demo, oracle, reproduce)"))?;
        let t = &self.tolerances;
        for (field, v) in [
            ("tolerances.rtol", t.rtol),
            ("tolerances.atol", t.atol),
            ("tolerances.newton_tol", t.newton_tol),
            ("tolerances.jump_tol", t.jump_tol),
            ("tolerances.event_tol", t.event_tol),
            ("oracle.penalty_weight", self.oracle.penalty_weight),
        ] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(invalid(field, format!("must be positive, got {v}")));
                }
            }
        }
        if let Some(tf) = self.problem.final_time {
            if !(tf >= 0.0 && tf.is_finite()) {
                return Err(invalid("problem.final_time", format!("must be non-negative, got {tf}")));
            }
        }
        if let Some(x) = &self.initial_state {
            if x.len() != 3 {
                return Err(invalid("initial_state", format!("needs 3 entries, got {}", x.len())));
            }
        }
        if self.oracle.intervals == Some(0) {
            return Err(invalid("oracle.intervals", "must be at least 1"));
        }
        if matches!(command, Command::Simulate | Command::Solve) && self.reset_count.is_none() {
            return Err(invalid("reset_count", format!("required by `{}`", command.name())));
        }
        if command == Command::Simulate && self.decision.is_none() && self.reset_count.is_some_and(|n| n > 3) {
            return Err(invalid("decision", "required when no seed exists for this reset count"));
        }
        Ok(command)
    }
}
