//! `hybrid-pmp`: batch front end.
//!
//! ```text
//! hybrid-pmp [--config run.toml] [COMMAND] [overrides...]
//! ```
//!
//! Exit codes: 0 success, 2 configuration error, 3 solver did not converge,
//! 4 internal error.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use config::{Command, ConfigError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "hybrid-pmp", version, about = "Indirect optimal control for hybrid systems with rank-deficient resets")]
struct Cli {
    /// Command to run; overrides `command` in the config file.
    #[arg(value_enum)]
    command: Option<Command>,
    /// TOML run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    example: Option<String>,
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    initial_state: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    decision: Option<Vec<f64>>,
    #[arg(short = 'n', long)]
    reset_count: Option<usize>,
    #[arg(long)]
    n_max: Option<usize>,
    #[arg(long)]
    rtol: Option<f64>,
    #[arg(long)]
    atol: Option<f64>,
    #[arg(long)]
    newton_tol: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Cli {
    fn into_config(self) -> Result<RunConfig, ConfigError> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        c.command = self.command.or(c.command);
        c.example = self.example.or(c.example);
        c.output_dir = self.output_dir.or(c.output_dir);
        c.initial_state = self.initial_state.or(c.initial_state);
        c.decision = self.decision.or(c.decision);
        c.reset_count = self.reset_count.or(c.reset_count);
        c.n_max = self.n_max.or(c.n_max);
        c.tolerances.rtol = self.rtol.or(c.tolerances.rtol);
        c.tolerances.atol = self.atol.or(c.tolerances.atol);
        c.tolerances.newton_tol = self.newton_tol.or(c.tolerances.newton_tol);
        c.oracle.iterations = self.iterations.or(c.oracle.iterations);
        c.oracle.seed = self.seed.or(c.oracle.seed);
        Ok(c)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = cli
        .into_config()
        .map_err(run::RunError::from)
        .and_then(|c| run::run(&c).map(|files| (c, files)));
    match result {
        Ok((c, files)) => {
            println!("wrote {} files to {}", files.len() + 1, c.output_dir().display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
