//! Command dispatch and artifact writing.

use std::fmt::Write as _;
use std::path::Path;

use hybrid_pmp::bouncing_ball::{self, BallState};
use hybrid_pmp::integrate::Tolerances;
use hybrid_pmp::jump::{self, JumpOptions};
use hybrid_pmp::oracle::{self, RefineOptions};
use hybrid_pmp::output;
use hybrid_pmp::registry::{self, Example};
use hybrid_pmp::shooting::{self, DecisionLayout, ScanRow, ScanTable, ShootingOptions, ShootingSpec, SimulationStatus};
use hybrid_pmp::{FlowOptions, HybridProblem};
use nalgebra::DVector;
use serde_json::json;
use thiserror::Error;

use crate::config::{Command, ConfigError, RunConfig};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("not converged: {0}")]
    NotConverged(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::NotConverged(_) => 3,
            RunError::Internal(_) => 4,
        }
    }
}

impl From<hybrid_pmp::Error> for RunError {
    fn from(e: hybrid_pmp::Error) -> Self {
        match e {
            hybrid_pmp::Error::NoConvergence { .. } | hybrid_pmp::Error::NoNextCrossing => {
                RunError::NotConverged(e.to_string())
            }
            other => RunError::Internal(other.to_string()),
        }
    }
}

/// Effective numerical settings after applying overrides.
struct Settings {
    tolerances: Tolerances,
    event_tol: f64,
    newton_tol: f64,
    jump_tol: f64,
}

impl Settings {
    fn from_config(c: &RunConfig) -> Self {
        let d = Tolerances::default();
        let t = &c.tolerances;
        Self {
            tolerances: Tolerances {
                rtol: t.rtol.unwrap_or(d.rtol),
                atol: t.atol.unwrap_or(d.atol),
            },
            event_tol: t.event_tol.unwrap_or(FlowOptions::default().event_tol),
            newton_tol: t.newton_tol.unwrap_or(1e-9),
            jump_tol: t.jump_tol.unwrap_or(1e-9),
        }
    }

    fn flow(&self) -> FlowOptions {
        FlowOptions {
            tolerances: self.tolerances.clone(),
            event_tol: self.event_tol,
            ..FlowOptions::default()
        }
    }

    fn jump(&self) -> JumpOptions {
        let mut j = JumpOptions {
            flow: self.flow().quiet(),
            ..JumpOptions::default()
        };
        j.newton.tol = self.jump_tol;
        j
    }

    fn shooting(&self) -> ShootingOptions {
        let mut o = ShootingOptions {
            flow: self.flow(),
            ..ShootingOptions::default()
        };
        o.newton.tol = self.newton_tol;
        o.jump.newton.tol = self.jump_tol;
        o.jump.flow = self.flow().quiet();
        o
    }

    fn record(&self) -> serde_json::Value {
        json!({
            "rtol": self.tolerances.rtol,
            "atol": self.tolerances.atol,
            "event_tol": self.event_tol,
            "newton_tol": self.newton_tol,
            "jump_tol": self.jump_tol,
        })
    }
}

struct Prepared {
    command: Command,
    example: Example,
    x0: DVector<f64>,
    settings: Settings,
}

fn prepare(c: &RunConfig) -> Result<Prepared, RunError> {
    let command = c.validate()?;
    let mut example = registry::lookup(c.example_id()).map_err(|e| ConfigError::Invalid {
        field: "example",
        message: e.to_string(),
    })?;
    if let Some(tf) = c.problem.final_time {
        example.problem.final_time = tf;
    }
    if let Some(target) = c.problem.target {
        example.problem.target = target;
    }
    let x0 = c
        .initial_state
        .as_ref()
        .map(|v| DVector::from_column_slice(v))
        .unwrap_or_else(|| example.initial_state.clone());
    if let (Some(n), Some(d)) = (c.reset_count, &c.decision) {
        let need = DecisionLayout::new(&example.problem, n).decision_len();
        if d.len() != need {
            return Err(ConfigError::Invalid {
                field: "decision",
                message: format!("{} entries given, {n} resets need {need}", d.len()),
            }
            .into());
        }
    }
    Ok(Prepared {
        command,
        example,
        x0,
        settings: Settings::from_config(c),
    })
}

fn guess(c: &RunConfig, ex: &Example, n: usize) -> Option<DVector<f64>> {
    c.decision
        .as_ref()
        .map(|d| DVector::from_column_slice(d))
        .or_else(|| (ex.seeds)(n))
}

fn one_row_table(n: usize, cost: Option<f64>, residual: Option<f64>, converged: bool, error: Option<String>) -> ScanTable {
    ScanTable {
        rows: vec![ScanRow {
            reset_count: n,
            converged,
            cost,
            residual_norm: residual,
            iterations: 0,
            decision: None,
            error,
            arc: None,
        }],
        minimizer: if converged { Some(n) } else { None },
    }
}

/// Runs the configured command, writing artifacts into the output directory.
/// Returns the produced file names.
pub fn run(c: &RunConfig) -> Result<Vec<String>, RunError> {
    let prep = prepare(c)?;
    let dir = c.output_dir();
    std::fs::create_dir_all(&dir).map_err(|e| RunError::Internal(format!("{}: {e}", dir.display())))?;
    let mut files = Vec::new();
    let outcome = dispatch(c, &prep, &dir, &mut files);
    let manifest = json!({
        "command": prep.command.name(),
        "example": prep.example.id,
        "files": files,
        "tolerances": prep.settings.record(),
        "status": match &outcome { Ok(()) => "ok".to_string(), Err(e) => e.to_string() },
    });
    output::write_json(&dir.join("manifest.json"), &manifest).map_err(|e| RunError::Internal(e.to_string()))?;
    outcome.map(|()| files)
}

fn internal(e: impl std::fmt::Display) -> RunError {
    RunError::Internal(e.to_string())
}

fn dispatch(c: &RunConfig, prep: &Prepared, dir: &Path, files: &mut Vec<String>) -> Result<(), RunError> {
    let problem = &prep.example.problem;
    let s = &prep.settings;
    let summary = |files: &mut Vec<String>, text: String| -> Result<(), RunError> {
        std::fs::write(dir.join("summary.txt"), text).map_err(internal)?;
        files.push("summary.txt".into());
        Ok(())
    };
    match prep.command {
        Command::Simulate => {
            let n = c.reset_count.expect("validated");
            let spec = ShootingSpec::new(problem, prep.x0.clone(), n, guess(c, &prep.example, n), s.shooting())?;
            let sim = shooting::simulate_with_spec(&spec, &spec.guess)?;
            let ok = sim.status == SimulationStatus::Ok;
            let norm = sim.residual.amax();
            output::write_arc_csv(&dir.join("arc.csv"), &sim.arc).map_err(internal)?;
            files.push("arc.csv".into());
            output::write_json(&dir.join("events.json"), &output::events_record(&sim.arc)).map_err(internal)?;
            files.push("events.json".into());
            output::write_json(
                &dir.join("summary.json"),
                &json!({"N": n, "cost": sim.arc.cost, "residual_norm": norm, "converged": ok && norm <= 1e-8, "status": sim.status}),
            )
            .map_err(internal)?;
            files.push("summary.json".into());
            summary(files, output::summary_table(&one_row_table(n, Some(sim.arc.cost), Some(norm), ok, None)))?;
            Ok(())
        }
        Command::Solve => {
            let n = c.reset_count.expect("validated");
            let spec = ShootingSpec::new(problem, prep.x0.clone(), n, guess(c, &prep.example, n), s.shooting())?;
            match shooting::solve(&spec) {
                Ok(sol) => {
                    output::write_arc_csv(&dir.join("arc.csv"), &sol.arc).map_err(internal)?;
                    files.push("arc.csv".into());
                    output::write_json(&dir.join("events.json"), &output::events_record(&sol.arc)).map_err(internal)?;
                    files.push("events.json".into());
                    output::write_json(
                        &dir.join("summary.json"),
                        &json!({"N": n, "cost": sol.arc.cost, "residual_norm": sol.residual_norm, "converged": true,
                                "decision": sol.decision.as_slice()}),
                    )
                    .map_err(internal)?;
                    files.push("summary.json".into());
                    summary(files, output::summary_table(&one_row_table(n, Some(sol.arc.cost), Some(sol.residual_norm), true, None)))?;
                    Ok(())
                }
                Err(e) => {
                    output::write_json(
                        &dir.join("summary.json"),
                        &json!({"N": n, "cost": null, "residual_norm": null, "converged": false, "error": e.to_string()}),
                    )
                    .map_err(internal)?;
                    files.push("summary.json".into());
                    summary(files, output::summary_table(&one_row_table(n, None, None, false, Some(e.to_string()))))?;
                    Err(e.into())
                }
            }
        }
        Command::Scan => {
            let n_max = c.n_max.unwrap_or(3);
            let seeds = |n: usize| (prep.example.seeds)(n);
            let table = shooting::scan_reset_counts(problem, &prep.x0, n_max, &seeds, &s.shooting());
            write_table(dir, &table, files)?;
            summary(files, output::summary_table(&table))?;
            if table.rows.iter().all(|r| r.converged) {
                Ok(())
            } else {
                Err(RunError::NotConverged(failed_rows(&table)))
            }
        }
        Command::JumpDemo => {
            let d = prep.example.demo_pre_state;
            let x = c.jump.pre_state.unwrap_or([d.x, d.y, d.z]);
            let p = c.jump.pre_costate.unwrap_or([d.px, d.py, d.pz]);
            let pre = BallState::new(x, p).to_cotangent(problem.horizon().0);
            let opts = JumpOptions {
                exhaustive: true,
                ..s.jump()
            };
            let sol = jump::solve_jump(problem, &pre, problem.final_time.max(1.0) * 2.0, &opts)?;
            output::write_json(&dir.join("jump_demo.json"), &output::jump_record(&sol)).map_err(internal)?;
            files.push("jump_demo.json".into());
            let mut text = String::new();
            let _ = writeln!(text, "pre  x = {:?}  p = {:?}", x, p);
            let _ = writeln!(
                text,
                "post x = {:?}  p = {:?}",
                sol.candidate.post_x.as_slice(),
                sol.candidate.post_p.as_slice()
            );
            let _ = writeln!(text, "mu = {:?}  next crossing at t = {:.10}", sol.candidate.mu.as_slice(), sol.next_crossing);
            let _ = writeln!(text, "roots found: {}", sol.roots.len());
            summary(files, text)?;
            Ok(())
        }
        Command::Oracle => {
            let n = c.oracle.reset_count.or(c.reset_count).unwrap_or(2);
            let spec = ShootingSpec::new(problem, prep.x0.clone(), n, guess(c, &prep.example, n), s.shooting())?;
            let sol = shooting::solve(&spec)?;
            let grid = oracle::sample_arc_controls(&sol.arc, c.oracle.intervals.unwrap_or(100));
            let d = RefineOptions::default();
            let opts = RefineOptions {
                iterations: c.oracle.iterations.unwrap_or(d.iterations),
                seed: c.oracle.seed.unwrap_or(d.seed),
                penalty_weight: c.oracle.penalty_weight.unwrap_or(d.penalty_weight),
                ..d
            };
            let cand = oracle::refine(problem, &prep.x0, &grid, &opts)?;
            output::write_json(
                &dir.join("oracle_report.json"),
                &json!({
                    "seed": cand.seed,
                    "iterations": cand.iterations,
                    "cost": cand.cost,
                    "penalized_cost": cand.penalized_cost,
                    "violation": cand.violation,
                    "bounce_count": cand.bounce_count,
                    "indirect_cost": sol.arc.cost,
                    "indirect_reset_count": n,
                }),
            )
            .map_err(internal)?;
            files.push("oracle_report.json".into());
            let mut text = String::new();
            let _ = writeln!(text, "{:>10}  {:>12}  {:>10}  {:>8}", "Method", "Cost", "Violation", "Bounces");
            let _ = writeln!(text, "{:>10}  {:>12.7}  {:>10.1e}  {:>8}", "indirect", sol.arc.cost, 0.0, n);
            let _ = writeln!(
                text,
                "{:>10}  {:>12.7}  {:>10.1e}  {:>8}",
                "direct", cand.cost, cand.violation, cand.bounce_count
            );
            summary(files, text)?;
            Ok(())
        }
        Command::Reproduce => {
            let rep = bouncing_ball::reproduce_results(dir, &s.shooting())?;
            files.extend(rep.files);
            if rep.table.rows.iter().all(|r| r.converged) {
                Ok(())
            } else {
                Err(RunError::NotConverged(failed_rows(&rep.table)))
            }
        }
    }
}

fn failed_rows(table: &ScanTable) -> String {
    table
        .rows
        .iter()
        .filter(|r| !r.converged)
        .map(|r| format!("N={}: {}", r.reset_count, r.error.as_deref().unwrap_or("failed")))
        .collect::<Vec<_>>()
        .join("; ")
}

fn write_table(dir: &Path, table: &ScanTable, files: &mut Vec<String>) -> Result<(), RunError> {
    output::write_json(&dir.join("table.json"), &output::table_record(table)).map_err(internal)?;
    files.push("table.json".into());
    for row in &table.rows {
        if let Some(arc) = &row.arc {
            let name = format!("arcs_N{}.csv", row.reset_count);
            output::write_arc_csv(&dir.join(&name), arc).map_err(internal)?;
            files.push(name);
        }
    }
    Ok(())
}
