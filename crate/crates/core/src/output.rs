//! CSV/JSON artifacts. Every float is rounded to 12 significant digits before
//! it is written so repeated runs diff cleanly.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::Result;
use crate::flow::CotangentState;
use crate::jump::JumpSolution;
use crate::shooting::{HybridArc, ResetEvent, ScanTable};

pub const SIGNIFICANT_DIGITS: usize = 12;

/// Rounds to [`SIGNIFICANT_DIGITS`]; non-finite values pass through.
pub fn round_sig(v: f64) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return v;
    }
    format!("{:.*e}", SIGNIFICANT_DIGITS - 1, v).parse().unwrap_or(v)
}

fn round_value(v: &mut Value) {
    match v {
        Value::Number(n) => {
            if let Some(f) = n.as_f64().filter(|_| !n.is_i64() && !n.is_u64()) {
                *v = serde_json::Number::from_f64(round_sig(f)).map_or(Value::Null, Value::Number);
            }
        }
        Value::Array(a) => a.iter_mut().for_each(round_value),
        Value::Object(o) => o.values_mut().for_each(round_value),
        _ => {}
    }
}

/// Pretty JSON with rounded floats.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value)?;
    round_value(&mut v);
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, to_json_string(value)?)?;
    Ok(())
}

fn vec(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

fn state_record(s: &CotangentState) -> Value {
    json!({ "t": s.t, "x": vec(&s.x), "p": vec(&s.p) })
}

/// Samples of every piece as rows `t, x1..xn, p1..pn, u1..um, H`.
pub fn write_arc_csv(path: &Path, arc: &HybridArc) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let first = arc.arcs.iter().flat_map(|a| a.samples.first()).next();
    let (n, m) = first.map_or((0, 0), |s| (s.x.len(), s.u.len()));
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.extend((1..=n).map(|i| format!("p{i}")));
    header.extend((1..=m).map(|i| format!("u{i}")));
    header.push("H".into());
    w.write_record(&header)?;
    for s in arc.arcs.iter().flat_map(|a| a.samples.iter()) {
        let row = std::iter::once(s.t)
            .chain(s.x.iter().copied())
            .chain(s.p.iter().copied())
            .chain(s.u.iter().copied())
            .chain(std::iter::once(s.h))
            .map(|v| round_sig(v).to_string());
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

fn event_record(e: &ResetEvent) -> Value {
    json!({
        "t": e.t,
        "interior": e.interior,
        "pre": state_record(&e.pre),
        "post": state_record(&e.candidate.post_state()),
        "mu": vec(&e.candidate.mu),
        "energy_residual": e.energy_residual,
        "consistency_residual": e.consistency_residual,
        "roots": e.roots,
    })
}

pub fn events_record(arc: &HybridArc) -> Value {
    json!({
        "cost": arc.cost,
        "reset_times": arc.reset_times(),
        "terminal": state_record(&arc.terminal),
        "events": arc.events.iter().map(event_record).collect::<Vec<_>>(),
    })
}

pub fn interior_jump_record(reset_count: usize, e: &ResetEvent) -> Value {
    json!({ "reset_count": reset_count, "event": event_record(e) })
}

pub fn jump_record(sol: &JumpSolution) -> Value {
    json!({
        "pre": state_record(&sol.candidate.pre),
        "post": state_record(&sol.candidate.post_state()),
        "mu": vec(&sol.candidate.mu),
        "energy_residual": sol.energy_residual,
        "admissibility_residual": vec(&sol.admissibility_residual),
        "next_crossing": sol.next_crossing,
        "iterations": sol.iterations,
        "starts_tried": sol.starts_tried,
        "roots": sol.roots,
    })
}

/// `{N, cost, residual_norm, converged}` per row plus the minimizer.
pub fn table_record(table: &ScanTable) -> Value {
    json!({
        "rows": table.rows.iter().map(|r| json!({
            "N": r.reset_count,
            "cost": r.cost,
            "residual_norm": r.residual_norm,
            "converged": r.converged,
            "reset_times": r.arc.as_ref().map(|a| a.reset_times()),
            "error": r.error,
        })).collect::<Vec<_>>(),
        "minimizer": table.minimizer,
    })
}

/// Plain-text table: one row per reset count.
pub fn summary_table(table: &ScanTable) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:>10}  {:>12}  {:>10}", "Bounces", "Cost", "Residual");
    for r in &table.rows {
        let cost = r.cost.map_or("failed".to_string(), |c| format!("{c:.7}"));
        let res = r.residual_norm.map_or("-".to_string(), |c| format!("{c:.1e}"));
        let mark = if table.minimizer == Some(r.reset_count) { "  *" } else { "" };
        let _ = writeln!(s, "{:>10}  {:>12}  {:>10}{mark}", r.reset_count, cost, res);
    }
    s
}
