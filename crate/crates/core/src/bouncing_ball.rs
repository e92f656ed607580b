//! Controlled bouncing ball with an internal variable.
//!
//! State `(x, y, z)`: height, vertical velocity and an internal variable that
//! the impact resets to 1. Controls `(u, v)` act on `ẏ` and `ż`:
//!
//! ```text
//! ẋ = y,  ẏ = −1 + u,  ż = v,        J = ½∫₀⁵ (u² + v² + z²) dt
//! Δ(x, y, z) = (x, −y, 1)            on x = 0, y < 0
//! ```
//!
//! with terminal point `(1, 0, 0)`. The reset flattens the `z` direction, so
//! `Δ_*` restricted to the guard has rank one.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{CotangentState, DWELL_TIME};
use crate::jump::{self, JumpOptions, JumpSolution};
use crate::output;
use crate::problem::{HybridProblem, GUARD_TOLERANCE};
use crate::shooting::{self, ScanTable, ShootingOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct BouncingBall {
    pub final_time: f64,
    pub target: [f64; 3],
}

impl Default for BouncingBall {
    fn default() -> Self {
        Self {
            final_time: 5.0,
            target: [1.0, 0.0, 0.0],
        }
    }
}

/// Starting point of the bundled runs.
pub const INITIAL_STATE: [f64; 3] = [0.5, 0.0, 1.0];

/// Pre-impact phase point used for the jump demonstration.
pub const DEMO_PRE_STATE: BallState = BallState {
    x: 0.0,
    y: -1.0,
    z: 0.1,
    px: 1.0,
    py: 1.0,
    pz: 0.0,
};

/// Shooting seeds `[p₀ (3), A]` per reset count (`[p₀]` for N = 0).
pub fn seed(reset_count: usize) -> Option<DVector<f64>> {
    let s: &[f64] = match reset_count {
        0 => &[-0.05, -1.12, 1.0],
        1 => &[-0.64, -0.37, 0.79, 1.0],
        2 => &[-0.11, 0.17, 0.72, 1.09],
        3 => &[1.15, 0.46, 0.74, 1.10],
        _ => return None,
    };
    Some(DVector::from_column_slice(s))
}

impl HybridProblem for BouncingBall {
    fn dim_state(&self) -> usize {
        3
    }
    fn dim_control(&self) -> usize {
        2
    }

    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_column_slice(&[x[1], -1.0 + u[0], u[1]])
    }

    fn running_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        0.5 * (u[0] * u[0] + u[1] * u[1] + x[2] * x[2])
    }

    fn guard(&self, x: &DVector<f64>) -> f64 {
        x[0]
    }

    fn guard_admits(&self, x: &DVector<f64>) -> bool {
        x[1] < 0.0
    }

    fn reset(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_column_slice(&[x[0], -x[1], 1.0])
    }

    fn reset_rank(&self) -> usize {
        1
    }

    fn target(&self, x: &DVector<f64>) -> DVector<f64> {
        x - DVector::from_column_slice(&self.target)
    }

    fn target_count(&self) -> usize {
        3
    }

    fn horizon(&self) -> (f64, f64) {
        (0.0, self.final_time)
    }

    fn optimal_control(&self, _x: &DVector<f64>, p: &DVector<f64>) -> Option<DVector<f64>> {
        Some(DVector::from_column_slice(&[-p[1], -p[2]]))
    }

    fn hamiltonian_gradient(&self, x: &DVector<f64>, p: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
        let hx = DVector::from_column_slice(&[0.0, p[0], x[2]]);
        let hp = DVector::from_column_slice(&[x[1], -1.0 - p[1], -p[2]]);
        Some((hx, hp))
    }

    fn guard_gradient(&self, _x: &DVector<f64>) -> Option<DVector<f64>> {
        Some(DVector::from_column_slice(&[1.0, 0.0, 0.0]))
    }

    fn reset_jacobian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, -1.0, 0.0])))
    }
}

/// `H = −½p_y² − ½p_z² + ½z² + pₓy − p_y` written out.
pub fn hamiltonian(s: &BallState) -> f64 {
    -0.5 * s.py * s.py - 0.5 * s.pz * s.pz + 0.5 * s.z * s.z + s.px * s.y - s.py
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BallState {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub px: f64,
    pub py: f64,
    pub pz: f64,
}

impl BallState {
    pub fn new(x: [f64; 3], p: [f64; 3]) -> Self {
        Self {
            x: x[0],
            y: x[1],
            z: x[2],
            px: p[0],
            py: p[1],
            pz: p[2],
        }
    }

    pub fn from_cotangent(s: &CotangentState) -> Self {
        Self::new([s.x[0], s.x[1], s.x[2]], [s.p[0], s.p[1], s.p[2]])
    }

    pub fn to_cotangent(&self, t: f64) -> CotangentState {
        CotangentState::from_slices(t, &[self.x, self.y, self.z], &[self.px, self.py, self.pz])
    }

    pub fn on_guard(&self) -> bool {
        self.x.abs() <= GUARD_TOLERANCE && self.y < 0.0
    }
}

/// Time at which `p_z` vanishes starting from `(z0, p_z = A)` at `t0`:
/// `t* = t0 + ½ ln((z0 + A)/(z0 − A))`, defined for `0 ≤ A < z0`.
pub fn closed_form_impact_time(z0: f64, a: f64, t0: f64) -> Option<f64> {
    if !(a >= 0.0 && a < z0) {
        return None;
    }
    Some(t0 + 0.5 * ((z0 + a) / (z0 - a)).ln())
}

/// `(z, p_z)` after time `t` under `ż = −p_z`, `ṗ_z = −z`.
pub fn closed_form_z_costate(z0: f64, pz0: f64, t: f64) -> (f64, f64) {
    let (c, s) = (t.cosh(), t.sinh());
    (z0 * c - pz0 * s, pz0 * c - z0 * s)
}

/// Real roots of `c[0] + c[1] t + c[2] t² + c[3] t³`, ascending.
fn cubic_real_roots(c: [f64; 4]) -> Vec<f64> {
    let scale = c.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let Some(deg) = (1..=3).rev().find(|&d| c[d].abs() > 1e-14 * scale) else {
        return Vec::new();
    };
    let lead = c[deg];
    let mut comp = DMatrix::zeros(deg, deg);
    for i in 1..deg {
        comp[(i, i - 1)] = 1.0;
    }
    for i in 0..deg {
        comp[(i, deg - 1)] = -c[i] / lead;
    }
    let poly = |t: f64| c[0] + t * (c[1] + t * (c[2] + t * c[3]));
    let dpoly = |t: f64| c[1] + t * (2.0 * c[2] + t * 3.0 * c[3]);
    let mut roots: Vec<f64> = comp
        .complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-7 * (1.0 + z.re.abs()))
        .map(|z| {
            let mut t = z.re;
            for _ in 0..4 {
                let d = dpoly(t);
                if d == 0.0 {
                    break;
                }
                t -= poly(t) / d;
            }
            t
        })
        .collect();
    roots.sort_by(f64::total_cmp);
    roots
}

/// First admitted impact of the closed-form flow: time `τ` and `p_z(τ)`.
///
/// Height is the cubic `x + yt − ½(1 + p_y)t² + pₓt³/6`; the root must be past
/// the dwell time and have downward velocity.
pub fn closed_form_next_impact(s: &BallState) -> Option<(f64, f64)> {
    let roots = cubic_real_roots([s.x, s.y, -0.5 * (1.0 + s.py), s.px / 6.0]);
    let vel = |t: f64| s.y - (1.0 + s.py) * t + 0.5 * s.px * t * t;
    let tau = roots.into_iter().find(|&t| t > DWELL_TIME && vel(t) < 0.0)?;
    Some((tau, closed_form_z_costate(s.z, s.pz, tau).1))
}

/// `p_z` at the next impact, the closed-form counterpart of the generic
/// admissibility residual.
pub fn closed_form_next_impact_pz(s: &BallState) -> Option<f64> {
    closed_form_next_impact(s).map(|(_, pz)| pz)
}

/// Residual of the two equations describing the admissible co-states:
///
/// ```text
/// r₁ = τₓ − ½ ln((z + p_z)/(z − p_z))
/// r₂ = −(τ/3)(pₓ − [3(1 + p_y)/τ − 6x/τ³ − 6y/τ²]),  τ = ½ ln((z + p_z)/(z − p_z))
/// ```
///
/// `τₓ` is the next impact time of the height cubic. With `x = 0` and
/// `y = −y⁻`, `r₂` reads `p_y − [(τ/3)pₓ − (2y⁻/τ + 1)]`.
pub fn closed_form_xi_residual(s: &BallState) -> Result<DVector<f64>> {
    if !(s.z > 0.0 && s.pz.abs() < s.z) {
        return Err(Error::Domain(format!(
            "need |p_z| < z, got p_z = {}, z = {}",
            s.pz, s.z
        )));
    }
    let tau = 0.5 * ((s.z + s.pz) / (s.z - s.pz)).ln();
    if tau.abs() < 1e-12 {
        return Err(Error::Domain("p_z = 0 gives a zero return time".into()));
    }
    let (tau_x, _) = closed_form_next_impact(s).ok_or(Error::NoNextCrossing)?;
    let px_on_surface = 3.0 * (1.0 + s.py) / tau - 6.0 * s.x / tau.powi(3) - 6.0 * s.y / (tau * tau);
    Ok(DVector::from_column_slice(&[
        tau_x - tau,
        -(tau / 3.0) * (s.px - px_on_surface),
    ]))
}

/// Lifted reset with `p_z⁺ = A`:
/// `pₓ⁺ = (1/y⁻)[½(1 − z² − A²) − pₓ⁻y⁻ + 2p_y⁻]`, `p_y⁺ = −p_y⁻`.
pub fn closed_form_jump(pre: &BallState, a: f64) -> Result<BallState> {
    if !pre.on_guard() {
        return Err(Error::NotOnGuard {
            residual: pre.x.abs(),
            tolerance: GUARD_TOLERANCE,
        });
    }
    if pre.pz.abs() > jump::CONSISTENCY_TOL {
        return Err(Error::InconsistentCostate { residual: pre.pz.abs() });
    }
    let ym = pre.y;
    let px = (0.5 * (1.0 - pre.z * pre.z - a * a) - pre.px * ym + 2.0 * pre.py) / ym;
    Ok(BallState {
        x: pre.x,
        y: -ym,
        z: 1.0,
        px,
        py: -pre.py,
        pz: a,
    })
}

/// Everything `reproduce_results` computed, for callers that want the numbers
/// as well as the files.
pub struct Reproduction {
    pub table: ScanTable,
    pub demo_jump: JumpSolution,
    pub files: Vec<String>,
}

/// Solves the jump at the demonstration pre-state.
pub fn demo_jump(problem: &BouncingBall) -> Result<JumpSolution> {
    let pre = DEMO_PRE_STATE.to_cotangent(0.0);
    let opts = JumpOptions {
        exhaustive: true,
        ..JumpOptions::default()
    };
    jump::solve_jump(problem, &pre, problem.final_time, &opts)
}

/// Scans N = 0..=3 from the bundled initial state and writes `table1.json`,
/// `arcs_N{k}.csv`, `events_N{k}.json`, `jump_demo.json` and `summary.txt`
/// into `dir`.
pub fn reproduce_results(dir: &Path, opts: &ShootingOptions) -> Result<Reproduction> {
    let ball = BouncingBall::default();
    let x0 = DVector::from_column_slice(&INITIAL_STATE);
    let table = shooting::scan_reset_counts(&ball, &x0, 3, &seed, opts);
    let demo = demo_jump(&ball)?;

    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    output::write_json(&dir.join("table1.json"), &output::table_record(&table))?;
    files.push("table1.json".to_string());
    for row in &table.rows {
        if let Some(arc) = &row.arc {
            let name = format!("arcs_N{}.csv", row.reset_count);
            output::write_arc_csv(&dir.join(&name), arc)?;
            files.push(name);
            let name = format!("events_N{}.json", row.reset_count);
            output::write_json(&dir.join(&name), &output::events_record(arc))?;
            files.push(name);
        }
    }
    let interior = table
        .rows
        .iter()
        .filter(|r| r.reset_count >= 2)
        .filter_map(|r| r.arc.as_ref().map(|a| (r.reset_count, a)))
        .filter_map(|(n, a)| a.events.first().map(|e| (n, e)))
        .map(|(n, e)| output::interior_jump_record(n, e))
        .collect::<Vec<_>>();
    output::write_json(
        &dir.join("jump_demo.json"),
        &serde_json::json!({
            "demo": output::jump_record(&demo),
            "first_interior_resets": interior,
        }),
    )?;
    files.push("jump_demo.json".to_string());
    std::fs::write(dir.join("summary.txt"), output::summary_table(&table))?;
    files.push("summary.txt".to_string());
    Ok(Reproduction {
        table,
        demo_jump: demo,
        files,
    })
}
