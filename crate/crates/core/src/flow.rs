//! Optimized Hamiltonian, its vector field, and flows up to the next guard
//! crossing.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::integrate::{self, EventSpec, Stop, Tolerances};
use crate::problem::HybridProblem;

/// Minimum time after the start of an arc before guard detection re-arms.
pub const DWELL_TIME: f64 = 1e-6;

/// A point `(x, p)` of phase space at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct CotangentState {
    pub t: f64,
    pub x: DVector<f64>,
    pub p: DVector<f64>,
}

impl CotangentState {
    pub fn new(t: f64, x: DVector<f64>, p: DVector<f64>) -> Self {
        Self { t, x, p }
    }

    pub fn from_slices(t: f64, x: &[f64], p: &[f64]) -> Self {
        Self::new(
            t,
            DVector::from_column_slice(x),
            DVector::from_column_slice(p),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite() && self.x.iter().chain(self.p.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct FlowOptions {
    pub tolerances: Tolerances,
    pub dwell: f64,
    /// Event localization target for `|g|`.
    pub event_tol: f64,
    /// Dense-output sampling interval for recorded arcs; `None` keeps only the
    /// integrator's own step points.
    pub sample_every: Option<f64>,
    /// Whether to record samples at all (off inside Newton loops).
    pub record: bool,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self {
            tolerances: Tolerances::default(),
            dwell: DWELL_TIME,
            event_tol: 1e-12,
            sample_every: Some(1e-3),
            record: true,
        }
    }
}

impl FlowOptions {
    /// Same tolerances, no sample recording.
    pub fn quiet(&self) -> Self {
        Self {
            record: false,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct ArcSample {
    pub t: f64,
    pub x: DVector<f64>,
    pub p: DVector<f64>,
    pub u: DVector<f64>,
    pub h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GuardHit,
    HorizonEnd,
}

/// One continuous piece of an extremal.
#[derive(Debug, Clone)]
pub struct ContinuousArc {
    pub start: CotangentState,
    pub end: CotangentState,
    pub samples: Vec<ArcSample>,
    /// `∫ ℓ` over the arc.
    pub running_cost: f64,
    pub termination: Termination,
}

impl ContinuousArc {
    pub fn duration(&self) -> f64 {
        self.end.t - self.start.t
    }

    /// Largest `|H − H(start)|` over the recorded samples.
    pub fn hamiltonian_drift(&self) -> f64 {
        let Some(first) = self.samples.first() else {
            return 0.0;
        };
        self.samples
            .iter()
            .map(|s| (s.h - first.h).abs())
            .fold(0.0, f64::max)
    }
}

/// Evaluates `min_u ⟨p, f(x,u)⟩ + ℓ(x,u)` through the problem's closed-form
/// minimizer.
pub fn optimized_hamiltonian(
    problem: &dyn HybridProblem,
    x: &DVector<f64>,
    p: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    let u = problem.optimal_control(x, p).ok_or(Error::NoMinimizer)?;
    let h = p.dot(&problem.dynamics(x, &u)) + problem.running_cost(x, &u);
    Ok((h, u))
}

/// `(∂H/∂p, −∂H/∂x)`: analytic when the problem provides it, otherwise
/// central differences of the optimized Hamiltonian.
pub fn hamiltonian_rhs(
    problem: &dyn HybridProblem,
    x: &DVector<f64>,
    p: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    match problem.hamiltonian_gradient(x, p) {
        Some((hx, hp)) => Ok((hp, -hx)),
        None => hamiltonian_rhs_fd(problem, x, p),
    }
}

/// Finite-difference Hamiltonian vector field with step `1e-6 (1 + |value|)`.
pub fn hamiltonian_rhs_fd(
    problem: &dyn HybridProblem,
    x: &DVector<f64>,
    p: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = x.len();
    let h_of = |x: &DVector<f64>, p: &DVector<f64>| optimized_hamiltonian(problem, x, p).map(|r| r.0);
    let mut xdot = DVector::zeros(n);
    let mut pdot = DVector::zeros(n);
    for i in 0..n {
        let h = 1e-6 * (1.0 + p[i].abs());
        let mut pp = p.clone();
        let mut pm = p.clone();
        pp[i] += h;
        pm[i] -= h;
        xdot[i] = (h_of(x, &pp)? - h_of(x, &pm)?) / (2.0 * h);

        let h = 1e-6 * (1.0 + x[i].abs());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        pdot[i] = -(h_of(&xp, p)? - h_of(&xm, p)?) / (2.0 * h);
    }
    Ok((xdot, pdot))
}

/// Integrates the Hamiltonian flow from `start` until the first admitted guard
/// crossing (after the dwell time) or `t_max`, whichever comes first.
///
/// The running cost is integrated as an extra state component so it shares
/// the step-size control.
pub fn flow_until_guard(
    problem: &dyn HybridProblem,
    start: &CotangentState,
    t_max: f64,
    opts: &FlowOptions,
) -> Result<ContinuousArc> {
    let n = problem.dim_state();
    if start.x.len() != n || start.p.len() != n {
        return Err(Error::Dimension(format!(
            "cotangent state must have {n} + {n} entries"
        )));
    }
    // Surface NoMinimizer before entering the integrator.
    optimized_hamiltonian(problem, &start.x, &start.p)?;

    let mut y0 = Vec::with_capacity(2 * n + 1);
    y0.extend(start.x.iter());
    y0.extend(start.p.iter());
    y0.push(0.0);

    let rhs = |_t: f64, y: &[f64], dy: &mut [f64]| -> Result<()> {
        let x = DVector::from_column_slice(&y[..n]);
        let p = DVector::from_column_slice(&y[n..2 * n]);
        let (xd, pd) = hamiltonian_rhs(problem, &x, &p)?;
        let u = problem.optimal_control(&x, &p).ok_or(Error::NoMinimizer)?;
        dy[..n].copy_from_slice(xd.as_slice());
        dy[n..2 * n].copy_from_slice(pd.as_slice());
        dy[2 * n] = problem.running_cost(&x, &u);
        Ok(())
    };
    let g = |y: &[f64]| problem.guard(&DVector::from_column_slice(&y[..n]));
    let admits = |y: &[f64]| problem.guard_admits(&DVector::from_column_slice(&y[..n]));
    let event = EventSpec {
        g: &g,
        admits: &admits,
        armed_after: start.t + opts.dwell,
        tol: opts.event_tol,
    };

    let mut samples = Vec::new();
    let mut record = |t: f64, y: &[f64]| {
        if !opts.record {
            return;
        }
        if let Ok(s) = make_sample(problem, t, y, n) {
            if samples.last().is_none_or(|l: &ArcSample| t > l.t) {
                samples.push(s);
            }
        }
    };
    let out = integrate::integrate(
        rhs,
        start.t,
        &y0,
        t_max,
        &opts.tolerances,
        Some(&event),
        if opts.record { opts.sample_every } else { None },
        &mut record,
    )?;
    if opts.record {
        let s = make_sample(problem, out.t, &out.y, n)?;
        if samples.last().is_none_or(|l| out.t > l.t) {
            samples.push(s);
        }
    }
    let end = CotangentState::from_slices(out.t, &out.y[..n], &out.y[n..2 * n]);
    Ok(ContinuousArc {
        start: start.clone(),
        end,
        samples,
        running_cost: out.y[2 * n],
        termination: match out.stop {
            Stop::Event => Termination::GuardHit,
            Stop::End => Termination::HorizonEnd,
        },
    })
}

fn make_sample(problem: &dyn HybridProblem, t: f64, y: &[f64], n: usize) -> Result<ArcSample> {
    let x = DVector::from_column_slice(&y[..n]);
    let p = DVector::from_column_slice(&y[n..2 * n]);
    let (h, u) = optimized_hamiltonian(problem, &x, &p)?;
    Ok(ArcSample { t, x, p, u, h })
}

/// Elapsed time until the flow next reaches the guard, or `None` when it does
/// not do so before `t_max`.
pub fn return_time(
    problem: &dyn HybridProblem,
    state: &CotangentState,
    t_max: f64,
    opts: &FlowOptions,
) -> Result<Option<f64>> {
    let arc = flow_until_guard(problem, state, t_max, &opts.quiet())?;
    Ok(match arc.termination {
        Termination::GuardHit => Some(arc.end.t - state.t),
        Termination::HorizonEnd => None,
    })
}

/// Integrates the flow from `state` to the absolute time `t` with the guard
/// ignored; used to evaluate stored arcs between samples.
pub fn propagate_to(
    problem: &dyn HybridProblem,
    state: &CotangentState,
    t: f64,
    opts: &FlowOptions,
) -> Result<CotangentState> {
    let n = problem.dim_state();
    let mut y0 = Vec::with_capacity(2 * n);
    y0.extend(state.x.iter());
    y0.extend(state.p.iter());
    let rhs = |_t: f64, y: &[f64], dy: &mut [f64]| -> Result<()> {
        let x = DVector::from_column_slice(&y[..n]);
        let p = DVector::from_column_slice(&y[n..]);
        let (xd, pd) = hamiltonian_rhs(problem, &x, &p)?;
        dy[..n].copy_from_slice(xd.as_slice());
        dy[n..].copy_from_slice(pd.as_slice());
        Ok(())
    };
    let out = integrate::integrate(
        rhs,
        state.t,
        &y0,
        t,
        &opts.tolerances,
        None,
        None,
        &mut |_, _| {},
    )?;
    Ok(CotangentState::from_slices(out.t, &out.y[..n], &out.y[n..]))
}
