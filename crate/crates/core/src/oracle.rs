//! Direct-method cross-check: forward simulation of the raw hybrid dynamics
//! under piecewise-constant controls, and a random-perturbation search for a
//! cheap feasible control. Uses only the problem's state equations, never the
//! Hamiltonian machinery.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::DWELL_TIME;
use crate::integrate::{self, EventSpec, Stop, Tolerances};
use crate::problem::HybridProblem;
use crate::shooting::HybridArc;

/// Piecewise-constant controls on `K` equal intervals of `[t0, t1]`, one row
/// per interval.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid {
    pub t0: f64,
    pub t1: f64,
    pub values: DMatrix<f64>,
}

impl ControlGrid {
    pub fn zeros(t0: f64, t1: f64, intervals: usize, controls: usize) -> Self {
        Self {
            t0,
            t1,
            values: DMatrix::zeros(intervals, controls),
        }
    }

    pub fn intervals(&self) -> usize {
        self.values.nrows()
    }

    pub fn interval(&self, i: usize) -> (f64, f64) {
        let h = (self.t1 - self.t0) / self.intervals() as f64;
        let b = if i + 1 == self.intervals() { self.t1 } else { self.t0 + (i + 1) as f64 * h };
        (self.t0 + i as f64 * h, b)
    }

    pub fn control(&self, i: usize) -> DVector<f64> {
        self.values.row(i).transpose()
    }
}

pub enum ControlSignal<'a> {
    PiecewiseConstant(&'a ControlGrid),
    /// Any time-dependent control, integrated in one piece.
    Function(&'a (dyn Fn(f64) -> DVector<f64> + Sync)),
}

#[derive(Debug, Clone, Serialize)]
pub struct DirectOutcome {
    /// `∫ℓ + φ(x(T))`.
    pub cost: f64,
    /// `‖ψ(x(T))‖`.
    pub violation: f64,
    pub bounce_count: usize,
    pub impact_times: Vec<f64>,
    pub terminal: Vec<f64>,
}

impl DirectOutcome {
    pub fn penalized(&self, weight: f64) -> f64 {
        self.cost + weight * self.violation * self.violation
    }
}

struct Piece<'s> {
    a: f64,
    b: f64,
    u: Box<dyn Fn(f64) -> DVector<f64> + 's>,
}

/// Simulates the hybrid system from `x0` over the problem's horizon, applying
/// the reset at every admitted guard crossing.
pub fn direct_cost(
    problem: &dyn HybridProblem,
    x0: &DVector<f64>,
    signal: &ControlSignal,
    tol: &Tolerances,
) -> Result<DirectOutcome> {
    let n = problem.dim_state();
    if x0.len() != n {
        return Err(Error::Dimension(format!("initial state must have {n} entries")));
    }
    let (t0, t1) = problem.horizon();
    let pieces: Vec<Piece> = match signal {
        ControlSignal::PiecewiseConstant(g) => {
            if g.values.ncols() != problem.dim_control() || g.intervals() == 0 {
                return Err(Error::Dimension("control grid does not match the problem".into()));
            }
            (0..g.intervals())
                .map(|i| {
                    let (a, b) = g.interval(i);
                    let u = g.control(i);
                    Piece {
                        a,
                        b,
                        u: Box::new(move |_| u.clone()),
                    }
                })
                .collect()
        }
        ControlSignal::Function(f) => vec![Piece {
            a: t0,
            b: t1,
            u: Box::new(|t| f(t)),
        }],
    };

    let mut y: Vec<f64> = x0.iter().copied().chain([0.0]).collect();
    let mut impacts = Vec::new();
    let mut last_reset = f64::NEG_INFINITY;
    let g = |s: &[f64]| problem.guard(&DVector::from_column_slice(&s[..n]));
    let admits = |s: &[f64]| problem.guard_admits(&DVector::from_column_slice(&s[..n]));
    if t1 > t0 {
        for piece in &pieces {
            let mut t = piece.a;
            while t < piece.b {
                let rhs = |tt: f64, s: &[f64], ds: &mut [f64]| -> Result<()> {
                    let x = DVector::from_column_slice(&s[..n]);
                    let u = (piece.u)(tt);
                    ds[..n].copy_from_slice(problem.dynamics(&x, &u).as_slice());
                    ds[n] = problem.running_cost(&x, &u);
                    Ok(())
                };
                let event = EventSpec {
                    g: &g,
                    admits: &admits,
                    armed_after: t.max(last_reset + DWELL_TIME),
                    tol: 1e-12,
                };
                let out = integrate::integrate(rhs, t, &y, piece.b, tol, Some(&event), None, &mut |_, _| {})?;
                y = out.y;
                t = out.t;
                if out.stop == Stop::Event {
                    let xr = problem.reset(&DVector::from_column_slice(&y[..n]));
                    y[..n].copy_from_slice(xr.as_slice());
                    impacts.push(t);
                    last_reset = t;
                } else {
                    break;
                }
            }
        }
    }
    let xt = DVector::from_column_slice(&y[..n]);
    Ok(DirectOutcome {
        cost: y[n] + problem.terminal_cost(&xt),
        violation: problem.target(&xt).norm(),
        bounce_count: impacts.len(),
        impact_times: impacts,
        terminal: y[..n].to_vec(),
    })
}

/// Control of the indirect solution at time `t`, linearly interpolated between
/// the recorded samples.
pub fn arc_control(arc: &HybridArc, t: f64) -> DVector<f64> {
    let samples: Vec<_> = arc.arcs.iter().flat_map(|a| a.samples.iter()).collect();
    let i = samples.partition_point(|s| s.t <= t);
    match (i.checked_sub(1).map(|j| samples[j]), samples.get(i)) {
        (Some(a), Some(b)) if b.t > a.t => {
            let w = (t - a.t) / (b.t - a.t);
            &a.u * (1.0 - w) + &b.u * w
        }
        (Some(a), _) => a.u.clone(),
        (None, Some(b)) => b.u.clone(),
        (None, None) => DVector::zeros(0),
    }
}

/// Averages the indirect solution's control over each of `intervals` equal
/// intervals of its horizon (trapezoid rule on the recorded samples, so the
/// jumps at resets land in the right proportion).
pub fn sample_arc_controls(arc: &HybridArc, intervals: usize) -> ControlGrid {
    let t0 = arc.arcs.first().map_or(0.0, |a| a.start.t);
    let t1 = arc.terminal.t;
    let m = arc.arcs.iter().flat_map(|a| a.samples.first()).next().map_or(0, |s| s.u.len());
    let mut grid = ControlGrid::zeros(t0, t1, intervals, m);
    for i in 0..intervals {
        let (a, b) = grid.interval(i);
        let mut acc = DVector::zeros(m);
        for piece in &arc.arcs {
            for w in piece.samples.windows(2) {
                let (lo, hi) = (w[0].t.max(a), w[1].t.min(b));
                if hi <= lo {
                    continue;
                }
                let at = |t: f64| {
                    let s = (t - w[0].t) / (w[1].t - w[0].t);
                    &w[0].u * (1.0 - s) + &w[1].u * s
                };
                acc += (at(lo) + at(hi)) * (0.5 * (hi - lo));
            }
        }
        grid.values.set_row(i, &(acc / (b - a)).transpose());
    }
    grid
}

#[derive(Debug, Clone)]
pub struct RefineOptions {
    pub iterations: usize,
    pub penalty_weight: f64,
    pub seed: u64,
    /// Perturbations evaluated per iteration.
    pub batch: usize,
    pub tolerances: Tolerances,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            iterations: 2000,
            penalty_weight: 1e4,
            seed: 42,
            batch: 4,
            tolerances: Tolerances { rtol: 1e-8, atol: 1e-10 },
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DirectCandidate {
    #[serde(skip)]
    pub controls: ControlGrid,
    pub seed: u64,
    pub iterations: usize,
    pub accepted: usize,
    pub cost: f64,
    pub violation: f64,
    pub penalized_cost: f64,
    pub bounce_count: usize,
    pub impact_times: Vec<f64>,
}

fn perturb(grid: &ControlGrid, rng: &mut ChaCha8Rng, sigma: &[f64]) -> ControlGrid {
    let k = grid.intervals();
    let c = rng.random_range(0..grid.values.ncols());
    let width = rng.random_range(1..=(k / 4).max(1));
    let centre = rng.random_range(0..k) as f64;
    let amp = sigma[c] * rng.random_range(-1.0..1.0);
    let mut out = grid.clone();
    for i in 0..k {
        let d = (i as f64 - centre).abs() / width as f64;
        if d < 1.0 {
            out.values[(i, c)] += amp * (1.0 - d);
        }
    }
    out
}

/// Random hat-shaped perturbations of the seed controls, keeping whichever
/// lowers the penalized cost. Deterministic for a fixed seed.
pub fn refine(
    problem: &dyn HybridProblem,
    x0: &DVector<f64>,
    seed_controls: &ControlGrid,
    opts: &RefineOptions,
) -> Result<DirectCandidate> {
    let w = opts.penalty_weight;
    let eval = |g: &ControlGrid| direct_cost(problem, x0, &ControlSignal::PiecewiseConstant(g), &opts.tolerances);
    let mut best = seed_controls.clone();
    let mut best_out = eval(&best)?;
    let mut best_val = best_out.penalized(w);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut sigma = vec![0.1; best.values.ncols()];
    let mut accepted = 0;
    for _ in 0..opts.iterations {
        let trials: Vec<ControlGrid> = (0..opts.batch.max(1)).map(|_| perturb(&best, &mut rng, &sigma)).collect();
        let outcomes: Vec<Option<DirectOutcome>> = trials.par_iter().map(|g| eval(g).ok()).collect();
        let pick = outcomes
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.as_ref().map(|o| (i, o.penalized(w))))
            .filter(|(_, v)| v.is_finite())
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match pick {
            Some((i, v)) if v < best_val => {
                best = trials[i].clone();
                best_out = outcomes[i].clone().expect("picked outcome exists");
                best_val = v;
                accepted += 1;
                sigma.iter_mut().for_each(|s| *s = (*s * 1.2).min(1.0));
            }
            _ => sigma.iter_mut().for_each(|s| *s = (*s * 0.97).max(1e-5)),
        }
    }
    Ok(DirectCandidate {
        controls: best,
        seed: opts.seed,
        iterations: opts.iterations,
        accepted,
        cost: best_out.cost,
        violation: best_out.violation,
        penalized_cost: best_val,
        bounce_count: best_out.bounce_count,
        impact_times: best_out.impact_times,
    })
}
