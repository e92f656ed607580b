//! Shooting for hybrid extremals with a fixed number of resets.
//!
//! The decision vector is `[p₀ (n), μ_free (n − r − 1 if N ≥ 1), ν (k if k < n)]`
//! and the residual is
//! `[consistency at the first crossing (n − 1 − r if N ≥ 1), ψ(x(T)) (k),
//! p(T) − dφ − Σ νⱼ dψⱼ (n if k < n)]`. Interior resets select their co-state
//! with [`solve_jump`](crate::jump::solve_jump), which also makes the next
//! crossing consistent; the last reset uses the energy-only final jump whose
//! free coefficients are shooting unknowns.

use std::cell::RefCell;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{self, ContinuousArc, CotangentState, FlowOptions, Termination};
use crate::jump::{self, JumpCandidate, JumpOptions, JumpRoot};
use crate::newton::{self, NewtonOptions};
use crate::problem::{self, build_guard_frame, HybridProblem};

#[derive(Debug, Clone)]
pub struct ShootingOptions {
    pub newton: NewtonOptions,
    /// Inner jump selection; warm starts are managed by the solver.
    pub jump: JumpOptions,
    /// Used for the recorded solution arcs.
    pub flow: FlowOptions,
    /// After convergence, re-solve from every alternative interior jump root
    /// and keep the cheapest feasible arc.
    pub branch_roots: bool,
}

impl Default for ShootingOptions {
    fn default() -> Self {
        let mut jump = JumpOptions::default();
        jump.newton.min_iter = 1;
        Self {
            newton: NewtonOptions::default(),
            jump,
            flow: FlowOptions::default(),
            branch_roots: true,
        }
    }
}

/// Sizes of the decision and residual blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DecisionLayout {
    pub costate: usize,
    pub final_mu: usize,
    pub multipliers: usize,
    pub consistency: usize,
    pub targets: usize,
    pub transversality: usize,
}

impl DecisionLayout {
    pub fn new(problem: &dyn HybridProblem, reset_count: usize) -> Self {
        let n = problem.dim_state();
        let r = problem.reset_rank();
        let k = problem.target_count();
        let with_resets = reset_count > 0;
        Self {
            costate: n,
            final_mu: if with_resets { n - r - 1 } else { 0 },
            multipliers: if k < n { k } else { 0 },
            consistency: if with_resets { n - 1 - r } else { 0 },
            targets: k,
            transversality: if k < n { n } else { 0 },
        }
    }

    pub fn decision_len(&self) -> usize {
        self.costate + self.final_mu + self.multipliers
    }

    pub fn residual_len(&self) -> usize {
        self.consistency + self.targets + self.transversality
    }
}

#[derive(Clone)]
pub struct ShootingSpec<'a> {
    pub problem: &'a dyn HybridProblem,
    pub x0: DVector<f64>,
    pub reset_count: usize,
    pub guess: DVector<f64>,
    pub options: ShootingOptions,
    pub layout: DecisionLayout,
}

impl<'a> ShootingSpec<'a> {
    /// Checks the problem, the initial state and that the shooting system is
    /// square. A missing guess starts from zero.
    pub fn new(
        problem: &'a dyn HybridProblem,
        x0: DVector<f64>,
        reset_count: usize,
        guess: Option<DVector<f64>>,
        options: ShootingOptions,
    ) -> Result<Self> {
        problem::validate(problem)?;
        let layout = DecisionLayout::new(problem, reset_count);
        if layout.decision_len() != layout.residual_len() {
            return Err(Error::Dimension(format!(
                "shooting system is not square: {} unknowns, {} equations",
                layout.decision_len(),
                layout.residual_len()
            )));
        }
        if x0.len() != problem.dim_state() {
            return Err(Error::Dimension(format!(
                "initial state has {} entries, expected {}",
                x0.len(),
                problem.dim_state()
            )));
        }
        let guess = guess.unwrap_or_else(|| DVector::zeros(layout.decision_len()));
        if guess.len() != layout.decision_len() {
            return Err(Error::Dimension(format!(
                "initial guess has {} entries, the layout needs {}",
                guess.len(),
                layout.decision_len()
            )));
        }
        Ok(Self {
            problem,
            x0,
            reset_count,
            guess,
            options,
            layout,
        })
    }
}

/// One reset along a hybrid extremal.
#[derive(Debug, Clone)]
pub struct ResetEvent {
    pub t: f64,
    pub pre: CotangentState,
    pub candidate: JumpCandidate,
    /// `H⁺ − H⁻`.
    pub energy_residual: f64,
    /// Largest fiber residual of the pre-reset co-state.
    pub consistency_residual: f64,
    /// `false` for the last reset, whose jump is fixed by the energy equation
    /// and the final-jump unknowns.
    pub interior: bool,
    /// Jump roots found at this reset (interior resets only).
    pub roots: Vec<JumpRoot>,
}

#[derive(Debug, Clone)]
pub struct HybridArc {
    pub arcs: Vec<ContinuousArc>,
    pub events: Vec<ResetEvent>,
    /// `Σ ∫ℓ + φ(x(T))`.
    pub cost: f64,
    pub terminal: CotangentState,
}

impl HybridArc {
    pub fn reset_times(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.t).collect()
    }

    /// Lists every violated structural invariant (empty when all hold).
    pub fn check_invariants(&self, dwell: f64) -> Vec<String> {
        let mut bad = Vec::new();
        for w in self.events.windows(2) {
            if w[1].t - w[0].t < dwell {
                bad.push(format!("resets at {} and {} are closer than {dwell}", w[0].t, w[1].t));
            }
        }
        for (i, e) in self.events.iter().enumerate() {
            if e.energy_residual.abs() > 1e-8 {
                bad.push(format!("reset {i}: |H⁺ − H⁻| = {:e}", e.energy_residual.abs()));
            }
            if e.consistency_residual > 1e-8 {
                bad.push(format!("reset {i}: consistency residual {:e}", e.consistency_residual));
            }
        }
        if self.arcs.len() != self.events.len() + 1 {
            bad.push(format!("{} arcs for {} resets", self.arcs.len(), self.events.len()));
        }
        bad
    }

    /// Phase point at time `t`, re-integrated from the start of the arc that
    /// contains it.
    pub fn state_at(&self, problem: &dyn HybridProblem, t: f64, opts: &FlowOptions) -> Result<CotangentState> {
        let arc = self
            .arcs
            .iter()
            .find(|a| t <= a.end.t)
            .or(self.arcs.last())
            .ok_or_else(|| Error::Domain("empty hybrid arc".into()))?;
        if t < arc.start.t || t > arc.end.t {
            return Err(Error::Domain(format!(
                "t = {t} outside [{}, {}]",
                self.arcs[0].start.t, arc.end.t
            )));
        }
        flow::propagate_to(problem, &arc.start, t, opts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimulationStatus {
    Ok,
    /// The decision realizes a different number of admitted crossings.
    /// `penalty` is the time distance between the horizon end and the
    /// missing or surplus crossing.
    ResetCountMismatch {
        expected: usize,
        realized: usize,
        penalty: f64,
    },
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub arc: HybridArc,
    /// On a mismatch every entry holds the penalty.
    pub residual: DVector<f64>,
    pub status: SimulationStatus,
    /// Selected annihilator coefficients at the interior resets.
    pub jump_mus: Vec<DVector<f64>>,
}

/// Flows `(x0, p0)` to its first crossing and returns the consistency
/// residual there (`None` when the horizon ends first).
pub fn parameterize_initial_costate(
    problem: &dyn HybridProblem,
    x0: &DVector<f64>,
    p0: &DVector<f64>,
    t_max: f64,
    opts: &FlowOptions,
) -> Result<Option<DVector<f64>>> {
    let (t0, _) = problem.horizon();
    let start = CotangentState::new(t0, x0.clone(), p0.clone());
    jump::admissibility_residual(problem, &start, t_max, opts)
}

/// Simulates the extremal encoded by `decision` without warm starts.
pub fn simulate_with_spec(spec: &ShootingSpec, decision: &DVector<f64>) -> Result<Simulation> {
    let warm = vec![None; spec.reset_count.saturating_sub(1)];
    simulate(spec, decision, &warm, true, false)
}

fn missing_crossing_penalty(
    problem: &dyn HybridProblem,
    from: &CotangentState,
    tf: f64,
    t_search: f64,
    opts: &FlowOptions,
) -> f64 {
    match flow::return_time(problem, from, t_search, opts) {
        Ok(Some(dt)) => from.t + dt - tf,
        _ => tf - problem.horizon().0,
    }
}

fn simulate(
    spec: &ShootingSpec,
    decision: &DVector<f64>,
    warm: &[Option<DVector<f64>>],
    record: bool,
    exhaustive: bool,
) -> Result<Simulation> {
    let problem = spec.problem;
    let lay = spec.layout;
    if decision.len() != lay.decision_len() {
        return Err(Error::Dimension(format!(
            "decision has {} entries, the layout needs {}",
            decision.len(),
            lay.decision_len()
        )));
    }
    let n = problem.dim_state();
    let (t0, tf) = problem.horizon();
    let t_search = tf + (tf - t0);
    let flow_opts = if record {
        spec.options.flow.clone()
    } else {
        spec.options.flow.quiet()
    };
    let p0 = decision.rows(0, n).into_owned();
    let free = decision.rows(n, lay.final_mu).into_owned();
    let nu = decision.rows(n + lay.final_mu, lay.multipliers).into_owned();

    let mut state = CotangentState::new(t0, spec.x0.clone(), p0);
    let mut arcs = Vec::new();
    let mut events = Vec::new();
    let mut residual = Vec::with_capacity(lay.residual_len());
    let mut mus = Vec::new();

    let mismatch = |arcs: Vec<ContinuousArc>, events: Vec<ResetEvent>, realized: usize, penalty: f64, mus| {
        let terminal = arcs.last().map(|a: &ContinuousArc| a.end.clone()).unwrap_or_else(|| state_placeholder(n));
        Ok(Simulation {
            arc: HybridArc {
                cost: arcs.iter().map(|a| a.running_cost).sum(),
                arcs,
                events,
                terminal,
            },
            residual: DVector::from_element(lay.residual_len(), penalty.abs().max(f64::EPSILON)),
            status: SimulationStatus::ResetCountMismatch {
                expected: spec.reset_count,
                realized,
                penalty,
            },
            jump_mus: mus,
        })
    };

    for k in 1..=spec.reset_count {
        let arc = flow::flow_until_guard(problem, &state, tf, &flow_opts)?;
        if arc.termination == Termination::HorizonEnd {
            let penalty = missing_crossing_penalty(problem, &arc.end, tf, t_search, &flow_opts);
            arcs.push(arc);
            return mismatch(arcs, events, k - 1, penalty, mus);
        }
        let pre = arc.end.clone();
        arcs.push(arc);
        let frame = build_guard_frame(problem, &pre.x)?;
        let cons = jump::consistency_residual(&frame, &pre.p);
        if k == 1 {
            residual.extend(cons.iter());
        }
        let interior = k < spec.reset_count;
        let (candidate, roots) = if interior {
            let opts = JumpOptions {
                warm_start: warm.get(k - 1).cloned().flatten(),
                require_consistency: false,
                exhaustive,
                ..spec.options.jump.clone()
            };
            match jump::solve_jump_in_frame(problem, &frame, &pre, t_search, &opts) {
                Ok(sol) => {
                    mus.push(sol.candidate.mu.clone());
                    (sol.candidate, sol.roots)
                }
                Err(Error::NoNextCrossing) => {
                    return mismatch(arcs, events, k, tf - t0, mus);
                }
                Err(e) => return Err(e),
            }
        } else {
            (jump::final_jump_unchecked(problem, &frame, &pre, &free)?, Vec::new())
        };
        let energy = jump::energy_residual(problem, &pre, &candidate)?;
        state = candidate.post_state();
        events.push(ResetEvent {
            t: pre.t,
            consistency_residual: cons.amax(),
            pre,
            candidate,
            energy_residual: energy,
            interior,
            roots,
        });
    }

    let last = flow::flow_until_guard(problem, &state, tf, &flow_opts)?;
    if last.termination == Termination::GuardHit {
        let penalty = tf - last.end.t;
        arcs.push(last);
        return mismatch(arcs, events, spec.reset_count + 1, penalty, mus);
    }
    let terminal = last.end.clone();
    arcs.push(last);

    residual.extend(problem.target(&terminal.x).iter());
    if lay.transversality > 0 {
        let dphi = problem::terminal_cost_gradient(problem, &terminal.x);
        let jpsi = problem::target_jacobian(problem, &terminal.x);
        let t = &terminal.p - dphi - jpsi.transpose() * nu;
        residual.extend(t.iter());
    }
    let cost = arcs.iter().map(|a| a.running_cost).sum::<f64>() + problem.terminal_cost(&terminal.x);
    Ok(Simulation {
        arc: HybridArc {
            arcs,
            events,
            cost,
            terminal,
        },
        residual: DVector::from_vec(residual),
        status: SimulationStatus::Ok,
        jump_mus: mus,
    })
}

fn state_placeholder(n: usize) -> CotangentState {
    CotangentState::new(f64::NAN, DVector::from_element(n, f64::NAN), DVector::from_element(n, f64::NAN))
}

#[derive(Debug, Clone)]
pub struct ShootingSolution {
    pub arc: HybridArc,
    pub decision: DVector<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    /// Costs of the other converged jump branches (reset index, cost).
    pub alternatives: Vec<(usize, f64)>,
}

struct Converged {
    decision: DVector<f64>,
    warm: Vec<Option<DVector<f64>>>,
    norm: f64,
    iterations: usize,
    sim: Simulation,
}

fn newton_from(spec: &ShootingSpec, guess: &DVector<f64>, warm0: Vec<Option<DVector<f64>>>) -> Result<Converged> {
    let warm = RefCell::new(warm0);
    let last: RefCell<Option<(DVector<f64>, Vec<DVector<f64>>)>> = RefCell::new(None);
    // Seed the inner warm starts from the guess itself.
    let initial = simulate(spec, guess, &warm.borrow().clone(), false, false);
    if let Ok(sim) = initial {
        if sim.status == SimulationStatus::Ok {
            for (slot, mu) in warm.borrow_mut().iter_mut().zip(sim.jump_mus) {
                slot.get_or_insert(mu);
            }
        }
    }
    let residual = |d: &DVector<f64>| -> Option<DVector<f64>> {
        let w = warm.borrow().clone();
        match simulate(spec, d, &w, false, false) {
            Ok(sim) if sim.status == SimulationStatus::Ok => {
                *last.borrow_mut() = Some((d.clone(), sim.jump_mus));
                Some(sim.residual)
            }
            _ => None,
        }
    };
    let on_accept = |x: &DVector<f64>| {
        if let Some((d, mus)) = &*last.borrow() {
            if d == x {
                *warm.borrow_mut() = mus.iter().cloned().map(Some).collect();
            }
        }
    };
    let rep = newton::damped_newton(residual, guess, &spec.options.newton, on_accept);
    if !rep.converged {
        return Err(Error::NoConvergence {
            best_residual: rep.norm,
            starts: vec![guess.iter().copied().collect()],
            detail: format!("shooting with {} resets", spec.reset_count),
        });
    }
    let warm = warm.into_inner();
    let sim = simulate(spec, &rep.x, &warm, true, true)?;
    if sim.status != SimulationStatus::Ok {
        return Err(Error::NoConvergence {
            best_residual: rep.norm,
            starts: vec![guess.iter().copied().collect()],
            detail: "converged decision lost its reset structure on re-simulation".into(),
        });
    }
    Ok(Converged {
        decision: rep.x,
        warm,
        norm: rep.norm,
        iterations: rep.iterations,
        sim,
    })
}

/// Solves the shooting system from the spec's guess and, if enabled, from
/// every alternative interior jump root of the converged arc.
pub fn solve(spec: &ShootingSpec) -> Result<ShootingSolution> {
    let warm0 = vec![None; spec.reset_count.saturating_sub(1)];
    let best = newton_from(spec, &spec.guess, warm0)?;
    let mut alternatives = Vec::new();
    let mut chosen = best;
    if spec.options.branch_roots {
        let base = chosen.sim.arc.clone();
        let base_warm = chosen.warm.clone();
        let base_decision = chosen.decision.clone();
        for (k, ev) in base.events.iter().enumerate().filter(|(_, e)| e.interior) {
            for root in ev.roots.iter() {
                let mu = DVector::from_column_slice(&root.mu);
                if (&mu - &ev.candidate.mu).norm() <= 1e-6 * (1.0 + mu.norm()) {
                    continue;
                }
                let mut warm = base_warm.clone();
                warm[k] = Some(mu);
                if let Ok(alt) = newton_from(spec, &base_decision, warm) {
                    alternatives.push((k, alt.sim.arc.cost));
                    if alt.sim.arc.cost < chosen.sim.arc.cost {
                        chosen = alt;
                    }
                }
            }
        }
    }
    Ok(ShootingSolution {
        arc: chosen.sim.arc,
        decision: chosen.decision,
        residual_norm: chosen.norm,
        iterations: chosen.iterations,
        alternatives,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ScanRow {
    pub reset_count: usize,
    pub converged: bool,
    pub cost: Option<f64>,
    pub residual_norm: Option<f64>,
    pub iterations: usize,
    pub decision: Option<Vec<f64>>,
    pub error: Option<String>,
    #[serde(skip)]
    pub arc: Option<HybridArc>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScanTable {
    pub rows: Vec<ScanRow>,
    /// Reset count of the cheapest converged row.
    pub minimizer: Option<usize>,
}

/// Solves N = 0..=n_max (rows in parallel) and marks the cheapest.
pub fn scan_reset_counts(
    problem: &dyn HybridProblem,
    x0: &DVector<f64>,
    n_max: usize,
    seeds: &(dyn Fn(usize) -> Option<DVector<f64>> + Sync),
    opts: &ShootingOptions,
) -> ScanTable {
    let rows: Vec<ScanRow> = (0..=n_max)
        .into_par_iter()
        .map(|n| {
            let outcome = ShootingSpec::new(problem, x0.clone(), n, seeds(n), opts.clone()).and_then(|s| solve(&s));
            match outcome {
                Ok(sol) => ScanRow {
                    reset_count: n,
                    converged: true,
                    cost: Some(sol.arc.cost),
                    residual_norm: Some(sol.residual_norm),
                    iterations: sol.iterations,
                    decision: Some(sol.decision.iter().copied().collect()),
                    error: None,
                    arc: Some(sol.arc),
                },
                Err(e) => ScanRow {
                    reset_count: n,
                    converged: false,
                    cost: None,
                    residual_norm: None,
                    iterations: 0,
                    decision: None,
                    error: Some(e.to_string()),
                    arc: None,
                },
            }
        })
        .collect();
    let minimizer = rows
        .iter()
        .filter_map(|r| r.cost.map(|c| (r.reset_count, c)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(n, _)| n);
    ScanTable { rows, minimizer }
}
