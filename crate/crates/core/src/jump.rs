//! Co-state jumps across submersive resets.
//!
//! For a reset of rank `r < n − 1` the jump condition
//! `p⁺∘Δ_* − p⁻ ∈ Ann(TS)`, `H⁺ = H⁻` only has solutions when `p⁻`
//! annihilates the fibers of `Δ`, and then has an `(n − r − 1)`-dimensional
//! family of them. Every member is written as
//!
//! ```text
//! p⁺ = p⁻∘Δ_*† + Σ μᵢ aᵢ,      aᵢ spanning Ann(T Δ(S))
//! ```
//!
//! and the member that keeps the next reset consistent is selected by a
//! root-find in `μ` over the energy equation and the consistency residual at
//! the next guard crossing.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{self, CotangentState, FlowOptions, Termination};
use crate::linalg;
use crate::newton::{self, NewtonOptions};
use crate::problem::{build_guard_frame, GuardFrame, HybridProblem};

/// Largest fiber residual accepted for a pre-reset co-state.
pub const CONSISTENCY_TOL: f64 = 1e-8;

/// Default multi-start grid, per annihilator coordinate, in units of
/// `1 + ‖p⁻‖`.
pub const DEFAULT_GRID: [f64; 5] = [-0.9, -0.5, 0.0, 0.5, 0.9];

/// A point of the lifted reset family.
#[derive(Debug, Clone)]
pub struct JumpCandidate {
    pub pre: CotangentState,
    pub post_x: DVector<f64>,
    /// Coefficients in the frame's image-annihilator basis.
    pub mu: DVector<f64>,
    pub post_p: DVector<f64>,
}

impl JumpCandidate {
    /// The post-reset phase point at the reset time.
    pub fn post_state(&self) -> CotangentState {
        CotangentState::new(self.pre.t, self.post_x.clone(), self.post_p.clone())
    }

    /// `max_j |p⁺·(Δ_* v_j) − p⁻·v_j|` over the tangent basis.
    pub fn pullback_defect(&self, frame: &GuardFrame) -> f64 {
        let pulled = frame.reset_jacobian.transpose() * &self.post_p;
        let restricted = frame.tangent_basis.transpose() * &self.pre.p;
        (pulled - restricted).amax()
    }
}

/// `p` applied to each fiber direction; zero iff `p ∈ Ann(TF)`.
pub fn consistency_residual(frame: &GuardFrame, p: &DVector<f64>) -> DVector<f64> {
    frame.fiber_basis.transpose() * p
}

/// Moore–Penrose right pseudo-inverse of the restricted reset Jacobian.
pub fn right_pseudo_inverse(reset_jacobian: &DMatrix<f64>, rank: usize) -> Result<DMatrix<f64>> {
    linalg::pseudo_inverse_with_rank(reset_jacobian, rank)
}

/// `p⁻∘Δ_*† + Σ μᵢ aᵢ` in ambient coordinates, without checking consistency.
pub fn lift_costate(frame: &GuardFrame, p_pre: &DVector<f64>, mu: &DVector<f64>) -> DVector<f64> {
    let restricted = frame.tangent_basis.transpose() * p_pre;
    frame.reset_pinv.transpose() * restricted + frame.image_annihilator_basis.transpose() * mu
}

fn check_consistent(frame: &GuardFrame, p: &DVector<f64>) -> Result<()> {
    let res = consistency_residual(frame, p);
    let worst = res.amax();
    if res.len() > 0 && !(worst <= CONSISTENCY_TOL) {
        return Err(Error::InconsistentCostate { residual: worst });
    }
    Ok(())
}

fn check_mu(frame: &GuardFrame, mu: &DVector<f64>) -> Result<()> {
    if mu.len() != frame.mu_dim() {
        return Err(Error::Dimension(format!(
            "μ has {} entries, the image annihilator has dimension {}",
            mu.len(),
            frame.mu_dim()
        )));
    }
    Ok(())
}

/// Lifts a consistent pre-reset co-state with annihilator coefficients `mu`.
pub fn jump_candidate(frame: &GuardFrame, pre: &CotangentState, mu: &DVector<f64>) -> Result<JumpCandidate> {
    check_mu(frame, mu)?;
    check_consistent(frame, &pre.p)?;
    Ok(candidate_unchecked(frame, pre, mu))
}

fn candidate_unchecked(frame: &GuardFrame, pre: &CotangentState, mu: &DVector<f64>) -> JumpCandidate {
    JumpCandidate {
        pre: pre.clone(),
        post_x: frame.image_point.clone(),
        mu: mu.clone(),
        post_p: lift_costate(frame, &pre.p, mu),
    }
}

/// `H(Δ(x⁻), p⁺) − H(x⁻, p⁻)`.
pub fn energy_residual(problem: &dyn HybridProblem, pre: &CotangentState, candidate: &JumpCandidate) -> Result<f64> {
    let (h_post, _) = flow::optimized_hamiltonian(problem, &candidate.post_x, &candidate.post_p)?;
    let (h_pre, _) = flow::optimized_hamiltonian(problem, &pre.x, &pre.p)?;
    Ok(h_post - h_pre)
}

/// Flows `state` to its next guard crossing and returns the consistency
/// residual there, or `None` when no crossing happens before `t_max`.
pub fn admissibility_residual(
    problem: &dyn HybridProblem,
    state: &CotangentState,
    t_max: f64,
    opts: &FlowOptions,
) -> Result<Option<DVector<f64>>> {
    Ok(admissibility_at_next_crossing(problem, state, t_max, opts)?.map(|(r, _)| r))
}

fn admissibility_at_next_crossing(
    problem: &dyn HybridProblem,
    state: &CotangentState,
    t_max: f64,
    opts: &FlowOptions,
) -> Result<Option<(DVector<f64>, f64)>> {
    let arc = flow::flow_until_guard(problem, state, t_max, &opts.quiet())?;
    if arc.termination != Termination::GuardHit {
        return Ok(None);
    }
    let frame = build_guard_frame(problem, &arc.end.x)?;
    Ok(Some((consistency_residual(&frame, &arc.end.p), arc.end.t)))
}

/// Stacked selection residual `[H⁺ − H⁻, consistency at the next crossing]`.
pub fn reset_residual(
    problem: &dyn HybridProblem,
    frame: &GuardFrame,
    pre: &CotangentState,
    mu: &DVector<f64>,
    t_max: f64,
    opts: &FlowOptions,
) -> Result<Option<DVector<f64>>> {
    check_mu(frame, mu)?;
    let cand = candidate_unchecked(frame, pre, mu);
    let energy = energy_residual(problem, pre, &cand)?;
    let Some(adm) = admissibility_residual(problem, &cand.post_state(), t_max, opts)? else {
        return Ok(None);
    };
    let mut out = DVector::zeros(1 + adm.len());
    out[0] = energy;
    out.rows_mut(1, adm.len()).copy_from(&adm);
    Ok(Some(out))
}

#[derive(Debug, Clone)]
pub struct JumpOptions {
    pub newton: NewtonOptions,
    /// Per-coordinate start values in units of `1 + ‖p⁻‖`.
    pub grid: Vec<f64>,
    /// Run every start and report all distinct roots instead of stopping at
    /// the first converged one.
    pub exhaustive: bool,
    /// Tried before the grid (continuation from a previous solve).
    pub warm_start: Option<DVector<f64>>,
    pub require_consistency: bool,
    pub flow: FlowOptions,
}

impl Default for JumpOptions {
    fn default() -> Self {
        Self {
            newton: NewtonOptions::default(),
            grid: DEFAULT_GRID.to_vec(),
            exhaustive: false,
            warm_start: None,
            require_consistency: true,
            flow: FlowOptions::default().quiet(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct JumpRoot {
    pub mu: Vec<f64>,
    pub post_p: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct JumpSolution {
    pub candidate: JumpCandidate,
    pub energy_residual: f64,
    pub admissibility_residual: DVector<f64>,
    /// Absolute time of the next guard crossing under the selected co-state.
    pub next_crossing: f64,
    pub iterations: usize,
    pub starts_tried: usize,
    /// All distinct roots found, best stacked residual first.
    pub roots: Vec<JumpRoot>,
}

impl JumpSolution {
    pub fn residual_norm(&self) -> f64 {
        self.energy_residual.abs().max(self.admissibility_residual.amax())
    }
}

fn grid_starts(grid: &[f64], dim: usize, scale: f64) -> Vec<DVector<f64>> {
    let mut starts = vec![DVector::zeros(dim)];
    for d in 0..dim {
        let mut next = Vec::with_capacity(starts.len() * grid.len());
        for s in &starts {
            for g in grid {
                let mut v: DVector<f64> = s.clone();
                v[d] = g * scale;
                next.push(v);
            }
        }
        starts = next;
    }
    // centre first, then outward; ties keep lexicographic order
    starts.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
    starts.dedup();
    starts
}

/// Selects the post-reset co-state at a guard point (builds the frame first).
pub fn solve_jump(
    problem: &dyn HybridProblem,
    pre: &CotangentState,
    t_max: f64,
    opts: &JumpOptions,
) -> Result<JumpSolution> {
    let frame = build_guard_frame(problem, &pre.x)?;
    solve_jump_in_frame(problem, &frame, pre, t_max, opts)
}

/// Selects the post-reset co-state in a given frame: damped Newton on the
/// stacked residual, from the warm start and then the multi-start grid.
pub fn solve_jump_in_frame(
    problem: &dyn HybridProblem,
    frame: &GuardFrame,
    pre: &CotangentState,
    t_max: f64,
    opts: &JumpOptions,
) -> Result<JumpSolution> {
    if opts.require_consistency {
        check_consistent(frame, &pre.p)?;
    }
    let dim = frame.mu_dim();
    let mut starts = Vec::new();
    if let Some(w) = &opts.warm_start {
        check_mu(frame, w)?;
        starts.push(w.clone());
    }
    starts.extend(grid_starts(&opts.grid, dim, 1.0 + pre.p.norm()));

    let residual = |mu: &DVector<f64>| -> Option<DVector<f64>> {
        reset_residual(problem, frame, pre, mu, t_max, &opts.flow).ok().flatten()
    };

    let mut roots: Vec<(DVector<f64>, f64, usize)> = Vec::new();
    let mut tried = Vec::new();
    let mut any_crossing = false;
    let mut best_residual = f64::INFINITY;
    for start in &starts {
        tried.push(start.iter().copied().collect::<Vec<_>>());
        let rep = newton::damped_newton(residual, start, &opts.newton, |_| {});
        if rep.residual.is_some() {
            any_crossing = true;
        }
        best_residual = best_residual.min(rep.norm);
        if rep.converged {
            let post = lift_costate(frame, &pre.p, &rep.x);
            let dup = roots.iter().any(|(m, _, _)| {
                let other = lift_costate(frame, &pre.p, m);
                (other - &post).norm() <= 1e-6 * (1.0 + post.norm())
            });
            if !dup {
                roots.push((rep.x.clone(), rep.norm, rep.iterations));
            }
            if !opts.exhaustive {
                break;
            }
        }
    }
    if roots.is_empty() {
        if !any_crossing {
            return Err(Error::NoNextCrossing);
        }
        return Err(Error::NoConvergence {
            best_residual,
            starts: tried,
            detail: "co-state jump selection".into(),
        });
    }
    // The first root found is the continuation branch; report all roots
    // sorted by residual.
    let (mu, _, iterations) = roots[0].clone();
    let mut report: Vec<JumpRoot> = roots
        .iter()
        .map(|(m, norm, it)| JumpRoot {
            mu: m.iter().copied().collect(),
            post_p: lift_costate(frame, &pre.p, m).iter().copied().collect(),
            residual_norm: *norm,
            iterations: *it,
        })
        .collect();
    report.sort_by(|a, b| a.residual_norm.total_cmp(&b.residual_norm));

    let candidate = candidate_unchecked(frame, pre, &mu);
    let energy = energy_residual(problem, pre, &candidate)?;
    let (adm, next) = admissibility_at_next_crossing(problem, &candidate.post_state(), t_max, &opts.flow)?
        .ok_or(Error::NoNextCrossing)?;
    Ok(JumpSolution {
        candidate,
        energy_residual: energy,
        admissibility_residual: adm,
        next_crossing: next,
        iterations,
        starts_tried: tried.len(),
        roots: report,
    })
}

/// Number of free parameters of the final jump (`n − r − 1`).
pub fn final_jump_free_dim(frame: &GuardFrame) -> usize {
    frame.mu_dim().saturating_sub(1)
}

/// Index of the annihilator coordinate eliminated by the energy equation.
///
/// Chosen where `∂H/∂μᵢ` is largest at `μ = 0`.
pub fn energy_pivot(problem: &dyn HybridProblem, frame: &GuardFrame, pre: &CotangentState) -> Result<usize> {
    let base = lift_costate(frame, &pre.p, &DVector::zeros(frame.mu_dim()));
    let (dh_dp, _) = flow::hamiltonian_rhs(problem, &frame.image_point, &base)?;
    let slopes = &frame.image_annihilator_basis * dh_dp;
    Ok(slopes.iamax())
}

/// Final-reset jump: the energy equation fixes one annihilator coefficient and
/// the remaining `n − r − 1` come from `free`.
pub fn final_jump(
    problem: &dyn HybridProblem,
    frame: &GuardFrame,
    pre: &CotangentState,
    free: &DVector<f64>,
) -> Result<JumpCandidate> {
    check_consistent(frame, &pre.p)?;
    final_jump_unchecked(problem, frame, pre, free)
}

pub(crate) fn final_jump_unchecked(
    problem: &dyn HybridProblem,
    frame: &GuardFrame,
    pre: &CotangentState,
    free: &DVector<f64>,
) -> Result<JumpCandidate> {
    let dim = frame.mu_dim();
    if free.len() != final_jump_free_dim(frame) {
        return Err(Error::Dimension(format!(
            "final jump takes {} free parameters, got {}",
            final_jump_free_dim(frame),
            free.len()
        )));
    }
    let pivot = energy_pivot(problem, frame, pre)?;
    let mut mu = DVector::zeros(dim);
    let mut it_free = free.iter();
    for i in 0..dim {
        if i != pivot {
            mu[i] = *it_free.next().expect("length checked");
        }
    }
    let (target, _) = flow::optimized_hamiltonian(problem, &pre.x, &pre.p)?;
    let a = frame.image_annihilator_basis.row(pivot).transpose();
    let tol = 1e-13 * (1.0 + target.abs());
    let mut last = f64::INFINITY;
    for _ in 0..60 {
        let p = lift_costate(frame, &pre.p, &mu);
        let (h, _) = flow::optimized_hamiltonian(problem, &frame.image_point, &p)?;
        let r = h - target;
        last = r;
        if r.abs() <= tol {
            return Ok(candidate_unchecked(frame, pre, &mu));
        }
        let (dh_dp, _) = flow::hamiltonian_rhs(problem, &frame.image_point, &p)?;
        let slope = dh_dp.dot(&a);
        if slope == 0.0 || !slope.is_finite() {
            break;
        }
        mu[pivot] -= r / slope;
    }
    Err(Error::NoConvergence {
        best_residual: last.abs(),
        starts: vec![mu.iter().copied().collect()],
        detail: "energy equation of the final jump".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bouncing_ball::BouncingBall;

    fn assert_close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12), "{a:?} != {b:?}");
    }

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn fig5_pre() -> CotangentState {
        CotangentState::from_slices(0.0, &[0.0, -1.0, 0.1], &[1.0, 1.0, 0.0])
    }

    #[test]
    fn consistency_picks_out_pz() {
        let ball = BouncingBall::default();
        let f = build_guard_frame(&ball, &v(&[0.0, -1.0, 0.1])).unwrap();
        assert_eq!(consistency_residual(&f, &v(&[1.0, 1.0, 0.0])), v(&[0.0]));
        assert_eq!(consistency_residual(&f, &v(&[1.0, 1.0, 0.3])), v(&[0.3]));
    }

    #[test]
    fn lifted_family_matches_printed_form() {
        let ball = BouncingBall::default();
        let f = build_guard_frame(&ball, &v(&[0.0, -1.0, 0.1])).unwrap();
        let c = jump_candidate(&f, &fig5_pre(), &v(&[0.7, 0.4])).unwrap();
        assert_close(c.post_p.as_slice(), v(&[0.7, -1.0, 0.4]).as_slice());
        let c0 = jump_candidate(&f, &fig5_pre(), &v(&[0.0, 0.0])).unwrap();
        assert_close(c0.post_p.as_slice(), v(&[0.0, -1.0, 0.0]).as_slice());
        assert!(c.pullback_defect(&f) <= 1e-9);
    }

    #[test]
    fn inconsistent_costate_is_rejected() {
        let ball = BouncingBall::default();
        let f = build_guard_frame(&ball, &v(&[0.0, -1.0, 0.1])).unwrap();
        let pre = CotangentState::from_slices(0.0, &[0.0, -1.0, 0.1], &[1.0, 1.0, 0.5]);
        assert!(matches!(
            jump_candidate(&f, &pre, &v(&[0.0, 0.0])),
            Err(Error::InconsistentCostate { .. })
        ));
        assert!(matches!(
            final_jump(&ball, &f, &pre, &v(&[0.5])),
            Err(Error::InconsistentCostate { .. })
        ));
    }

    #[test]
    fn pseudo_inverse_of_example_jacobian() {
        let j = nalgebra::dmatrix![0.0, 0.0; -1.0, 0.0; 0.0, 0.0];
        let p = right_pseudo_inverse(&j, 1).unwrap();
        assert_close(p.as_slice(), nalgebra::dmatrix![0.0, -1.0, 0.0; 0.0, 0.0, 0.0].as_slice());
        assert!((&j * &p * &j - &j).amax() <= 1e-9);
        assert!(matches!(right_pseudo_inverse(&j, 0), Err(Error::RankMismatch { .. })));
    }

    #[test]
    fn final_jump_energy_closes_at_printed_point() {
        let ball = BouncingBall::default();
        let f = build_guard_frame(&ball, &v(&[0.0, -1.0, 0.1])).unwrap();
        assert_eq!(final_jump_free_dim(&f), 1);
        let c = final_jump(&ball, &f, &fig5_pre(), &v(&[0.8832])).unwrap();
        assert!((c.post_p[0] + 3.1050).abs() < 1e-3);
        assert!((c.post_p[1] + 1.0).abs() < 1e-12);
        assert!((c.post_p[2] - 0.8832).abs() < 1e-12);
        assert!(energy_residual(&ball, &fig5_pre(), &c).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn final_jump_at_zero_amplitude() {
        let ball = BouncingBall::default();
        let pre = CotangentState::from_slices(0.0, &[0.0, -1.7, 0.3], &[0.4, -0.6, 0.0]);
        let f = build_guard_frame(&ball, &pre.x).unwrap();
        let c = final_jump(&ball, &f, &pre, &v(&[0.0])).unwrap();
        let (y, z, px, py) = (-1.7, 0.3, 0.4, -0.6);
        let expected = (0.5 * (1.0 - z * z) - px * y + 2.0 * py) / y;
        assert!((c.post_p[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn grid_starts_centre_first() {
        let s = grid_starts(&DEFAULT_GRID, 2, 2.0);
        assert_eq!(s.len(), 25);
        assert_eq!(s[0], v(&[0.0, 0.0]));
    }
}
