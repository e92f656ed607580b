//! Hybrid optimal control problems on a Euclidean chart and the local guard
//! geometry every other module consumes.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, RankedSvd};

/// Maximum |g(x)| accepted for a point to count as lying on the guard.
pub const GUARD_TOLERANCE: f64 = 1e-8;

/// Relative step used for finite-difference Jacobians of user functions.
pub const FD_REL_STEP: f64 = 1e-6;

/// A hybrid control system `ẋ = f(x, u)` off the guard `S = {g = 0}`,
/// `x⁺ = Δ(x⁻)` on it, together with the cost and terminal data.
///
/// Only the required methods must be written; the optional ones let a problem
/// supply closed forms that otherwise fall back to finite differences (or, for
/// the control minimizer, to an error). Implementations must be pure.
pub trait HybridProblem: Send + Sync {
    fn dim_state(&self) -> usize;
    fn dim_control(&self) -> usize;

    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn running_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64;
    fn terminal_cost(&self, _x: &DVector<f64>) -> f64 {
        0.0
    }

    /// Scalar function whose zero level set is the guard.
    fn guard(&self, x: &DVector<f64>) -> f64;
    /// Crossing-direction predicate evaluated at a zero of [`guard`](Self::guard).
    fn guard_admits(&self, x: &DVector<f64>) -> bool;

    fn reset(&self, x: &DVector<f64>) -> DVector<f64>;
    /// Declared rank of `Δ_* : TS → TM`.
    fn reset_rank(&self) -> usize;

    /// Target functions `ψ_j`; the target manifold is their common zero set.
    fn target(&self, x: &DVector<f64>) -> DVector<f64>;
    fn target_count(&self) -> usize;

    fn horizon(&self) -> (f64, f64);

    /// Closed-form `argmin_u ⟨p, f(x,u)⟩ + ℓ(x,u)`.
    fn optimal_control(&self, _x: &DVector<f64>, _p: &DVector<f64>) -> Option<DVector<f64>> {
        None
    }
    /// Analytic `(∂H/∂x, ∂H/∂p)` of the optimized Hamiltonian.
    fn hamiltonian_gradient(
        &self,
        _x: &DVector<f64>,
        _p: &DVector<f64>,
    ) -> Option<(DVector<f64>, DVector<f64>)> {
        None
    }
    fn guard_gradient(&self, _x: &DVector<f64>) -> Option<DVector<f64>> {
        None
    }
    /// Analytic ambient `n × n` Jacobian of the reset map.
    fn reset_jacobian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
}

/// Checks the structural invariants of a problem definition.
pub fn validate(problem: &dyn HybridProblem) -> Result<()> {
    let n = problem.dim_state();
    let r = problem.reset_rank();
    if n < 2 {
        return Err(Error::Dimension(format!(
            "state dimension {n} leaves no room for a codimension-one guard"
        )));
    }
    if problem.dim_control() == 0 {
        return Err(Error::Dimension("control dimension must be positive".into()));
    }
    if r == 0 || r > n - 1 {
        return Err(Error::Dimension(format!(
            "reset rank {r} must lie in 1..={}",
            n - 1
        )));
    }
    if problem.target_count() > n {
        return Err(Error::Dimension(format!(
            "{} target functions exceed the state dimension {n}",
            problem.target_count()
        )));
    }
    let (t0, t1) = problem.horizon();
    if !(t1 >= t0) {
        return Err(Error::Dimension(format!("horizon [{t0}, {t1}] is empty")));
    }
    Ok(())
}

pub fn guard_gradient(problem: &dyn HybridProblem, x: &DVector<f64>) -> DVector<f64> {
    problem
        .guard_gradient(x)
        .unwrap_or_else(|| linalg::central_gradient(|y| problem.guard(y), x, FD_REL_STEP))
}

/// Jacobian of the target functions, analytic-free (central differences).
pub fn target_jacobian(problem: &dyn HybridProblem, x: &DVector<f64>) -> DMatrix<f64> {
    linalg::central_jacobian(|y| problem.target(y), x, FD_REL_STEP)
}

pub fn terminal_cost_gradient(problem: &dyn HybridProblem, x: &DVector<f64>) -> DVector<f64> {
    linalg::central_gradient(|y| problem.terminal_cost(y), x, FD_REL_STEP)
}

/// Push-forward of the reset restricted to the given tangent directions.
///
/// Uses the analytic ambient Jacobian when available, otherwise central
/// differences of `Δ` along each tangent direction.
pub fn reset_pushforward(
    problem: &dyn HybridProblem,
    x: &DVector<f64>,
    tangent: &DMatrix<f64>,
) -> DMatrix<f64> {
    if let Some(jac) = problem.reset_jacobian(x) {
        return jac * tangent;
    }
    reset_pushforward_fd(problem, x, tangent)
}

/// Finite-difference push-forward, regardless of any analytic Jacobian.
pub fn reset_pushforward_fd(
    problem: &dyn HybridProblem,
    x: &DVector<f64>,
    tangent: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = problem.dim_state();
    let h = FD_REL_STEP * (1.0 + x.amax());
    let mut out = DMatrix::zeros(n, tangent.ncols());
    for j in 0..tangent.ncols() {
        let v = tangent.column(j);
        let fp = problem.reset(&(x + h * v));
        let fm = problem.reset(&(x - h * v));
        out.set_column(j, &((fp - fm) / (2.0 * h)));
    }
    out
}

/// Local geometry of the guard and the reset at one guard point.
#[derive(Debug, Clone)]
pub struct GuardFrame {
    pub point: DVector<f64>,
    /// `Δ(point)`.
    pub image_point: DVector<f64>,
    /// Gradient of `g`; spans `Ann(T_x S)`.
    pub guard_normal: DVector<f64>,
    /// `n × (n−1)`, orthonormal columns spanning `T_x S`.
    pub tangent_basis: DMatrix<f64>,
    /// `n × (n−1)`: `Δ_*` applied to the tangent basis.
    pub reset_jacobian: DMatrix<f64>,
    /// `(n−1) × n` Moore–Penrose pseudo-inverse of `reset_jacobian`.
    pub reset_pinv: DMatrix<f64>,
    /// `n × (n−1−r)`, columns spanning `T_x F = ker Δ_* ∩ T_x S`.
    pub fiber_basis: DMatrix<f64>,
    /// `(n−r) × n`, rows spanning `Ann(T Δ(S))` at the image point.
    pub image_annihilator_basis: DMatrix<f64>,
    pub rank: usize,
}

impl GuardFrame {
    pub fn dim_state(&self) -> usize {
        self.point.len()
    }

    /// Number of free annihilator coefficients in a lifted co-state (`n − r`).
    pub fn mu_dim(&self) -> usize {
        self.image_annihilator_basis.nrows()
    }

    /// Number of fiber directions (`n − 1 − r`).
    pub fn fiber_dim(&self) -> usize {
        self.fiber_basis.ncols()
    }

    /// Largest violation of the frame invariants; zero for an exact frame.
    pub fn invariant_defect(&self) -> f64 {
        let kernel = (&self.reset_jacobian * self.tangent_coords_of_fibers()).amax();
        let annihilated = (&self.image_annihilator_basis * &self.reset_jacobian).amax();
        let tangent = (self.guard_normal.transpose() * &self.tangent_basis).amax()
            / self.guard_normal.norm().max(f64::MIN_POSITIVE);
        kernel.max(annihilated).max(tangent)
    }

    fn tangent_coords_of_fibers(&self) -> DMatrix<f64> {
        self.tangent_basis.transpose() * &self.fiber_basis
    }
}

/// Builds the guard frame at `x`.
///
/// The tangent basis completes the unit guard normal to an orthonormal frame;
/// the fiber and image-annihilator bases are orthogonal complements of the row
/// and column spaces of the restricted reset Jacobian.
pub fn build_guard_frame(problem: &dyn HybridProblem, x: &DVector<f64>) -> Result<GuardFrame> {
    let n = problem.dim_state();
    if x.len() != n {
        return Err(Error::Dimension(format!(
            "state has {} entries, problem has dimension {n}",
            x.len()
        )));
    }
    let g = problem.guard(x);
    if !(g.abs() <= GUARD_TOLERANCE) {
        return Err(Error::NotOnGuard {
            residual: g.abs(),
            tolerance: GUARD_TOLERANCE,
        });
    }
    let normal = guard_gradient(problem, x);
    let nn = normal.norm();
    if !(nn > 0.0) || !nn.is_finite() {
        return Err(Error::DegenerateGuard);
    }
    let tangent = linalg::columns(n, &linalg::orthonormal_complement(&[&normal / nn], n));
    let jac = reset_pushforward(problem, x, &tangent);

    let declared = problem.reset_rank();
    let svd = RankedSvd::new(&jac);
    if svd.rank != declared {
        return Err(Error::RankMismatch {
            declared,
            found: svd.rank,
        });
    }
    let pinv = svd.pseudo_inverse(n, n - 1);

    let kernel = linalg::orthonormal_complement(&svd.corange, n - 1);
    let fibers: Vec<DVector<f64>> = kernel.iter().map(|k| &tangent * k).collect();
    let annihilators = linalg::orthonormal_complement(&svd.range, n);
    let mut ann = DMatrix::zeros(annihilators.len(), n);
    for (i, a) in annihilators.iter().enumerate() {
        ann.set_row(i, &a.transpose());
    }

    Ok(GuardFrame {
        point: x.clone(),
        image_point: problem.reset(x),
        guard_normal: normal,
        tangent_basis: tangent,
        reset_jacobian: jac,
        reset_pinv: pinv,
        fiber_basis: linalg::columns(n, &fibers),
        image_annihilator_basis: ann,
        rank: svd.rank,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bouncing_ball::BouncingBall;
    use nalgebra::dmatrix;

    fn assert_close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12), "{a:?} != {b:?}");
    }

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn bouncing_ball_frame() {
        let ball = BouncingBall::default();
        let f = build_guard_frame(&ball, &v(&[0.0, -1.0, 0.1])).unwrap();
        assert_close(f.guard_normal.as_slice(), v(&[1.0, 0.0, 0.0]).as_slice());
        assert_close(f.tangent_basis.as_slice(), dmatrix![0.0, 0.0; 1.0, 0.0; 0.0, 1.0].as_slice());
        assert_close(f.reset_jacobian.as_slice(), dmatrix![0.0, 0.0; -1.0, 0.0; 0.0, 0.0].as_slice());
        assert_eq!(f.rank, 1);
        assert_close(f.fiber_basis.as_slice(), dmatrix![0.0; 0.0; 1.0].as_slice());
        assert_close(f.image_annihilator_basis.as_slice(), dmatrix![1.0, 0.0, 0.0; 0.0, 0.0, 1.0].as_slice());
        assert_close(f.image_point.as_slice(), v(&[0.0, 1.0, 1.0]).as_slice());
        assert!(f.invariant_defect() < 1e-14);
    }

    #[test]
    fn off_guard_point_is_rejected() {
        let ball = BouncingBall::default();
        let err = build_guard_frame(&ball, &v(&[1.0, -1.0, 0.1])).unwrap_err();
        assert!(matches!(err, Error::NotOnGuard { .. }));
    }

    #[test]
    fn finite_difference_pushforward_matches_analytic() {
        let ball = BouncingBall::default();
        let x = v(&[0.0, -1.3, 0.4]);
        let f = build_guard_frame(&ball, &x).unwrap();
        let fd = reset_pushforward_fd(&ball, &x, &f.tangent_basis);
        let scale = f.reset_jacobian.amax().max(1.0);
        assert!((fd - &f.reset_jacobian).amax() <= 1e-6 * scale);
    }

    #[test]
    fn frame_is_deterministic() {
        let ball = BouncingBall::default();
        let x = v(&[0.0, -0.7, 2.0]);
        let a = build_guard_frame(&ball, &x).unwrap();
        let b = build_guard_frame(&ball, &x).unwrap();
        assert_eq!(a.tangent_basis, b.tangent_basis);
        assert_eq!(a.fiber_basis, b.fiber_basis);
        assert_eq!(a.image_annihilator_basis, b.image_annihilator_basis);
    }

    #[test]
    fn validate_rejects_full_rank_declaration() {
        struct Bad;
        impl HybridProblem for Bad {
            fn dim_state(&self) -> usize {
                2
            }
            fn dim_control(&self) -> usize {
                1
            }
            fn dynamics(&self, _x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
                v(&[u[0], 0.0])
            }
            fn running_cost(&self, _x: &DVector<f64>, u: &DVector<f64>) -> f64 {
                u.norm_squared()
            }
            fn guard(&self, x: &DVector<f64>) -> f64 {
                x[0]
            }
            fn guard_admits(&self, _x: &DVector<f64>) -> bool {
                true
            }
            fn reset(&self, x: &DVector<f64>) -> DVector<f64> {
                x.clone()
            }
            fn reset_rank(&self) -> usize {
                2
            }
            fn target(&self, x: &DVector<f64>) -> DVector<f64> {
                x.clone()
            }
            fn target_count(&self) -> usize {
                2
            }
            fn horizon(&self) -> (f64, f64) {
                (0.0, 1.0)
            }
        }
        assert!(matches!(validate(&Bad), Err(Error::Dimension(_))));
    }
}
