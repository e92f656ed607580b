//! Damped Newton iteration with forward-difference Jacobians.
//!
//! Residual functions return `None` where they are undefined (a flow that
//! misses the guard, a trajectory with the wrong number of resets). Such
//! points are treated as infinitely bad by the line search, so the iteration
//! backs off instead of failing.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct NewtonOptions {
    /// Converged once `‖r‖_∞ <= tol`.
    pub tol: f64,
    pub max_iter: usize,
    /// Relative forward-difference step.
    pub fd_step: f64,
    /// Always take at least this many Newton steps, even from a start that
    /// already meets `tol`.
    pub min_iter: usize,
    /// Smallest line-search damping factor tried before declaring a stall.
    pub min_damping: f64,
    /// Caps the Euclidean length of a full Newton step.
    pub max_step: Option<f64>,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 50,
            fd_step: 1e-7,
            min_iter: 0,
            min_damping: 1.0 / 1024.0,
            max_step: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonReport {
    pub x: DVector<f64>,
    pub residual: Option<DVector<f64>>,
    pub norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn inf_norm(r: &DVector<f64>) -> f64 {
    r.iter().fold(0.0_f64, |m, v| if v.is_nan() { f64::INFINITY } else { m.max(v.abs()) })
}

/// Forward-difference Jacobian; falls back to a backward difference where the
/// forward point is undefined.
pub fn fd_jacobian<F>(f: &mut F, x: &DVector<f64>, r0: &DVector<f64>, rel: f64) -> Option<DMatrix<f64>>
where
    F: FnMut(&DVector<f64>) -> Option<DVector<f64>>,
{
    let mut jac = DMatrix::zeros(r0.len(), x.len());
    for j in 0..x.len() {
        let h = rel * x[j].abs().max(1.0);
        let mut xp = x.clone();
        xp[j] += h;
        let col = match f(&xp) {
            Some(rp) if rp.len() == r0.len() => (rp - r0) / h,
            _ => {
                let mut xm = x.clone();
                xm[j] -= h;
                let rm = f(&xm)?;
                if rm.len() != r0.len() {
                    return None;
                }
                (r0 - rm) / h
            }
        };
        jac.set_column(j, &col);
    }
    Some(jac)
}

fn newton_direction(jac: &DMatrix<f64>, r: &DVector<f64>) -> Option<DVector<f64>> {
    if jac.is_square() {
        if let Some(d) = jac.clone().lu().solve(&(-r)) {
            if d.iter().all(|v| v.is_finite()) {
                return Some(d);
            }
        }
    }
    let svd = jac.clone().svd(true, true);
    let smax = svd.singular_values.max();
    svd.solve(&(-r), 1e-12 * smax.max(f64::MIN_POSITIVE)).ok()
}

/// Runs damped Newton from `x0`. `on_accept` sees every accepted iterate.
pub fn damped_newton<F, A>(mut f: F, x0: &DVector<f64>, opts: &NewtonOptions, mut on_accept: A) -> NewtonReport
where
    F: FnMut(&DVector<f64>) -> Option<DVector<f64>>,
    A: FnMut(&DVector<f64>),
{
    let mut x = x0.clone();
    let Some(mut r) = f(&x) else {
        return NewtonReport {
            x,
            residual: None,
            norm: f64::INFINITY,
            iterations: 0,
            converged: false,
        };
    };
    let mut norm = inf_norm(&r);
    let mut it = 0;
    while it < opts.max_iter {
        if norm <= opts.tol && it >= opts.min_iter {
            break;
        }
        let Some(jac) = fd_jacobian(&mut f, &x, &r, opts.fd_step) else {
            break;
        };
        let Some(mut dx) = newton_direction(&jac, &r) else {
            break;
        };
        if let Some(cap) = opts.max_step {
            let len = dx.norm();
            if len > cap {
                dx *= cap / len;
            }
        }
        let merit = r.norm();
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha >= opts.min_damping {
            let trial = &x + alpha * &dx;
            if let Some(rt) = f(&trial) {
                let m = rt.norm();
                if m.is_finite() && m < (1.0 - 1e-4 * alpha) * merit {
                    accepted = Some((trial, rt));
                    break;
                }
            }
            alpha *= 0.5;
        }
        it += 1;
        match accepted {
            Some((xn, rn)) => {
                x = xn;
                r = rn;
                norm = inf_norm(&r);
                on_accept(&x);
            }
            None => break,
        }
    }
    NewtonReport {
        converged: norm <= opts.tol,
        x,
        residual: Some(r),
        norm,
        iterations: it,
    }
}
