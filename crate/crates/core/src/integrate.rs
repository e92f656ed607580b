//! Dormand–Prince 5(4) integration with dense output and guard-event
//! localization.
//!
//! The integrator is deliberately small: it only knows about a right-hand
//! side over plain slices, one scalar event function with a direction
//! predicate, and an observer that sees every accepted point.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            atol: 1e-12,
        }
    }
}

/// Scalar event `g(y) = 0`, detected once `t > armed_after`.
pub struct EventSpec<'a> {
    pub g: &'a dyn Fn(&[f64]) -> f64,
    pub admits: &'a dyn Fn(&[f64]) -> bool,
    pub armed_after: f64,
    /// Localization stops once `|g| <= tol`.
    pub tol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stop {
    Event,
    End,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub t: f64,
    pub y: Vec<f64>,
    pub stop: Stop,
    pub steps: usize,
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
// dense output (Hairer & Wanner, dopri5 contd5)
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

struct Stepper<F> {
    rhs: F,
    dim: usize,
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
}

/// Continuous extension over one accepted step.
pub struct Dense {
    t0: f64,
    h: f64,
    r: [Vec<f64>; 5],
}

impl Dense {
    pub fn eval(&self, t: f64, out: &mut [f64]) {
        let th = (t - self.t0) / self.h;
        let th1 = 1.0 - th;
        for i in 0..out.len() {
            out[i] = self.r[0][i]
                + th * (self.r[1][i]
                    + th1 * (self.r[2][i] + th * (self.r[3][i] + th1 * self.r[4][i])));
        }
    }
}

impl<F> Stepper<F>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    fn new(rhs: F, dim: usize) -> Self {
        Self {
            rhs,
            dim,
            k: std::array::from_fn(|_| vec![0.0; dim]),
            tmp: vec![0.0; dim],
        }
    }

    /// One step from `(t, y)` with `k[0] = f(t, y)` already filled. Writes the
    /// fifth-order solution into `out` and returns the scaled error norm.
    fn step(&mut self, t: f64, y: &[f64], h: f64, tol: &Tolerances, out: &mut [f64]) -> Result<f64> {
        let n = self.dim;
        let [k1, k2, k3, k4, k5, k6, k7] = &mut self.k;
        let tmp = &mut self.tmp;
        for i in 0..n {
            tmp[i] = y[i] + h * A21 * k1[i];
        }
        (self.rhs)(t + C2 * h, tmp, k2)?;
        for i in 0..n {
            tmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        (self.rhs)(t + C3 * h, tmp, k3)?;
        for i in 0..n {
            tmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        (self.rhs)(t + C4 * h, tmp, k4)?;
        for i in 0..n {
            tmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        (self.rhs)(t + C5 * h, tmp, k5)?;
        for i in 0..n {
            tmp[i] = y[i]
                + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        (self.rhs)(t + h, tmp, k6)?;
        for i in 0..n {
            out[i] = y[i]
                + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        (self.rhs)(t + h, out, k7)?;
        let mut err = 0.0;
        for i in 0..n {
            let e = h
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sc = tol.atol + tol.rtol * y[i].abs().max(out[i].abs());
            err += (e / sc) * (e / sc);
        }
        Ok((err / n as f64).sqrt())
    }

    fn dense(&self, t: f64, y: &[f64], y1: &[f64], h: f64) -> Dense {
        let n = self.dim;
        let [k1, _, k3, k4, k5, k6, k7] = &self.k;
        let mut r: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; n]);
        for i in 0..n {
            let ydiff = y1[i] - y[i];
            let bspl = h * k1[i] - ydiff;
            r[0][i] = y[i];
            r[1][i] = ydiff;
            r[2][i] = bspl;
            r[3][i] = ydiff - h * k7[i] - bspl;
            r[4][i] = h
                * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]);
        }
        Dense { t0: t, h, r }
    }

    fn initial_step(&mut self, t: f64, y: &[f64], t1: f64, tol: &Tolerances) -> Result<f64> {
        let n = self.dim;
        let span = (t1 - t).abs();
        let sc = |i: usize| tol.atol + tol.rtol * y[i].abs();
        let d0 = (y.iter().enumerate().map(|(i, v)| (v / sc(i)).powi(2)).sum::<f64>() / n as f64).sqrt();
        let d1 = (self.k[0].iter().enumerate().map(|(i, v)| (v / sc(i)).powi(2)).sum::<f64>()
            / n as f64)
            .sqrt();
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        let h0 = h0.min(span);
        for i in 0..n {
            self.tmp[i] = y[i] + h0 * self.k[0][i];
        }
        let mut f1 = vec![0.0; n];
        (self.rhs)(t + h0, &self.tmp, &mut f1)?;
        let d2 = (f1
            .iter()
            .zip(&self.k[0])
            .enumerate()
            .map(|(i, (a, b))| ((a - b) / sc(i)).powi(2))
            .sum::<f64>()
            / n as f64)
            .sqrt()
            / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(0.2)
        };
        Ok((100.0 * h0).min(h1).min(span))
    }
}

/// Integrates `y' = rhs(t, y)` from `t0` to `t1 > t0`, stopping early at the
/// first admitted zero of the event function.
///
/// `observe` is called with the initial point and every accepted step end
/// (not with the event point; that one is returned). If `sample_every` is
/// set, dense-output points on that grid are observed as well.
pub fn integrate<F>(
    rhs: F,
    t0: f64,
    y0: &[f64],
    t1: f64,
    tol: &Tolerances,
    event: Option<&EventSpec<'_>>,
    sample_every: Option<f64>,
    observe: &mut dyn FnMut(f64, &[f64]),
) -> Result<Outcome>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let n = y0.len();
    observe(t0, y0);
    if !(t1 > t0) {
        return Ok(Outcome {
            t: t0,
            y: y0.to_vec(),
            stop: Stop::End,
            steps: 0,
        });
    }
    let mut st = Stepper::new(rhs, n);
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut y1 = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    (st.rhs)(t, &y, &mut st.k[0])?;
    let mut h = st.initial_step(t, &y, t1, tol)?;
    let mut steps = 0usize;
    let mut next_sample = sample_every.map(|dt| t0 + dt);
    let mut rejected_last = false;

    loop {
        let remaining = t1 - t;
        let last = h >= remaining * (1.0 - 1e-12);
        let hstep = if last { remaining } else { h };
        if hstep <= 1e-14 * t.abs().max(1.0) {
            return Err(Error::StepFailure { t });
        }
        let err = st.step(t, &y, hstep, tol, &mut y1)?;
        if !err.is_finite() {
            h = hstep * 0.2;
            rejected_last = true;
            continue;
        }
        if err > 1.0 {
            h = hstep * (0.9 * err.powf(-0.2)).max(0.2);
            rejected_last = true;
            continue;
        }
        steps += 1;
        let t_new = if last { t1 } else { t + hstep };
        let dense = st.dense(t, &y, &y1, hstep);

        if let Some(ev) = event {
            if let Some((te, ye)) = locate_event(&mut st, ev, t, &y, t_new, &y1, &dense, tol, &mut scratch)? {
                if let (Some(dt), Some(ns)) = (sample_every, next_sample.as_mut()) {
                    while *ns < te {
                        dense.eval(*ns, &mut scratch);
                        observe(*ns, &scratch);
                        *ns += dt;
                    }
                }
                return Ok(Outcome {
                    t: te,
                    y: ye,
                    stop: Stop::Event,
                    steps,
                });
            }
        }

        if let (Some(dt), Some(ns)) = (sample_every, next_sample.as_mut()) {
            while *ns < t_new - 1e-12 * dt {
                dense.eval(*ns, &mut scratch);
                observe(*ns, &scratch);
                *ns += dt;
            }
        }
        observe(t_new, &y1);
        t = t_new;
        std::mem::swap(&mut y, &mut y1);
        st.k.swap(0, 6);
        if last {
            return Ok(Outcome {
                t,
                y,
                stop: Stop::End,
                steps,
            });
        }
        let mut fac = 0.9 * err.max(1e-10).powf(-0.2);
        fac = fac.clamp(0.2, 10.0);
        if rejected_last {
            fac = fac.min(1.0);
        }
        rejected_last = false;
        h = hstep * fac;
    }
}

/// Looks for an admitted sign change of `g` inside `[t, t_new]` and refines it
/// on the exact single-step map from `(t, y)`.
#[allow(clippy::too_many_arguments)]
fn locate_event<F>(
    st: &mut Stepper<F>,
    ev: &EventSpec<'_>,
    t: f64,
    y: &[f64],
    t_new: f64,
    y_new: &[f64],
    dense: &Dense,
    tol: &Tolerances,
    scratch: &mut [f64],
) -> Result<Option<(f64, Vec<f64>)>>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    if t_new <= ev.armed_after {
        return Ok(None);
    }
    let left = t.max(ev.armed_after);
    const SUB: usize = 4;
    let mut ta = left;
    let mut ga = if left == t {
        (ev.g)(y)
    } else {
        dense.eval(left, scratch);
        (ev.g)(scratch)
    };
    for s in 1..=SUB {
        let tb = if s == SUB {
            t_new
        } else {
            left + (t_new - left) * s as f64 / SUB as f64
        };
        let gb = if s == SUB {
            (ev.g)(y_new)
        } else {
            dense.eval(tb, scratch);
            (ev.g)(scratch)
        };
        let crosses = (ga > 0.0 && gb <= 0.0) || (ga < 0.0 && gb >= 0.0);
        if crosses {
            if let Some(found) = refine_event(st, ev, t, y, ta, tb, dense, tol)? {
                if (ev.admits)(&found.1) {
                    return Ok(Some(found));
                }
            }
        }
        ta = tb;
        ga = gb;
    }
    Ok(None)
}

#[allow(clippy::too_many_arguments)]
fn refine_event<F>(
    st: &mut Stepper<F>,
    ev: &EventSpec<'_>,
    t: f64,
    y: &[f64],
    ta: f64,
    tb: f64,
    dense: &Dense,
    tol: &Tolerances,
) -> Result<Option<(f64, Vec<f64>)>>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let n = y.len();
    let saved = st.k.clone();
    let k0 = saved[0].clone();
    let mut out = vec![0.0; n];
    // Exact one-step map from the step start; k[0] is restored after each use
    // because the stepper overwrites the stage buffers.
    let one_step = |st: &mut Stepper<F>, s: f64, out: &mut [f64]| -> Result<f64> {
        st.k[0].copy_from_slice(&k0);
        if s == t {
            out.copy_from_slice(y);
        } else {
            st.step(t, y, s - t, tol, out)?;
        }
        Ok((ev.g)(out))
    };
    let fa = one_step(st, ta, &mut out)?;
    let fb = one_step(st, tb, &mut out)?;
    let root = if fa * fb <= 0.0 {
        let mut err = None;
        let r = brent(
            |s| match one_step(st, s, &mut out) {
                Ok(v) => v,
                Err(e) => {
                    err = Some(e);
                    0.0
                }
            },
            ta,
            tb,
            fa,
            fb,
            ev.tol,
        );
        if let Some(e) = err {
            return Err(e);
        }
        r
    } else {
        // The step map and its interpolant disagree on the bracket at the
        // tolerance level; fall back to the interpolant.
        let mut buf = vec![0.0; n];
        let ga = {
            dense.eval(ta, &mut buf);
            (ev.g)(&buf)
        };
        let gb = {
            dense.eval(tb, &mut buf);
            (ev.g)(&buf)
        };
        if ga * gb > 0.0 {
            st.k = saved;
            return Ok(None);
        }
        brent(
            |s| {
                dense.eval(s, &mut buf);
                (ev.g)(&buf)
            },
            ta,
            tb,
            ga,
            gb,
            ev.tol,
        )
    };
    one_step(st, root, &mut out)?;
    st.k = saved;
    Ok(Some((root, out)))
}

/// Brent's bracketed root finder. Stops when `|f| <= ftol` or the bracket has
/// collapsed to rounding level.
pub fn brent<G: FnMut(f64) -> f64>(mut f: G, a: f64, b: f64, fa: f64, fb: f64, ftol: f64) -> f64 {
    let (mut a, mut b, mut fa, mut fb) = (a, b, fa, fb);
    if fa == 0.0 {
        return a;
    }
    if fb == 0.0 {
        return b;
    }
    let mut c = a;
    let mut fc = fa;
    let mut d = b - a;
    let mut e = d;
    for _ in 0..200 {
        if fb * fc > 0.0 {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol1 = 2.0 * f64::EPSILON * b.abs() + 0.5e-16;
        let xm = 0.5 * (c - b);
        if fb.abs() <= ftol || xm.abs() <= tol1 {
            return b;
        }
        if e.abs() >= tol1 && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * xm * s;
                q = 1.0 - s;
            } else {
                let qq = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * xm * qq * (qq - r) - (b - a) * (r - 1.0));
                q = (qq - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            }
            p = p.abs();
            if 2.0 * p < (3.0 * xm * q - (tol1 * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = xm;
                e = d;
            }
        } else {
            d = xm;
            e = d;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol1 { d } else { tol1.copysign(xm) };
        fb = f(b);
    }
    b
}
