//! Small dense linear-algebra helpers shared by the frame and jump code.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Singular values below `RANK_CUTOFF * σ_max` count as zero.
pub const RANK_CUTOFF: f64 = 1e-9;

/// Thin SVD split into the parts above and below the rank cutoff.
#[derive(Debug, Clone)]
pub struct RankedSvd {
    pub rank: usize,
    pub singular_values: Vec<f64>,
    /// Orthonormal basis of the column space (one column per retained value).
    pub range: Vec<DVector<f64>>,
    /// Orthonormal basis of the row space.
    pub corange: Vec<DVector<f64>>,
    retained: Vec<f64>,
}

impl RankedSvd {
    pub fn new(a: &DMatrix<f64>) -> Self {
        let svd = a.clone().svd(true, true);
        let u = svd.u.expect("u requested");
        let v_t = svd.v_t.expect("v_t requested");
        let sv: Vec<f64> = svd.singular_values.iter().copied().collect();
        let smax = sv.iter().copied().fold(0.0_f64, f64::max);

        // Keep a descending order so the bases do not depend on LAPACK-style
        // ordering conventions.
        let mut order: Vec<usize> = (0..sv.len()).collect();
        order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]).then(i.cmp(&j)));

        let mut range = Vec::new();
        let mut corange = Vec::new();
        let mut retained = Vec::new();
        for &i in &order {
            if smax > 0.0 && sv[i] > RANK_CUTOFF * smax {
                range.push(u.column(i).into_owned());
                corange.push(v_t.row(i).transpose());
                retained.push(sv[i]);
            }
        }
        Self {
            rank: retained.len(),
            singular_values: order.iter().map(|&i| sv[i]).collect(),
            range,
            corange,
            retained,
        }
    }

    /// Moore–Penrose pseudo-inverse `V Σ⁺ Uᵀ` built from the retained triplets.
    pub fn pseudo_inverse(&self, rows: usize, cols: usize) -> DMatrix<f64> {
        let mut pinv = DMatrix::zeros(cols, rows);
        for ((u, v), s) in self.range.iter().zip(&self.corange).zip(&self.retained) {
            pinv += (v * u.transpose()) / *s;
        }
        pinv
    }
}

/// Numerical rank with the crate-wide relative cutoff.
pub fn numerical_rank(a: &DMatrix<f64>) -> usize {
    RankedSvd::new(a).rank
}

/// Moore–Penrose pseudo-inverse that insists on a declared rank.
pub fn pseudo_inverse_with_rank(a: &DMatrix<f64>, rank: usize) -> Result<DMatrix<f64>> {
    let svd = RankedSvd::new(a);
    if svd.rank != rank {
        return Err(Error::RankMismatch {
            declared: rank,
            found: svd.rank,
        });
    }
    Ok(svd.pseudo_inverse(a.nrows(), a.ncols()))
}

/// Completes an orthonormal set in `ℝ^dim` to a full orthonormal basis and
/// returns only the new vectors.
///
/// Candidates are the standard basis vectors; at each round the one with the
/// largest residual after projection is taken (lowest index on ties), so the
/// result is deterministic and axis-aligned whenever the input allows it.
pub fn orthonormal_complement(basis: &[DVector<f64>], dim: usize) -> Vec<DVector<f64>> {
    let mut current: Vec<DVector<f64>> = basis.to_vec();
    let mut added = Vec::new();
    let mut used = vec![false; dim];
    while current.len() < dim {
        let mut best: Option<(usize, DVector<f64>, f64)> = None;
        for i in (0..dim).filter(|&i| !used[i]) {
            let mut r = DVector::from_fn(dim, |k, _| if k == i { 1.0 } else { 0.0 });
            // two passes of classical Gram–Schmidt
            for _ in 0..2 {
                for q in &current {
                    let c = q.dot(&r);
                    r.axpy(-c, q, 1.0);
                }
            }
            let n = r.norm();
            if best.as_ref().is_none_or(|(_, _, bn)| n > *bn + 1e-12) {
                best = Some((i, r, n));
            }
        }
        let Some((i, r, n)) = best else { break };
        used[i] = true;
        if n < 1e-8 {
            continue;
        }
        let q = r / n;
        current.push(q.clone());
        added.push(q);
    }
    added
}

/// Stacks column vectors into a `rows × vecs.len()` matrix.
pub fn columns(rows: usize, vecs: &[DVector<f64>]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, vecs.len());
    for (j, v) in vecs.iter().enumerate() {
        m.set_column(j, v);
    }
    m
}

/// Central-difference Jacobian of `f: ℝⁿ → ℝᵏ` with per-coordinate step
/// `rel * (1 + |x_i|)`.
pub fn central_jacobian<F>(f: F, x: &DVector<f64>, rel: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let f0 = f(x);
    let mut jac = DMatrix::zeros(f0.len(), x.len());
    for i in 0..x.len() {
        let h = rel * (1.0 + x[i].abs());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        let col = (f(&xp) - f(&xm)) / (2.0 * h);
        jac.set_column(i, &col);
    }
    jac
}

/// Central-difference gradient of a scalar function.
pub fn central_gradient<F>(f: F, x: &DVector<f64>, rel: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    DVector::from_fn(x.len(), |i, _| {
        let h = rel * (1.0 + x[i].abs());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn complement_of_first_axis_is_remaining_axes() {
        let e0 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let c = orthonormal_complement(&[e0], 3);
        assert_eq!(c.len(), 2);
        assert_eq!(c[0], DVector::from_vec(vec![0.0, 1.0, 0.0]));
        assert_eq!(c[1], DVector::from_vec(vec![0.0, 0.0, 1.0]));
    }

    #[test]
    fn complement_of_tilted_vector_is_orthonormal() {
        let v = DVector::from_vec(vec![1.0, 2.0, -0.5, 0.3]).normalize();
        let c = orthonormal_complement(std::slice::from_ref(&v), 4);
        assert_eq!(c.len(), 3);
        for (i, a) in c.iter().enumerate() {
            assert!(a.dot(&v).abs() < 1e-14);
            assert!((a.norm() - 1.0).abs() < 1e-14);
            for b in &c[i + 1..] {
                assert!(a.dot(b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn pinv_of_rank_one_reset_jacobian() {
        let j = dmatrix![0.0, 0.0; -1.0, 0.0; 0.0, 0.0];
        let p = pseudo_inverse_with_rank(&j, 1).unwrap();
        assert_eq!(p.shape(), (2, 3));
        let expected = dmatrix![0.0, -1.0, 0.0; 0.0, 0.0, 0.0];
        assert!((p - expected).amax() < 1e-15);
    }

    #[test]
    fn declared_rank_is_checked() {
        let j = dmatrix![0.0, 0.0; -1.0, 0.0; 0.0, 0.0];
        assert!(matches!(
            pseudo_inverse_with_rank(&j, 0),
            Err(Error::RankMismatch { declared: 0, found: 1 })
        ));
        assert_eq!(numerical_rank(&DMatrix::zeros(3, 2)), 0);
    }

    #[test]
    fn tiny_singular_values_are_cut() {
        let j = dmatrix![1.0, 0.0; 0.0, 1e-12; 0.0, 0.0];
        assert_eq!(numerical_rank(&j), 1);
    }
}
