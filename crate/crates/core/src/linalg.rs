//! Dense linear algebra on top of `nalgebra`: thin SVD with sorted singular
//! values, Moore-Penrose pseudo-inverse, range projectors and spectral norms.
//!
//! Rank decisions are always relative: a singular value (or eigenvalue) counts
//! as zero when it is below `rank_tol * largest`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative numerical-rank threshold used when callers have no better idea.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

const SVD_MAX_ITERS: usize = 10_000;
const SVD_EPS: f64 = 5.0 * f64::EPSILON;

/// Thin singular value decomposition `A = U diag(S) V^T`, with `S` sorted
/// in nonincreasing order.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub s: Vector,
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for (j, mut col) in us.column_iter_mut().enumerate() {
            col *= self.s[j];
        }
        us * self.v.transpose()
    }

    /// Number of singular values strictly above `rank_tol * s_max`.
    pub fn rank(&self, rank_tol: f64) -> usize {
        numerical_rank(self.s.as_slice(), rank_tol)
    }
}

pub fn numerical_rank(values: &[f64], rank_tol: f64) -> usize {
    let max = values.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    values.iter().filter(|&&s| s > rank_tol * max).count()
}

pub fn max_abs(a: &Matrix) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn ensure_finite(a: &Matrix, what: &'static str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn svd_failure(a: &Matrix) -> Error {
    Error::SvdNoConvergence {
        rows: a.nrows(),
        cols: a.ncols(),
        max_abs: max_abs(a),
        frobenius: a.norm(),
    }
}

pub fn svd(a: &Matrix) -> Result<Svd> {
    ensure_finite(a, "svd input")?;
    let (m, n) = a.shape();
    let k = m.min(n);
    if k == 0 {
        return Ok(Svd {
            u: Matrix::zeros(m, 0),
            s: Vector::zeros(0),
            v: Matrix::zeros(n, 0),
        });
    }
    // nalgebra's bidiagonal iteration occasionally returns inconsistent
    // singular vectors on rank-deficient input (the factors no longer
    // reconstruct `a`); such results are caught here and recomputed with
    // one-sided Jacobi, which is slower but unconditionally stable.
    if let Some(d) = raw_svd(a.clone()) {
        if consistent(&d, a) {
            return Ok(d);
        }
    }
    let d = jacobi_svd(a);
    if consistent(&d, a) {
        Ok(d)
    } else {
        Err(svd_failure(a))
    }
}

fn consistent(d: &Svd, a: &Matrix) -> bool {
    let scale = a.norm().max(f64::MIN_POSITIVE);
    (d.reconstruct() - a).norm() <= 1e-10 * scale && orthonormal(&d.u) && orthonormal(&d.v)
}

/// One-sided (Hestenes) Jacobi SVD.
fn jacobi_svd(a: &Matrix) -> Svd {
    if a.nrows() < a.ncols() {
        let d = jacobi_svd(&a.transpose());
        return Svd {
            u: d.v,
            s: d.s,
            v: d.u,
        };
    }
    let (m, n) = a.shape();
    let mut w = a.clone();
    let mut v = Matrix::identity(n, n);
    for _ in 0..100 {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let alpha = w.column(i).norm_squared();
                let beta = w.column(j).norm_squared();
                let gamma = w.column(i).dot(&w.column(j));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for mat in [&mut w, &mut v] {
                    for r in 0..mat.nrows() {
                        let (x, y) = (mat[(r, i)], mat[(r, j)]);
                        mat[(r, i)] = c * x - s * y;
                        mat[(r, j)] = s * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n).map(|j| w.column(j).norm()).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let smax = norms.iter().cloned().fold(0.0, f64::max);
    let mut u = Matrix::zeros(m, n);
    let mut sv = Matrix::zeros(n, n);
    let mut s = Vector::zeros(n);
    for (dst, &src) in order.iter().enumerate() {
        s[dst] = norms[src];
        sv.set_column(dst, &v.column(src));
        if norms[src] > (m as f64) * f64::EPSILON * smax {
            u.set_column(dst, &(w.column(src) / norms[src]));
        } else {
            // negligible column: complete the basis instead of normalizing noise
            let mut best = Vector::zeros(m);
            for e in 0..m {
                let mut cand = Vector::zeros(m);
                cand[e] = 1.0;
                for k in 0..dst {
                    let uk = u.column(k).into_owned();
                    cand -= &uk * uk.dot(&cand);
                }
                if cand.norm() > best.norm() {
                    best = cand;
                }
            }
            u.set_column(dst, &(&best / best.norm()));
        }
    }
    Svd { u, s, v: sv }
}

fn orthonormal(q: &Matrix) -> bool {
    max_abs(&(q.tr_mul(q) - Matrix::identity(q.ncols(), q.ncols()))) <= 1e-10
}

fn raw_svd(a: Matrix) -> Option<Svd> {
    let (m, n) = a.shape();
    let k = m.min(n);
    let dec = a.try_svd(true, true, SVD_EPS, SVD_MAX_ITERS)?;
    let (u, v_t) = (dec.u?, dec.v_t?);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| dec.singular_values[j].total_cmp(&dec.singular_values[i]));

    let mut su = Matrix::zeros(m, k);
    let mut sv = Matrix::zeros(n, k);
    let mut ss = Vector::zeros(k);
    for (dst, &src) in order.iter().enumerate() {
        su.set_column(dst, &u.column(src));
        sv.set_column(dst, &v_t.row(src).transpose());
        ss[dst] = dec.singular_values[src].max(0.0);
    }
    Some(Svd { u: su, s: ss, v: sv })
}

/// Singular values only, nonincreasing.
pub fn singular_values(a: &Matrix) -> Result<Vector> {
    ensure_finite(a, "svd input")?;
    if a.nrows().min(a.ncols()) == 0 {
        return Ok(Vector::zeros(0));
    }
    let dec = a
        .clone()
        .try_svd(false, false, SVD_EPS, SVD_MAX_ITERS)
        .ok_or_else(|| svd_failure(a))?;
    let mut s: Vec<f64> = dec.singular_values.iter().map(|v| v.max(0.0)).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(Vector::from_vec(s))
}

/// Largest singular value.
pub fn operator_norm(a: &Matrix) -> Result<f64> {
    Ok(singular_values(a)?.iter().cloned().fold(0.0, f64::max))
}

/// Moore-Penrose pseudo-inverse; singular values below `rank_tol * s_max`
/// are treated as zero.
pub fn pseudo_inverse(a: &Matrix, rank_tol: f64) -> Result<Matrix> {
    if !(rank_tol > 0.0) {
        return Err(Error::config("rank_tol must be positive"));
    }
    let d = svd(a)?;
    let r = d.rank(rank_tol);
    let mut vs = d.v.columns(0, r).into_owned();
    for j in 0..r {
        let inv = 1.0 / d.s[j];
        vs.column_mut(j).scale_mut(inv);
    }
    Ok(vs * d.u.columns(0, r).transpose())
}

/// Orthogonal projector onto `Im A`.
pub fn range_projector(a: &Matrix, rank_tol: f64) -> Result<Matrix> {
    let d = svd(a)?;
    let r = d.rank(rank_tol);
    let u1 = d.u.columns(0, r);
    Ok(&u1 * u1.transpose())
}

/// Range basis and nonzero spectrum of a symmetric positive semi-definite
/// matrix: `A = B diag(values) B^T` with orthonormal columns in `B`.
#[derive(Debug, Clone)]
pub struct PsdRange {
    pub basis: Matrix,
    pub values: Vector,
}

impl PsdRange {
    pub fn rank(&self) -> usize {
        self.values.len()
    }

    pub fn project(&self, x: &Vector) -> Vector {
        &self.basis * (self.basis.tr_mul(x))
    }
}

pub fn psd_range(a: &Matrix, rank_tol: f64) -> Result<PsdRange> {
    ensure_finite(a, "psd input")?;
    if !a.is_square() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            found: a.ncols(),
        });
    }
    let n = a.nrows();
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym
        .clone()
        .try_symmetric_eigen(SVD_EPS, SVD_MAX_ITERS)
        .ok_or(Error::EigenNoConvergence { dim: n })?;
    let (vectors, values) = if (eig.recompose() - &sym).norm() <= 1e-10 * sym.norm().max(f64::MIN_POSITIVE) {
        (eig.eigenvectors, eig.eigenvalues)
    } else {
        // for a PSD matrix the SVD is an eigendecomposition
        let d = svd(&sym)?;
        (d.u, d.s)
    };
    let max = values.iter().cloned().fold(0.0, f64::max);
    let mut keep: Vec<usize> = (0..n).filter(|&i| max > 0.0 && values[i] > rank_tol * max).collect();
    keep.sort_by(|&i, &j| values[j].total_cmp(&values[i]));
    let mut basis = Matrix::zeros(n, keep.len());
    let mut kept = Vector::zeros(keep.len());
    for (dst, &src) in keep.iter().enumerate() {
        basis.set_column(dst, &vectors.column(src));
        kept[dst] = values[src];
    }
    Ok(PsdRange { basis, values: kept })
}

/// Symmetric square root of a PSD matrix (negative eigenvalues clipped to 0).
pub fn psd_sqrt(a: &Matrix) -> Result<Matrix> {
    let r = psd_range(a, DEFAULT_RANK_TOL)?;
    let mut scaled = r.basis.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= r.values[j].sqrt();
    }
    Ok(scaled * r.basis.transpose())
}
