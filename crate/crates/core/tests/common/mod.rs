//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use stratatrack::linalg::{self, Matrix, Vector};

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn gaussian_vector(rng: &mut ChaCha8Rng, len: usize) -> Vector {
    Vector::from_fn(len, |_, _| rng.sample(StandardNormal))
}

/// Random PSD matrix of the given rank, `A A^T / rank`.
pub fn random_psd(rng: &mut ChaCha8Rng, p: usize, rank: usize) -> Matrix {
    let a = gaussian_matrix(rng, p, rank);
    &a * a.transpose() / rank as f64
}

struct Geometry {
    /// `C^+`
    pinv: Matrix,
    /// `I - P_{Im C}`: `eta ∈ Im C` iff `leak * eta = 0`
    leak: Matrix,
}

fn geometry(c: &Matrix) -> Geometry {
    let p = c.nrows();
    let r = linalg::psd_range(c, 1e-10).unwrap();
    let mut pinv = Matrix::zeros(p, p);
    for j in 0..r.rank() {
        let b = r.basis.column(j);
        pinv += (b * (1.0 / r.values[j])) * b.transpose();
    }
    let leak = Matrix::identity(p, p) - &r.basis * r.basis.transpose();
    Geometry { pinv, leak }
}

fn quad(q: &Matrix, eta: &Vector) -> f64 {
    eta.dot(&(q * eta))
}

/// Exact l1 certificate by enumeration of the active pattern of the off-
/// support coordinates (each is pinned at +1, at -1, or left free). For the
/// right pattern the equality-constrained minimizer is the solution, and the
/// objective is strictly convex on `Im C`, so the best feasible candidate is
/// the unique minimizer. Returns `None` when no pattern is feasible.
pub fn l1_certificate_oracle(w0: &Vector, c: &Matrix) -> Option<Vector> {
    let p = w0.len();
    let g = geometry(c);
    let off: Vec<usize> = (0..p).filter(|&i| w0[i] == 0.0).collect();
    let patterns = 3usize.pow(off.len() as u32);
    let mut best: Option<(f64, Vector)> = None;
    for code in 0..patterns {
        let mut fixed = Vector::zeros(p);
        for i in 0..p {
            if w0[i] != 0.0 {
                fixed[i] = w0[i].signum();
            }
        }
        let mut free = Vec::new();
        let mut rest = code;
        for &i in &off {
            match rest % 3 {
                0 => free.push(i),
                1 => fixed[i] = 1.0,
                _ => fixed[i] = -1.0,
            }
            rest /= 3;
        }
        let k = free.len();
        let m = p; // rows of the range constraint
        // KKT system of min (f + E x)^T Q (f + E x) s.t. L (f + E x) = 0
        let mut e = Matrix::zeros(p, k);
        for (j, &i) in free.iter().enumerate() {
            e[(i, j)] = 1.0;
        }
        let qe = &g.pinv * &e;
        let le = &g.leak * &e;
        let mut kkt = Matrix::zeros(k + m, k + m);
        kkt.view_mut((0, 0), (k, k)).copy_from(&(e.transpose() * &qe * 2.0));
        kkt.view_mut((0, k), (k, m)).copy_from(&le.transpose());
        kkt.view_mut((k, 0), (m, k)).copy_from(&le);
        let mut rhs = Vector::zeros(k + m);
        rhs.rows_mut(0, k).copy_from(&(e.transpose() * (&g.pinv * &fixed) * -2.0));
        rhs.rows_mut(k, m).copy_from(&(&g.leak * &fixed * -1.0));
        let sol = linalg::pseudo_inverse(&kkt, 1e-12).unwrap() * rhs;
        let eta = &fixed + &e * sol.rows(0, k);
        if (&g.leak * &eta).norm() > 1e-9 || eta.iter().any(|v| v.abs() > 1.0 + 1e-12) {
            continue;
        }
        let val = quad(&g.pinv, &eta);
        if best.as_ref().map_or(true, |(b, _)| val < *b) {
            best = Some((val, eta));
        }
    }
    best.map(|(_, eta)| eta)
}

/// Local grid search at resolution `h` along feasible directions (off-support
/// coordinates, staying in `Im C` and in the box). Returns the largest
/// objective improvement over `eta` found on the grid.
pub fn grid_improvement(eta: &Vector, w0: &Vector, c: &Matrix, h: f64) -> f64 {
    let p = w0.len();
    let g = geometry(c);
    // directions d with d_S = 0 and leak d = 0
    let support: Vec<usize> = (0..p).filter(|&i| w0[i] != 0.0).collect();
    let mut cons = Matrix::zeros(p + support.len(), p);
    cons.view_mut((0, 0), (p, p)).copy_from(&g.leak);
    for (r, &i) in support.iter().enumerate() {
        cons[(p + r, i)] = 1.0;
    }
    let d = linalg::svd(&(cons.transpose() * &cons)).unwrap();
    let dirs: Vec<Vector> = (0..p)
        .filter(|&j| d.s[j] <= 1e-10 * d.s[0].max(1.0))
        .map(|j| d.u.column(j).into_owned())
        .collect();
    let base = quad(&g.pinv, eta);
    let mut best = 0.0f64;
    let k = dirs.len();
    if k == 0 {
        return 0.0;
    }
    let full = k <= 5;
    let count = if full { 3usize.pow(k as u32) } else { 2 * k + 1 };
    for code in 0..count {
        let mut step = Vector::zeros(p);
        if full {
            let mut rest = code;
            for dir in &dirs {
                let c = (rest % 3) as f64 - 1.0;
                rest /= 3;
                step += dir * c;
            }
        } else if code > 0 {
            let j = (code - 1) / 2;
            let sign = if code % 2 == 0 { -1.0 } else { 1.0 };
            step += &dirs[j] * sign;
        }
        let cand = eta + step * h;
        if cand.iter().any(|v| v.abs() > 1.0) {
            continue;
        }
        best = best.max(base - quad(&g.pinv, &cand));
    }
    best
}
