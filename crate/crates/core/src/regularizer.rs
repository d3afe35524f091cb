//! The two mirror-stratifiable regularizers: the l1 norm and the nuclear norm.
//!
//! Weights are always flat vectors. For the nuclear norm a vector of length
//! `rows * cols` is read as a row-major `rows x cols` matrix, so solvers and
//! certificate code never need to know which regularizer they run with.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::strata::{Side, Stratum, StratumValue};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Regularizer {
    L1 { p: usize },
    Nuclear { rows: usize, cols: usize },
}

/// Thresholds used to read strata off floating-point vectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StratumTolerance {
    /// A coordinate / singular value is nonzero when its magnitude exceeds this.
    pub support: f64,
    /// A dual coordinate / singular value is active when it is at least `1 - active`.
    pub active: f64,
}

impl Default for StratumTolerance {
    fn default() -> Self {
        StratumTolerance {
            support: 1e-10,
            active: 1e-6,
        }
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

impl Regularizer {
    pub fn l1(p: usize) -> Self {
        Regularizer::L1 { p }
    }

    pub fn nuclear(rows: usize, cols: usize) -> Self {
        Regularizer::Nuclear { rows, cols }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Regularizer::L1 { p } if p >= 1 => Ok(()),
            Regularizer::Nuclear { rows, cols } if rows >= 1 && cols >= 1 => Ok(()),
            _ => Err(Error::config("regularizer dimensions must be positive")),
        }
    }

    /// Length of the flat weight vector.
    pub fn dim(&self) -> usize {
        match *self {
            Regularizer::L1 { p } => p,
            Regularizer::Nuclear { rows, cols } => rows * cols,
        }
    }

    /// Largest possible `R0`: `p` for l1, `min(rows, cols)` for the nuclear norm.
    pub fn complexity_bound(&self) -> usize {
        match *self {
            Regularizer::L1 { p } => p,
            Regularizer::Nuclear { rows, cols } => rows.min(cols),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Regularizer::L1 { .. } => "l1",
            Regularizer::Nuclear { .. } => "nuclear",
        }
    }

    fn check(&self, w: &Vector) -> Result<()> {
        Error::check_dim(self.dim(), w.len())
    }

    /// Row-major reshape of a flat vector (nuclear norm only).
    pub fn as_matrix(&self, w: &Vector) -> Result<Matrix> {
        self.check(w)?;
        match *self {
            Regularizer::Nuclear { rows, cols } => Ok(Matrix::from_row_slice(rows, cols, w.as_slice())),
            Regularizer::L1 { p } => Ok(Matrix::from_column_slice(p, 1, w.as_slice())),
        }
    }

    /// Inverse of [`Regularizer::as_matrix`].
    pub fn flatten(&self, m: &Matrix) -> Vector {
        match self {
            Regularizer::Nuclear { .. } => Vector::from_iterator(m.len(), m.transpose().iter().copied()),
            Regularizer::L1 { .. } => Vector::from_column_slice(m.as_slice()),
        }
    }

    pub fn value(&self, w: &Vector) -> Result<f64> {
        self.check(w)?;
        match self {
            Regularizer::L1 { .. } => Ok(w.iter().map(|v| v.abs()).sum()),
            Regularizer::Nuclear { .. } => Ok(linalg::singular_values(&self.as_matrix(w)?)?.sum()),
        }
    }

    /// Dual norm: `max |eta_i|` or the spectral norm.
    pub fn dual_norm(&self, eta: &Vector) -> Result<f64> {
        self.check(eta)?;
        match self {
            Regularizer::L1 { .. } => Ok(eta.amax()),
            Regularizer::Nuclear { .. } => linalg::operator_norm(&self.as_matrix(eta)?),
        }
    }

    /// `argmin_z t R(z) + 0.5 |z - w|^2`.
    pub fn prox(&self, t: f64, w: &Vector) -> Result<Vector> {
        self.check(w)?;
        if !(t > 0.0) {
            return Err(Error::config(format!("prox parameter must be positive, got {t}")));
        }
        match self {
            Regularizer::L1 { .. } => Ok(w.map(|v| soft_threshold(v, t))),
            Regularizer::Nuclear { rows, cols } => {
                let d = linalg::svd(&self.as_matrix(w)?)?;
                let keep = d.s.iter().take_while(|&&s| s > t).count();
                let mut out = Matrix::zeros(*rows, *cols);
                for j in 0..keep {
                    let shrunk = d.s[j] - t;
                    out += (d.u.column(j) * shrunk) * d.v.column(j).transpose();
                }
                Ok(self.flatten(&out))
            }
        }
    }

    /// Euclidean projection onto the dual-norm unit ball.
    pub fn project_dual_ball(&self, eta: &Vector) -> Result<Vector> {
        self.check(eta)?;
        match self {
            Regularizer::L1 { .. } => Ok(eta.map(|v| v.clamp(-1.0, 1.0))),
            Regularizer::Nuclear { .. } => {
                let m = self.as_matrix(eta)?;
                Ok(self.flatten(&clip_spectrum(&m)?))
            }
        }
    }

    pub fn subdifferential_at(&self, w: &Vector, tol: &StratumTolerance) -> Result<SubdiffDescriptor> {
        self.check(w)?;
        match *self {
            Regularizer::L1 { p } => {
                let mut fixed = Vec::new();
                let mut free = Vec::new();
                for (i, &v) in w.iter().enumerate() {
                    if v.abs() > tol.support {
                        fixed.push((i, v.signum()));
                    } else {
                        free.push(i);
                    }
                }
                Ok(SubdiffDescriptor::L1 { dim: p, fixed, free })
            }
            Regularizer::Nuclear { rows, cols } => {
                let d = linalg::svd(&self.as_matrix(w)?)?;
                let r = d.s.iter().filter(|&&s| s > tol.support).count();
                Ok(SubdiffDescriptor::Nuclear {
                    rows,
                    cols,
                    u1: d.u.columns(0, r).into_owned(),
                    v1: d.v.columns(0, r).into_owned(),
                })
            }
        }
    }

    /// Primal stratum `M_w`: support set or rank.
    pub fn stratum_of(&self, w: &Vector, tol: &StratumTolerance) -> Result<Stratum> {
        self.check(w)?;
        match self {
            Regularizer::L1 { .. } => Ok(Stratum::support(
                Side::Primal,
                w.iter()
                    .enumerate()
                    .filter(|(_, v)| v.abs() > tol.support)
                    .map(|(i, _)| i),
            )),
            Regularizer::Nuclear { .. } => {
                let s = linalg::singular_values(&self.as_matrix(w)?)?;
                Ok(Stratum::rank(
                    Side::Primal,
                    s.iter().filter(|&&v| v > tol.support).count(),
                ))
            }
        }
    }

    /// Dual stratum `M*_eta`: active set or number of unit singular values.
    pub fn dual_stratum_of(&self, eta: &Vector, tol: &StratumTolerance) -> Result<Stratum> {
        self.check(eta)?;
        let threshold = 1.0 - tol.active;
        match self {
            Regularizer::L1 { .. } => {
                let norm = eta.amax();
                if norm > 1.0 + tol.active {
                    return Err(Error::DualDomain { norm, tol: tol.active });
                }
                Ok(Stratum::support(
                    Side::Dual,
                    eta.iter()
                        .enumerate()
                        .filter(|(_, v)| v.abs() >= threshold)
                        .map(|(i, _)| i),
                ))
            }
            Regularizer::Nuclear { .. } => {
                let s = linalg::singular_values(&self.as_matrix(eta)?)?;
                let norm = s.iter().cloned().fold(0.0, f64::max);
                if norm > 1.0 + tol.active {
                    return Err(Error::DualDomain { norm, tol: tol.active });
                }
                Ok(Stratum::rank(
                    Side::Dual,
                    s.iter().filter(|&&v| v >= threshold).count(),
                ))
            }
        }
    }

    /// Checks that a descriptor has this regularizer's kind and is in range.
    pub fn validate_stratum(&self, m: &Stratum) -> Result<()> {
        match (self, &m.value) {
            (Regularizer::L1 { p }, StratumValue::Support(s)) => match s.iter().next_back() {
                Some(&i) if i >= *p => Err(Error::InvalidStratum(format!(
                    "index {i} out of range for dimension {p}"
                ))),
                _ => Ok(()),
            },
            (Regularizer::Nuclear { .. }, StratumValue::Rank(r)) => {
                if *r > self.complexity_bound() {
                    Err(Error::InvalidStratum(format!(
                        "rank {r} exceeds bound {}",
                        self.complexity_bound()
                    )))
                } else {
                    Ok(())
                }
            }
            _ => Err(Error::StratumMismatch(format!(
                "{m} does not belong to the {} regularizer",
                self.name()
            ))),
        }
    }

    /// `J_R`: primal stratum to dual stratum.
    pub fn mirror_map(&self, m: &Stratum) -> Result<Stratum> {
        self.validate_stratum(m)?;
        if !m.is_primal() {
            return Err(Error::StratumMismatch("mirror_map expects a primal stratum".into()));
        }
        Ok(m.with_side(Side::Dual))
    }

    /// `J_{R*}`: dual stratum to primal stratum.
    pub fn mirror_map_inverse(&self, m: &Stratum) -> Result<Stratum> {
        self.validate_stratum(m)?;
        if m.is_primal() {
            return Err(Error::StratumMismatch(
                "mirror_map_inverse expects a dual stratum".into(),
            ));
        }
        Ok(m.with_side(Side::Primal))
    }
}

fn clip_spectrum(m: &Matrix) -> Result<Matrix> {
    let d = linalg::svd(m)?;
    if d.s.iter().all(|&s| s <= 1.0) {
        return Ok(m.clone());
    }
    let mut out = Matrix::zeros(m.nrows(), m.ncols());
    for j in 0..d.s.len() {
        let s = d.s[j].min(1.0);
        if s > 0.0 {
            out += (d.u.column(j) * s) * d.v.column(j).transpose();
        }
    }
    Ok(out)
}

/// The subdifferential `dR(w)` as a convex set: an affine "fixed" part plus a
/// unit ball (l-infinity box or spectral ball) on the complementary subspace.
#[derive(Debug, Clone)]
pub enum SubdiffDescriptor {
    L1 {
        dim: usize,
        /// Coordinates on the support with their sign.
        fixed: Vec<(usize, f64)>,
        /// Coordinates off the support, constrained to `[-1, 1]`.
        free: Vec<usize>,
    },
    Nuclear {
        rows: usize,
        cols: usize,
        /// Orthonormal bases of the column and row spaces of `w`.
        u1: Matrix,
        v1: Matrix,
    },
}

impl SubdiffDescriptor {
    pub fn dim(&self) -> usize {
        match self {
            SubdiffDescriptor::L1 { dim, .. } => *dim,
            SubdiffDescriptor::Nuclear { rows, cols, .. } => rows * cols,
        }
    }

    fn as_matrix(&self, eta: &Vector) -> Matrix {
        match self {
            SubdiffDescriptor::Nuclear { rows, cols, .. } => Matrix::from_row_slice(*rows, *cols, eta.as_slice()),
            SubdiffDescriptor::L1 { dim, .. } => Matrix::from_column_slice(*dim, 1, eta.as_slice()),
        }
    }

    fn flatten(m: &Matrix) -> Vector {
        Vector::from_iterator(m.len(), m.transpose().iter().copied())
    }

    /// Rank of `w` (nuclear) or support size (l1).
    pub fn fixed_rank(&self) -> usize {
        match self {
            SubdiffDescriptor::L1 { fixed, .. } => fixed.len(),
            SubdiffDescriptor::Nuclear { u1, .. } => u1.ncols(),
        }
    }

    /// The affine part: `sign(w)` on the support, or `U1 V1^T`.
    pub fn fixed_part(&self) -> Vector {
        match self {
            SubdiffDescriptor::L1 { dim, fixed, .. } => {
                let mut out = Vector::zeros(*dim);
                for &(i, s) in fixed {
                    out[i] = s;
                }
                out
            }
            SubdiffDescriptor::Nuclear { u1, v1, .. } => Self::flatten(&(u1 * v1.transpose())),
        }
    }

    /// Component of `eta` in the subspace carrying the unit-ball constraint:
    /// the free coordinates, or `(I - U1 U1^T) H (I - V1 V1^T)`.
    pub fn complement(&self, eta: &Vector) -> Vector {
        match self {
            SubdiffDescriptor::L1 { dim, free, .. } => {
                let mut out = Vector::zeros(*dim);
                for &i in free {
                    out[i] = eta[i];
                }
                out
            }
            SubdiffDescriptor::Nuclear { u1, v1, .. } => {
                let h = self.as_matrix(eta);
                let left = &h - u1 * (u1.transpose() * &h);
                let both = &left - (&left * v1) * v1.transpose();
                Self::flatten(&both)
            }
        }
    }

    /// Dual norm of the complement component; `eta` is in the relative
    /// interior exactly when its fixed part matches and this is below 1.
    pub fn complement_norm(&self, eta: &Vector) -> Result<f64> {
        let c = self.complement(eta);
        match self {
            SubdiffDescriptor::L1 { .. } => Ok(c.amax()),
            SubdiffDescriptor::Nuclear { .. } => linalg::operator_norm(&self.as_matrix(&c)),
        }
    }

    /// Euclidean projection onto `dR(w)`.
    pub fn project(&self, eta: &Vector) -> Result<Vector> {
        Error::check_dim(self.dim(), eta.len())?;
        match self {
            SubdiffDescriptor::L1 { fixed, free, dim } => {
                let mut out = Vector::zeros(*dim);
                for &(i, s) in fixed {
                    out[i] = s;
                }
                for &i in free {
                    out[i] = eta[i].clamp(-1.0, 1.0);
                }
                Ok(out)
            }
            SubdiffDescriptor::Nuclear { .. } => {
                let c = self.as_matrix(&self.complement(eta));
                let clipped = Self::flatten(&clip_spectrum(&c)?);
                Ok(self.fixed_part() + clipped)
            }
        }
    }

    pub fn distance(&self, eta: &Vector) -> Result<f64> {
        Ok((eta - self.project(eta)?).norm())
    }

    pub fn contains(&self, eta: &Vector, tol: f64) -> Result<bool> {
        Ok(self.distance(eta)? <= tol)
    }
}
