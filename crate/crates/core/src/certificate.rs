//! Dual certificates.
//!
//! The population certificate is the unique minimizer of `<C^+ eta, eta>`
//! over `dR(w0) ∩ Im C`. Writing `C = B diag(d) B^T` on its range, the
//! problem splits into a strongly convex quadratic restricted to `Im C` and
//! an exact projection onto `dR(w0)`; we solve it with ADMM on the splitting
//!
//! ```text
//! min  0.5 <C^+ eta, eta> + i_{Im C}(eta) + i_{dR(w0)}(zeta)   s.t. eta = zeta
//! ```
//!
//! whose eta-step is diagonal in the eigenbasis of `C` and whose zeta-step is
//! the projection exposed by [`SubdiffDescriptor`]. The returned vector is the
//! zeta iterate, so it lies exactly in `dR(w0)` (active l1 coordinates are
//! exactly +-1) and within the solver tolerance of `Im C`.
//!
//! The empirical certificate is read off a primal point through the
//! optimality condition `eta = (un - Cn w) / lambda`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector, DEFAULT_RANK_TOL};
use crate::problem::EmpiricalQuantities;
use crate::regularizer::{Regularizer, StratumTolerance, SubdiffDescriptor};
use crate::strata::Stratum;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum Provenance {
    Population,
    Empirical { lambda: f64, n: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcReport {
    pub holds: bool,
    /// `1 - (dual norm of the off-model component)`.
    pub margin: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Certificate {
    pub eta: Vec<f64>,
    pub provenance: Provenance,
    pub dual_stratum: Stratum,
    pub kkt_residual: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ic: Option<IcReport>,
}

impl Certificate {
    pub fn eta_vector(&self) -> Vector {
        Vector::from_column_slice(&self.eta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CertificateSolverConfig {
    pub max_iters: usize,
    /// ADMM stops once both the primal residual `|eta - zeta|` and the dual
    /// residual `rho |zeta_k - zeta_{k-1}|` are below this.
    pub stationarity_tol: f64,
    /// Residual level above which a stalled run is declared infeasible.
    pub feasibility_tol: f64,
    /// ADMM penalty; `None` picks the geometric mean of the spectrum of `C^+`.
    pub penalty: Option<f64>,
    /// Relative threshold for the numerical range of `C`.
    pub rank_tol: f64,
}

impl Default for CertificateSolverConfig {
    fn default() -> Self {
        CertificateSolverConfig {
            max_iters: 100_000,
            stationarity_tol: 1e-11,
            feasibility_tol: 1e-8,
            penalty: None,
            rank_tol: DEFAULT_RANK_TOL,
        }
    }
}

impl CertificateSolverConfig {
    fn validate(&self) -> Result<()> {
        let ok = self.max_iters > 0
            && self.stationarity_tol > 0.0
            && self.feasibility_tol > 0.0
            && self.rank_tol > 0.0
            && self.penalty.map_or(true, |r| r > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::config("certificate solver parameters must be positive"))
        }
    }
}

/// Raw solver output, before it is wrapped into a [`Certificate`].
#[derive(Debug, Clone)]
pub struct CertificateSolution {
    pub eta: Vector,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// Distance from `eta` to `Im C`.
    pub range_distance: f64,
}

fn is_identity(c: &Matrix) -> bool {
    c.is_square() && linalg::max_abs(&(c - Matrix::identity(c.nrows(), c.ncols()))) <= 1e-12
}

/// Solves `min <C^+ eta, eta>` over `dR(w0) ∩ Im C`, starting from the
/// projection of `start` (zero when `None`) onto `dR(w0)`.
pub fn solve_certificate_problem(
    desc: &SubdiffDescriptor,
    c: &Matrix,
    cfg: &CertificateSolverConfig,
    start: Option<&Vector>,
) -> Result<CertificateSolution> {
    cfg.validate()?;
    let p = desc.dim();
    Error::check_dim(p, c.nrows())?;
    Error::check_dim(p, c.ncols())?;

    if start.is_none() && is_identity(c) {
        // minimal-norm element of dR(w0)
        let eta = desc.project(&Vector::zeros(p))?;
        return Ok(CertificateSolution {
            eta,
            iterations: 0,
            primal_residual: 0.0,
            dual_residual: 0.0,
            range_distance: 0.0,
        });
    }

    let range = linalg::psd_range(c, cfg.rank_tol)?;
    if range.rank() == 0 {
        // Im C = {0}
        let zero = Vector::zeros(p);
        let residual = desc.distance(&zero)?;
        if residual > cfg.feasibility_tol {
            return Err(Error::CertificateInfeasible { residual });
        }
        return Ok(CertificateSolution {
            eta: zero,
            iterations: 0,
            primal_residual: residual,
            dual_residual: 0.0,
            range_distance: 0.0,
        });
    }

    let inv: Vec<f64> = range.values.iter().map(|d| 1.0 / d).collect();
    let (lo, hi) = inv
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let rho = cfg.penalty.unwrap_or_else(|| (lo * hi).sqrt());
    let shrink = Vector::from_iterator(inv.len(), inv.iter().map(|d| rho / (d + rho)));
    let basis = &range.basis;

    let mut zeta = desc.project(&start.cloned().unwrap_or_else(|| Vector::zeros(p)))?;
    let mut scaled_dual = Vector::zeros(p);
    let mut primal = f64::INFINITY;
    let mut dual = f64::INFINITY;
    let mut checkpoint = f64::INFINITY;
    const WINDOW: usize = 2000;

    for k in 1..=cfg.max_iters {
        let coeffs = basis.tr_mul(&(&zeta - &scaled_dual)).component_mul(&shrink);
        let eta = basis * coeffs;
        let next = desc.project(&(&eta + &scaled_dual))?;
        let gap = &eta - &next;
        primal = gap.norm();
        dual = rho * (&next - &zeta).norm();
        scaled_dual += &gap;
        zeta = next;

        if !primal.is_finite() || !dual.is_finite() {
            return Err(Error::NonFinite("certificate iterate"));
        }
        if primal <= cfg.stationarity_tol && dual <= cfg.stationarity_tol {
            let range_distance = (&zeta - range.project(&zeta)).norm();
            return Ok(CertificateSolution {
                eta: zeta,
                iterations: k,
                primal_residual: primal,
                dual_residual: dual,
                range_distance,
            });
        }
        if k % WINDOW == 0 {
            // On an infeasible problem the primal residual converges to the
            // (nonzero) gap between the two sets while the scaled dual grows.
            if primal > cfg.feasibility_tol && primal > 0.999 * checkpoint && dual <= primal {
                return Err(Error::CertificateInfeasible { residual: primal });
            }
            checkpoint = primal;
        }
    }
    if primal > cfg.feasibility_tol {
        return Err(Error::CertificateInfeasible { residual: primal });
    }
    Err(Error::CertificateNotConverged {
        iterations: cfg.max_iters,
        primal,
        dual,
    })
}

/// The population certificate `eta0` for `w0` and covariance `C`.
pub fn solve_population_certificate(
    reg: &Regularizer,
    w0: &Vector,
    c: &Matrix,
    cfg: &CertificateSolverConfig,
    tol: &StratumTolerance,
) -> Result<Certificate> {
    let desc = reg.subdifferential_at(w0, tol)?;
    let sol = solve_certificate_problem(&desc, c, cfg, None)?;
    let dual_stratum = reg.dual_stratum_of(&sol.eta, tol)?;
    let margin = 1.0 - desc.complement_norm(&sol.eta)?;
    Ok(Certificate {
        eta: sol.eta.as_slice().to_vec(),
        provenance: Provenance::Population,
        dual_stratum,
        kkt_residual: sol.primal_residual.max(sol.dual_residual),
        ic: Some(IcReport {
            holds: margin >= tol.active,
            margin,
        }),
    })
}

/// `eta = (un - Cn w) / lambda`, with its distance to `dR(w)` as residual.
pub fn empirical_certificate(
    reg: &Regularizer,
    lambda: f64,
    e: &EmpiricalQuantities,
    w_hat: &Vector,
    tol: &StratumTolerance,
) -> Result<Certificate> {
    if !(lambda > 0.0) {
        return Err(Error::config("lambda must be positive"));
    }
    Error::check_dim(reg.dim(), w_hat.len())?;
    let eta = (&e.un - &e.cn * w_hat) / lambda;
    let desc = reg.subdifferential_at(w_hat, tol)?;
    let kkt_residual = desc.distance(&eta)?;
    // a non-optimal point may leave the dual ball; its stratum is read off
    // the nearest point of the ball
    let dual_stratum = reg.dual_stratum_of(&reg.project_dual_ball(&eta)?, tol)?;
    Ok(Certificate {
        eta: eta.as_slice().to_vec(),
        provenance: Provenance::Empirical { lambda, n: e.n },
        dual_stratum,
        kkt_residual,
        ic: None,
    })
}

/// Irrepresentable condition `eta0 ∈ ri dR(w0)` with a safety margin:
/// holds when the off-model component has dual norm at most `1 - margin`.
pub fn irrepresentable_check(
    reg: &Regularizer,
    w0: &Vector,
    cert: &Certificate,
    margin: f64,
    tol: &StratumTolerance,
) -> Result<IcReport> {
    let desc = reg.subdifferential_at(w0, tol)?;
    let attained = 1.0 - desc.complement_norm(&cert.eta_vector())?;
    Ok(IcReport {
        holds: attained >= margin,
        margin: attained,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DualCheckReport {
    /// Stationarity residual of `eta` for the empirical dual problem, in the
    /// units of `eta`.
    pub residual: f64,
    /// Part of the residual due to `eta` leaving the dual-norm ball.
    pub ball_excess: f64,
}

/// First-order check of `eta` against the Fenchel dual of the penalized
/// problem,
///
/// ```text
/// min_{eta ∈ Im Cn}  R*(eta) + (lambda/2) <Cn^+ eta, eta> - <Cn^+ un, eta>.
/// ```
///
/// `eta` is stationary iff some `w` in the normal cone of the dual ball at
/// `eta` satisfies `Cn w = un - lambda eta`; the residual is the smallest
/// `|Cn w - (un - lambda eta)| / lambda` over that cone. The primal solution
/// is never consulted.
pub fn dual_cross_check(
    reg: &Regularizer,
    lambda: f64,
    e: &EmpiricalQuantities,
    cert: &Certificate,
    tol: &StratumTolerance,
) -> Result<DualCheckReport> {
    if !(lambda > 0.0) {
        return Err(Error::config("lambda must be positive"));
    }
    let eta = cert.eta_vector();
    Error::check_dim(reg.dim(), eta.len())?;
    let inside = reg.project_dual_ball(&eta)?;
    let ball_excess = (&eta - &inside).norm();
    let target = &e.un - &inside * lambda;

    // columns of `gen` span the normal cone generators mapped through Cn
    let (gen, cone) = match reg {
        Regularizer::L1 { .. } => {
            let active: Vec<usize> = (0..inside.len())
                .filter(|&i| inside[i].abs() >= 1.0 - tol.active)
                .collect();
            let mut g = Matrix::zeros(inside.len(), active.len());
            for (j, &i) in active.iter().enumerate() {
                g.set_column(j, &(e.cn.column(i) * inside[i].signum()));
            }
            (g, Cone::Orthant)
        }
        Regularizer::Nuclear { .. } => {
            let d = linalg::svd(&reg.as_matrix(&inside)?)?;
            let m = d.s.iter().filter(|&&s| s >= 1.0 - tol.active).count();
            // w = U_A S V_A^T with S symmetric PSD, parametrized by the m*m
            // entries of S (symmetry is restored in the cone projection)
            let mut g = Matrix::zeros(inside.len(), m * m);
            for a in 0..m {
                for b in 0..m {
                    let outer = d.u.column(a) * d.v.column(b).transpose();
                    let flat = reg.flatten(&outer);
                    g.set_column(a * m + b, &(&e.cn * flat));
                }
            }
            (g, Cone::Psd(m))
        }
    };
    let best = if gen.ncols() == 0 {
        target.norm()
    } else {
        let coeffs = match cone {
            Cone::Orthant => nnls(&gen, &target),
            Cone::Psd(m) => psd_least_squares(&gen, &target, m)?,
        };
        (&gen * coeffs - &target).norm()
    };
    Ok(DualCheckReport {
        residual: best / lambda + ball_excess,
        ball_excess,
    })
}

enum Cone {
    Orthant,
    Psd(usize),
}

fn lstsq(a: &Matrix, b: &Vector) -> Vector {
    match linalg::pseudo_inverse(a, 1e-12) {
        Ok(pinv) => pinv * b,
        Err(_) => Vector::zeros(a.ncols()),
    }
}

/// Lawson-Hanson active-set nonnegative least squares.
fn nnls(a: &Matrix, b: &Vector) -> Vector {
    let n = a.ncols();
    let mut x = Vector::zeros(n);
    let mut passive = vec![false; n];
    let scale = a.norm() * b.norm();
    let eps = 1e-14 * scale.max(f64::MIN_POSITIVE);
    for _ in 0..(3 * n + 10) {
        let grad = a.tr_mul(&(b - a * &x));
        let pick = (0..n)
            .filter(|&j| !passive[j] && grad[j] > eps)
            .max_by(|&i, &j| grad[i].total_cmp(&grad[j]));
        let Some(j) = pick else { break };
        passive[j] = true;
        loop {
            let idx: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
            let sub = a.select_columns(idx.iter());
            let zp = lstsq(&sub, b);
            if zp.iter().all(|&v| v > 0.0) {
                x.fill(0.0);
                for (k, &i) in idx.iter().enumerate() {
                    x[i] = zp[k];
                }
                break;
            }
            let mut alpha = 1.0f64;
            for (k, &i) in idx.iter().enumerate() {
                if zp[k] <= 0.0 {
                    alpha = alpha.min(x[i] / (x[i] - zp[k]));
                }
            }
            for (k, &i) in idx.iter().enumerate() {
                x[i] += alpha * (zp[k] - x[i]);
                if x[i] <= 0.0 {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
            if idx.iter().all(|&i| !passive[i]) {
                break;
            }
        }
    }
    x
}

fn project_psd(flat: &Vector, m: usize) -> Vector {
    let s = Matrix::from_row_slice(m, m, flat.as_slice());
    let sym = (&s + s.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut out = Matrix::zeros(m, m);
    for k in 0..m {
        let lam = eig.eigenvalues[k].max(0.0);
        if lam > 0.0 {
            let v = eig.eigenvectors.column(k);
            out += (v * lam) * v.transpose();
        }
    }
    Vector::from_iterator(m * m, out.transpose().iter().copied())
}

/// `min |G vec(S) - b|` over symmetric PSD `S` (m x m, row-major in `vec`).
fn psd_least_squares(g: &Matrix, b: &Vector, m: usize) -> Result<Vector> {
    let direct = project_psd(&lstsq(g, b), m);
    let gram = g.tr_mul(g);
    let rhs = g.tr_mul(b);
    let lip = linalg::operator_norm(&gram)?.max(f64::MIN_POSITIVE);
    // accelerated projected gradient, warm-started at the projected
    // unconstrained solution (exact whenever that one is already PSD)
    let mut x = direct.clone();
    let mut y = direct;
    let mut t = 1.0f64;
    for _ in 0..20_000 {
        let grad = &gram * &y - &rhs;
        let next = project_psd(&(&y - grad / lip), m);
        let step = (&next - &x).norm();
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &next + (&next - &x) * ((t - 1.0) / t_next);
        x = next;
        t = t_next;
        if step <= 1e-15 * (1.0 + x.norm()) {
            break;
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{empirical, Dataset};
    use crate::strata::Side;

    fn v(x: &[f64]) -> Vector {
        Vector::from_column_slice(x)
    }

    #[test]
    fn identity_covariance_gives_minimal_norm_subgradient() {
        let reg = Regularizer::l1(3);
        let tol = StratumTolerance::default();
        let cert = solve_population_certificate(
            &reg,
            &v(&[1.0, 0.0, 0.0]),
            &Matrix::identity(3, 3),
            &CertificateSolverConfig::default(),
            &tol,
        )
        .unwrap();
        assert_eq!(cert.eta, vec![1.0, 0.0, 0.0]);
        assert_eq!(cert.dual_stratum, Stratum::support(Side::Dual, [0]));
        let ic = cert.ic.unwrap();
        assert!(ic.holds);
        assert_eq!(ic.margin, 1.0);
    }

    #[test]
    fn rank_deficient_diagonal_covariance() {
        let reg = Regularizer::l1(3);
        let tol = StratumTolerance::default();
        let c = Matrix::from_diagonal(&v(&[1.0, 1.0, 0.0]));
        let cert = solve_population_certificate(
            &reg,
            &v(&[1.0, 0.0, 0.0]),
            &c,
            &CertificateSolverConfig::default(),
            &tol,
        )
        .unwrap();
        assert!((cert.eta_vector() - v(&[1.0, 0.0, 0.0])).norm() < 1e-9);
    }

    #[test]
    fn infeasible_problem_is_reported() {
        // w0 on the kernel of C: dR(w0) forces eta_3 = 1, Im C forces eta_3 = 0
        let reg = Regularizer::l1(3);
        let c = Matrix::from_diagonal(&v(&[1.0, 1.0, 0.0]));
        let err = solve_population_certificate(
            &reg,
            &v(&[0.0, 0.0, 1.0]),
            &c,
            &CertificateSolverConfig::default(),
            &StratumTolerance::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::CertificateInfeasible { .. }), "{err}");
    }

    #[test]
    fn ic_examples() {
        let reg = Regularizer::l1(2);
        let tol = StratumTolerance::default();
        let mk = |eta: Vec<f64>| Certificate {
            dual_stratum: reg.dual_stratum_of(&Vector::from_vec(eta.clone()), &tol).unwrap(),
            eta,
            provenance: Provenance::Population,
            kkt_residual: 0.0,
            ic: None,
        };
        let w0 = v(&[2.0, 0.0]);
        let r = irrepresentable_check(&reg, &w0, &mk(vec![1.0, 0.3]), 0.0, &tol).unwrap();
        assert!(r.holds);
        assert!((r.margin - 0.7).abs() < 1e-15);
        let r = irrepresentable_check(&reg, &w0, &mk(vec![1.0, 1.0]), 1e-9, &tol).unwrap();
        assert!(!r.holds);
    }

    fn small_data() -> (Dataset, EmpiricalQuantities) {
        let x = Matrix::from_row_slice(4, 3, &[1.0, 0.2, 0.0, 0.0, 1.0, 0.5, 0.3, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let y = v(&[1.0, -0.5, 0.2, 0.7]);
        let d = Dataset::new(x, y, 0, 0.0).unwrap();
        let e = empirical(&d).unwrap();
        (d, e)
    }

    #[test]
    fn empirical_certificate_at_zero_solution() {
        let (_, e) = small_data();
        let reg = Regularizer::l1(3);
        let tol = StratumTolerance::default();
        let lambda = e.un.amax() * 1.5;
        let cert = empirical_certificate(&reg, lambda, &e, &Vector::zeros(3), &tol).unwrap();
        assert!((cert.eta_vector() - &e.un / lambda).amax() < 1e-15);
        assert_eq!(cert.kkt_residual, 0.0);

        let cert = empirical_certificate(&reg, 1e-3, &e, &v(&[5.0, -5.0, 5.0]), &tol).unwrap();
        assert!(cert.kkt_residual > 0.0);
    }

    #[test]
    fn dual_check_zero_data() {
        let d = Dataset::new(Matrix::from_element(3, 2, 1.0), Vector::zeros(3), 0, 0.0).unwrap();
        let e = empirical(&d).unwrap();
        let reg = Regularizer::l1(2);
        let tol = StratumTolerance::default();
        let cert = empirical_certificate(&reg, 0.5, &e, &Vector::zeros(2), &tol).unwrap();
        let r = dual_cross_check(&reg, 0.5, &e, &cert, &tol).unwrap();
        assert_eq!(r.residual, 0.0);
    }

    #[test]
    fn nnls_small() {
        let a = Matrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let x = nnls(&a, &v(&[1.0, -1.0, 0.0]));
        // best nonnegative fit uses only the first column
        assert!((x - v(&[0.5, 0.0])).norm() < 1e-12);
        let x = nnls(&a, &v(&[1.0, 2.0, 3.0]));
        assert!((x - v(&[1.0, 2.0])).norm() < 1e-12);
    }
}
