//! Ground truth, data sampling, empirical moments and the penalized
//! least-squares objective
//!
//! ```text
//! F(w) = lambda R(w) + 1/(2n) sum_i (<x_i, w> - y_i)^2
//!      = lambda R(w) + 0.5 <Cn w, w> - <un, w> + 1/(2n) sum_i y_i^2
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector, DEFAULT_RANK_TOL};
use crate::regularizer::Regularizer;
use crate::rng::{stream_rng, Stream};

/// How nonzero l1 ground-truth amplitudes are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum AmplitudeLaw {
    /// Uniform random signs, unit magnitude.
    RandomSign,
    /// Standard normal, redrawn while the magnitude is below `floor`.
    Gaussian { floor: f64 },
}

impl Default for AmplitudeLaw {
    fn default() -> Self {
        AmplitudeLaw::RandomSign
    }
}

/// Draws `w0` with `R0(M_w0) = s`.
///
/// l1: `s` distinct coordinates chosen uniformly, amplitudes from `law`.
/// Nuclear: `A B^T` with standard normal `rows x s` and `cols x s` factors,
/// scaled to unit spectral norm (`law` is ignored).
pub fn generate_ground_truth(reg: &Regularizer, s: usize, law: AmplitudeLaw, seed: u64) -> Result<Vector> {
    reg.validate()?;
    let bound = reg.complexity_bound();
    if s > bound {
        return Err(Error::ComplexityOutOfRange { s, bound });
    }
    let mut rng = stream_rng(seed, Stream::GroundTruth);
    let mut w = Vector::zeros(reg.dim());
    if s == 0 {
        return Ok(w);
    }
    match *reg {
        Regularizer::L1 { p } => {
            let mut idx = index::sample(&mut rng, p, s).into_vec();
            idx.sort_unstable();
            for i in idx {
                w[i] = match law {
                    AmplitudeLaw::RandomSign => {
                        if rng.random::<bool>() {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                    AmplitudeLaw::Gaussian { floor } => loop {
                        let v: f64 = rng.sample(StandardNormal);
                        if v.abs() >= floor {
                            break v;
                        }
                    },
                };
            }
        }
        Regularizer::Nuclear { rows, cols } => {
            let a = Matrix::from_fn(rows, s, |_, _| rng.sample(StandardNormal));
            let b = Matrix::from_fn(cols, s, |_, _| rng.sample(StandardNormal));
            let m = &a * b.transpose();
            let scale = linalg::operator_norm(&m)?;
            w = reg.flatten(&(m / scale));
        }
    }
    Ok(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureLaw {
    /// i.i.d. standard normal entries; the covariance is exactly the identity.
    GaussianIid,
    /// `x = C^{1/2} g` with `g` standard normal.
    ExplicitCovariance,
}

/// The data-generating model: `y = <w0, x> + noise_std * g`, `E[x x^T] = C`.
#[derive(Debug, Clone)]
pub struct PopulationModel {
    pub w0: Vector,
    pub covariance: Matrix,
    pub noise_std: f64,
    pub feature_law: FeatureLaw,
}

impl PopulationModel {
    pub fn gaussian_iid(w0: Vector, noise_std: f64) -> Result<Self> {
        let p = w0.len();
        Self::build(w0, Matrix::identity(p, p), noise_std, FeatureLaw::GaussianIid)
    }

    pub fn with_covariance(w0: Vector, covariance: Matrix, noise_std: f64) -> Result<Self> {
        Self::build(w0, covariance, noise_std, FeatureLaw::ExplicitCovariance)
    }

    fn build(w0: Vector, covariance: Matrix, noise_std: f64, feature_law: FeatureLaw) -> Result<Self> {
        Error::check_dim(covariance.nrows(), w0.len())?;
        Error::check_dim(covariance.nrows(), covariance.ncols())?;
        if !(noise_std >= 0.0) {
            return Err(Error::config("noise_std must be nonnegative"));
        }
        let asym = linalg::max_abs(&(&covariance - covariance.transpose()));
        if asym > 1e-10 * linalg::max_abs(&covariance).max(1.0) {
            return Err(Error::config("covariance must be symmetric"));
        }
        let min_eig = covariance.clone().symmetric_eigen().eigenvalues.min();
        if min_eig < -1e-10 * linalg::max_abs(&covariance).max(1.0) {
            return Err(Error::config(format!(
                "covariance must be positive semi-definite (min eigenvalue {min_eig:.3e})"
            )));
        }
        Ok(PopulationModel {
            w0,
            covariance,
            noise_std,
            feature_law,
        })
    }

    pub fn dim(&self) -> usize {
        self.w0.len()
    }

    /// `u = C w0`.
    pub fn correlation(&self) -> Vector {
        &self.covariance * &self.w0
    }
}

/// AR(1)-type covariance `C_ij = rho^|i-j|`.
pub fn toeplitz_covariance(p: usize, rho: f64) -> Matrix {
    Matrix::from_fn(p, p, |i, j| rho.powi((i as i32 - j as i32).abs()))
}

/// Observations: rows of `x` are the feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vector,
    pub seed: u64,
    pub noise_std: f64,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vector, seed: u64, noise_std: f64) -> Result<Self> {
        Error::check_dim(x.nrows(), y.len())?;
        if !x.iter().chain(y.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("dataset"));
        }
        Ok(Dataset { x, y, seed, noise_std })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Stacks the samples of `self` and `other`.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        Error::check_dim(self.p(), other.p())?;
        let n = self.n() + other.n();
        let x = Matrix::from_fn(n, self.p(), |i, j| {
            if i < self.n() {
                self.x[(i, j)]
            } else {
                other.x[(i - self.n(), j)]
            }
        });
        let y = Vector::from_iterator(n, self.y.iter().chain(other.y.iter()).copied());
        Dataset::new(x, y, self.seed, self.noise_std)
    }
}

/// Draws `n` samples. Features come from stream `Features` and the noise from
/// stream `Noise` of `seed`, so the design does not depend on `noise_std`.
pub fn sample_dataset(model: &PopulationModel, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::config("n must be at least 1"));
    }
    let p = model.dim();
    let mut frng = stream_rng(seed, Stream::Features);
    let mut nrng = stream_rng(seed, Stream::Noise);
    let mut x = Matrix::zeros(n, p);
    for i in 0..n {
        for j in 0..p {
            x[(i, j)] = frng.sample(StandardNormal);
        }
    }
    if model.feature_law == FeatureLaw::ExplicitCovariance {
        let root = linalg::psd_sqrt(&model.covariance)?;
        x = x * root;
    }
    let clean = &x * &model.w0;
    let y = Vector::from_fn(n, |i, _| {
        let g: f64 = nrng.sample(StandardNormal);
        clean[i] + model.noise_std * g
    });
    Dataset::new(x, y, seed, model.noise_std)
}

/// Second-order sample moments of a dataset.
#[derive(Debug, Clone)]
pub struct EmpiricalQuantities {
    pub n: usize,
    /// `(1/n) sum x_i x_i^T`
    pub cn: Matrix,
    /// `(1/n) sum y_i x_i`
    pub un: Vector,
    /// spectral norm of `cn`
    pub ln: f64,
    /// `max_i |x_i|^2`
    pub ln_max: f64,
    /// `(1/2n) sum y_i^2`, the constant dropped from the compact objective
    pub half_mean_sq_y: f64,
}

pub fn empirical(d: &Dataset) -> Result<EmpiricalQuantities> {
    let n = d.n();
    let inv = 1.0 / n as f64;
    let cn = d.x.tr_mul(&d.x) * inv;
    let un = d.x.tr_mul(&d.y) * inv;
    let ln = linalg::operator_norm(&cn)?;
    let ln_max = d.x.row_iter().map(|r| r.norm_squared()).fold(0.0, f64::max);
    Ok(EmpiricalQuantities {
        n,
        cn,
        un,
        ln,
        ln_max,
        half_mean_sq_y: 0.5 * d.y.norm_squared() * inv,
    })
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("lambda must be positive, got {lambda}")))
    }
}

/// Penalized empirical risk from the sample moments.
pub fn erm_objective(reg: &Regularizer, lambda: f64, e: &EmpiricalQuantities, w: &Vector) -> Result<f64> {
    check_lambda(lambda)?;
    let quad = 0.5 * w.dot(&(&e.cn * w)) - e.un.dot(w);
    Ok(lambda * reg.value(w)? + quad + e.half_mean_sq_y)
}

/// Penalized empirical risk evaluated directly from the samples.
pub fn erm_objective_direct(reg: &Regularizer, lambda: f64, d: &Dataset, w: &Vector) -> Result<f64> {
    check_lambda(lambda)?;
    let r = &d.x * w - &d.y;
    Ok(lambda * reg.value(w)? + 0.5 * r.norm_squared() / d.n() as f64)
}

/// Distance between sample and population moments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplingReport {
    /// `max(|un - u|, |Cn - C|_op)`
    pub r_n: f64,
    pub u_error: f64,
    pub c_error: f64,
    pub rank_cn: usize,
    pub rank_c: usize,
    /// `Im Cn` is contained in `Im C`
    pub range_included: bool,
}

pub fn sampling_diagnostics(model: &PopulationModel, e: &EmpiricalQuantities) -> Result<SamplingReport> {
    Error::check_dim(model.dim(), e.un.len())?;
    let u_error = (&e.un - model.correlation()).norm();
    let c_error = linalg::operator_norm(&(&e.cn - &model.covariance))?;
    let pc = linalg::range_projector(&model.covariance, DEFAULT_RANK_TOL)?;
    let pcn = linalg::range_projector(&e.cn, DEFAULT_RANK_TOL)?;
    let p = model.dim();
    let leak = linalg::max_abs(&((Matrix::identity(p, p) - pc) * &pcn));
    Ok(SamplingReport {
        r_n: u_error.max(c_error),
        u_error,
        c_error,
        rank_cn: linalg::svd(&e.cn)?.rank(DEFAULT_RANK_TOL),
        rank_c: linalg::svd(&model.covariance)?.rank(DEFAULT_RANK_TOL),
        range_included: leak <= 1e-6,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BinaryHeader {
    n: usize,
    p: usize,
    seed: u64,
    noise_std: f64,
    /// payload file name, relative to the header
    payload: String,
}

impl Dataset {
    /// Writes `<stem>.json` (header) and `<stem>.bin`: `n*p` features in row
    /// order followed by `n` responses, little-endian `f64`.
    pub fn save_binary(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let payload = format!("{stem}.bin");
        let header = BinaryHeader {
            n: self.n(),
            p: self.p(),
            seed: self.seed,
            noise_std: self.noise_std,
            payload: payload.clone(),
        };
        let header_path = dir.join(format!("{stem}.json"));
        std::fs::write(&header_path, serde_json::to_string_pretty(&header)?)?;
        let mut out = BufWriter::new(File::create(dir.join(payload))?);
        for row in self.x.row_iter() {
            for v in row.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        for v in self.y.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(header_path)
    }

    pub fn load_binary(header_path: &Path) -> Result<Dataset> {
        let header: BinaryHeader = serde_json::from_str(&std::fs::read_to_string(header_path)?)?;
        let dir = header_path.parent().unwrap_or_else(|| Path::new("."));
        let mut bytes = Vec::new();
        BufReader::new(File::open(dir.join(&header.payload))?).read_to_end(&mut bytes)?;
        let expected = header.n * (header.p + 1) * 8;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "payload has {} bytes, header (n={}, p={}) requires {expected}",
                bytes.len(),
                header.n,
                header.p
            )));
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let (feat, resp) = vals.split_at(header.n * header.p);
        let x = Matrix::from_row_slice(header.n, header.p, feat);
        Dataset::new(x, Vector::from_column_slice(resp), header.seed, header.noise_std)
    }

    /// One row per sample: features then response, with a header row.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut head: Vec<String> = (0..self.p()).map(|j| format!("x{j}")).collect();
        head.push("y".into());
        w.write_record(&head)?;
        for (i, row) in self.x.row_iter().enumerate() {
            let mut rec: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            rec.push(format!("{:e}", self.y[i]));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Dataset> {
        let mut r = csv::Reader::from_path(path)?;
        let width = r.headers()?.len();
        if width < 2 {
            return Err(Error::Format("csv needs at least one feature and a response column".into()));
        }
        let mut feats = Vec::new();
        let mut resp = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != width {
                return Err(Error::Format(format!(
                    "row {} has {} fields, expected {width}",
                    line + 1,
                    rec.len()
                )));
            }
            for (j, field) in rec.iter().enumerate() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("row {}: bad number {field:?}", line + 1)))?;
                if j + 1 == width {
                    resp.push(v);
                } else {
                    feats.push(v);
                }
            }
        }
        let n = resp.len();
        if n == 0 {
            return Err(Error::Format("csv contains no samples".into()));
        }
        Dataset::new(
            Matrix::from_row_slice(n, width - 1, &feats),
            Vector::from_vec(resp),
            0,
            0.0,
        )
    }
}
