//! Proximal-gradient solvers for the penalized empirical risk.
//!
//! Every method is an instance of the relaxed stochastic proximal-gradient
//! iteration
//!
//! ```text
//! d_k     = (<w_k, x_i> - y_i) x_i + eps_k          (i uniform in 0..n)
//! z_k     = prox_{gamma_k lambda R}(w_k - gamma_k d_k)
//! w_{k+1} = (1 - alpha_k) w_k + alpha_k z_k
//! ```
//!
//! Prox-SGD uses `eps_k = 0`; SAGA uses `eps_k = mean(g) - g_i` from a table
//! of stored per-sample gradients (read *before* entry `i` is refreshed, so
//! that the correction has zero conditional mean). Forward-backward replaces
//! the sampled gradient by the full one, `d_k = Cn w_k - un`.
//!
//! The dual iterate `v_k = (w_k - gamma_k d_k - z_k) / gamma_k` is an exact
//! element of `lambda dR(z_k)` by the prox optimality condition; its
//! distance to that set is recorded as a numerical health check.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::problem::{erm_objective, Dataset, EmpiricalQuantities};
use crate::regularizer::{Regularizer, StratumTolerance};
use crate::rng::{stream_rng, Stream};
use crate::strata::{complexity, Stratum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fb,
    ProxSgd,
    Saga,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Fb => "fb",
            Method::ProxSgd => "proxsgd",
            Method::Saga => "saga",
        }
    }

    pub fn is_stochastic(self) -> bool {
        self != Method::Fb
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fb" => Ok(Method::Fb),
            "proxsgd" | "prox-sgd" | "sgd" => Ok(Method::ProxSgd),
            "saga" => Ok(Method::Saga),
            other => Err(Error::config(format!("unknown method {other:?} (expected fb, proxsgd or saga)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "schedule", rename_all = "lowercase")]
pub enum StepSchedule {
    Constant { gamma: f64 },
    /// `gamma_k = a / (k + b)`
    Decaying { a: f64, b: f64 },
}

impl StepSchedule {
    pub fn at(&self, k: usize) -> f64 {
        match *self {
            StepSchedule::Constant { gamma } => gamma,
            StepSchedule::Decaying { a, b } => a / (k as f64 + b),
        }
    }

    /// Largest step over all `k >= 0`.
    pub fn sup(&self) -> f64 {
        match *self {
            StepSchedule::Constant { gamma } => gamma,
            StepSchedule::Decaying { a, b } => a / b,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            StepSchedule::Constant { gamma } => gamma > 0.0 && gamma.is_finite(),
            StepSchedule::Decaying { a, b } => a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("step schedule must be positive: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "schedule", rename_all = "lowercase")]
pub enum RelaxationSchedule {
    Constant { alpha: f64 },
}

impl RelaxationSchedule {
    pub fn at(&self, _k: usize) -> f64 {
        match *self {
            RelaxationSchedule::Constant { alpha } => alpha,
        }
    }
}

impl Default for RelaxationSchedule {
    fn default() -> Self {
        RelaxationSchedule::Constant { alpha: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSpec {
    pub method: Method,
    pub gamma: StepSchedule,
    #[serde(default)]
    pub alpha: RelaxationSchedule,
    /// Single-sample steps for stochastic methods, full steps for FB.
    pub iterations: usize,
    #[serde(default)]
    pub rng_seed: u64,
    /// Defaults to one point per batch (`n` steps, or 1 for FB).
    #[serde(default)]
    pub record_every: Option<usize>,
    /// Starting point; zero when absent.
    #[serde(default)]
    pub init: Option<Vec<f64>>,
}

impl SolverSpec {
    /// Default parameters per method: `1.8/L_n` for FB, `1/(3 L'_n)` for
    /// SAGA and `10/(k + 3e4)` for Prox-SGD, all with `alpha = 1`, run for
    /// `batches` passes over the data.
    pub fn with_defaults(method: Method, e: &EmpiricalQuantities, batches: usize, rng_seed: u64) -> Self {
        let gamma = match method {
            Method::Fb => StepSchedule::Constant { gamma: 1.8 / e.ln },
            Method::Saga => StepSchedule::Constant { gamma: 1.0 / (3.0 * e.ln_max) },
            Method::ProxSgd => StepSchedule::Decaying { a: 10.0, b: 3e4 },
        };
        let iterations = if method.is_stochastic() { batches * e.n } else { batches };
        SolverSpec {
            method,
            gamma,
            alpha: RelaxationSchedule::default(),
            iterations,
            rng_seed,
            record_every: None,
            init: None,
        }
    }

    pub fn steps_per_batch(&self, n: usize) -> usize {
        if self.method.is_stochastic() {
            n
        } else {
            1
        }
    }

    pub fn record_interval(&self, n: usize) -> usize {
        self.record_every.unwrap_or_else(|| self.steps_per_batch(n))
    }

    pub fn validate(&self, e: &EmpiricalQuantities, p: usize) -> Result<()> {
        self.gamma.validate()?;
        let RelaxationSchedule::Constant { alpha } = self.alpha;
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::config(format!("relaxation must lie in (0, 1], got {alpha}")));
        }
        if self.iterations == 0 {
            return Err(Error::config("iterations must be positive"));
        }
        if self.record_every == Some(0) {
            return Err(Error::config("record_every must be positive"));
        }
        if let Some(init) = &self.init {
            Error::check_dim(p, init.len())?;
        }
        if self.method == Method::Fb {
            let bound = 2.0 / e.ln;
            if self.gamma.sup() >= bound {
                return Err(Error::config(format!(
                    "forward-backward step {} outside (0, 2/L_n) = (0, {bound})",
                    self.gamma.sup()
                )));
            }
        }
        Ok(())
    }
}

/// Stored per-sample gradients for SAGA. Gradient `i` is `coef[i] * x_i`,
/// so only the scalar residuals are kept; `mean` is maintained incrementally.
#[derive(Debug, Clone)]
pub struct GradientTable {
    pub coef: Vec<f64>,
    pub mean: Vector,
}

impl GradientTable {
    pub fn new(data: &Dataset, w: &Vector) -> Self {
        let residual = &data.x * w - &data.y;
        let mean = data.x.tr_mul(&residual) / data.n() as f64;
        GradientTable {
            coef: residual.as_slice().to_vec(),
            mean,
        }
    }

    pub fn gradient(&self, data: &Dataset, i: usize) -> Vector {
        data.x.row(i).transpose() * self.coef[i]
    }

    /// `|mean - (1/n) sum_i g_i|_inf`, recomputed from scratch.
    pub fn mean_defect(&self, data: &Dataset) -> f64 {
        let fresh = data.x.tr_mul(&Vector::from_column_slice(&self.coef)) / data.n() as f64;
        (&fresh - &self.mean).amax()
    }
}

#[derive(Debug, Clone)]
pub struct SolverState {
    pub w: Vector,
    pub z: Vector,
    pub k: usize,
    pub table: Option<GradientTable>,
    rng: ChaCha8Rng,
}

impl SolverState {
    pub fn new(spec: &SolverSpec, data: &Dataset) -> Result<Self> {
        let p = data.p();
        let w = match &spec.init {
            Some(init) => {
                Error::check_dim(p, init.len())?;
                Vector::from_column_slice(init)
            }
            None => Vector::zeros(p),
        };
        let table = (spec.method == Method::Saga).then(|| GradientTable::new(data, &w));
        Ok(SolverState {
            z: w.clone(),
            w,
            k: 0,
            table,
            rng: stream_rng(spec.rng_seed, Stream::Solver(0)),
        })
    }
}

/// Quantities produced by a single step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub gamma: f64,
    pub alpha: f64,
    /// The direction `d_k`.
    pub direction: Vector,
    /// The dual iterate, an element of `lambda dR(z_k)`.
    pub v: Vector,
    /// `|w_{k+1} - w_k|`.
    pub step_norm: f64,
}

fn prox_update(
    state: &mut SolverState,
    reg: &Regularizer,
    lambda: f64,
    gamma: f64,
    alpha: f64,
    direction: Vector,
) -> Result<StepOutcome> {
    let forward = &state.w - &direction * gamma;
    let z = reg.prox(gamma * lambda, &forward)?;
    let v = compute_dual_iterate(&forward, &z, gamma);
    let next = if alpha == 1.0 {
        z.clone()
    } else {
        &state.w * (1.0 - alpha) + &z * alpha
    };
    let step_norm = (&next - &state.w).norm();
    state.w = next;
    state.z = z;
    state.k += 1;
    if state.w.iter().any(|x| !x.is_finite()) {
        return Err(Error::Diverged { step: state.k });
    }
    Ok(StepOutcome {
        gamma,
        alpha,
        direction,
        v,
        step_norm,
    })
}

/// One forward-backward step with constant step `gamma`.
pub fn fb_step(
    state: &mut SolverState,
    reg: &Regularizer,
    lambda: f64,
    e: &EmpiricalQuantities,
    gamma: f64,
) -> Result<StepOutcome> {
    if !(gamma > 0.0 && gamma < 2.0 / e.ln) {
        return Err(Error::config(format!(
            "forward-backward step {gamma} outside (0, 2/L_n) = (0, {})",
            2.0 / e.ln
        )));
    }
    let grad = &e.cn * &state.w - &e.un;
    prox_update(state, reg, lambda, gamma, 1.0, grad)
}

/// The stochastic direction for sample `i` at the current state, without
/// touching the table.
pub fn stochastic_direction(state: &SolverState, method: Method, data: &Dataset, i: usize) -> Vector {
    let xi = data.x.row(i).transpose();
    let residual = xi.dot(&state.w) - data.y[i];
    let mut d = &xi * residual;
    if method == Method::Saga {
        let table = state.table.as_ref().expect("saga state carries a gradient table");
        d += &table.mean - &xi * table.coef[i];
    }
    d
}

/// One step of the relaxed stochastic proximal-gradient iteration.
pub fn rspg_step(
    state: &mut SolverState,
    reg: &Regularizer,
    lambda: f64,
    data: &Dataset,
    spec: &SolverSpec,
) -> Result<StepOutcome> {
    if !spec.method.is_stochastic() {
        return Err(Error::config("rspg_step needs a stochastic method"));
    }
    let n = data.n();
    let i = state.rng.random_range(0..n);
    let direction = stochastic_direction(state, spec.method, data, i);
    if let Some(table) = state.table.as_mut() {
        // refresh entry i with the gradient at the current point
        let xi = data.x.row(i).transpose();
        let fresh = xi.dot(&state.w) - data.y[i];
        table.mean += &xi * ((fresh - table.coef[i]) / n as f64);
        table.coef[i] = fresh;
    }
    let gamma = spec.gamma.at(state.k);
    let alpha = spec.alpha.at(state.k);
    prox_update(state, reg, lambda, gamma, alpha, direction)
}

/// `v = (w - gamma d - z) / gamma`, given the forward point `w - gamma d`.
pub fn compute_dual_iterate(forward: &Vector, z: &Vector, gamma: f64) -> Vector {
    (forward - z) / gamma
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TracePoint {
    pub k: usize,
    pub batch: f64,
    pub stratum: Stratum,
    #[serde(rename = "R0")]
    pub r0: usize,
    pub objective: f64,
    pub dual_residual: f64,
    /// `|w_{k+1} - w_k| / (alpha_k gamma_k)` for the last step.
    pub step_ratio: f64,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SolverTrace {
    pub points: Vec<TracePoint>,
}

impl SolverTrace {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["batch", "k", "R0", "objective", "dual_residual", "stratum"])?;
        for p in &self.points {
            w.write_record([
                p.batch.to_string(),
                p.k.to_string(),
                p.r0.to_string(),
                format!("{:e}", p.objective),
                format!("{:e}", p.dual_residual),
                p.stratum.to_json_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(File::create(path)?)
    }

    pub fn last(&self) -> Option<&TracePoint> {
        self.points.last()
    }

    /// Batch of the first record after which the stratum never changes.
    pub fn identification_batch(&self) -> Option<f64> {
        let last = self.points.last()?;
        let start = self
            .points
            .iter()
            .rposition(|p| p.stratum != last.stratum)
            .map_or(0, |i| i + 1);
        Some(self.points[start].batch)
    }

    /// Number of distinct strata among the last `count` records.
    pub fn distinct_tail_strata(&self, count: usize) -> usize {
        let tail = &self.points[self.points.len().saturating_sub(count)..];
        let mut seen: Vec<&Stratum> = Vec::new();
        for p in tail {
            if !seen.contains(&&p.stratum) {
                seen.push(&p.stratum);
            }
        }
        seen.len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinalState {
    pub method: Method,
    pub k: usize,
    pub w: Vec<f64>,
    pub z: Vec<f64>,
    pub stratum: Stratum,
    #[serde(rename = "R0")]
    pub r0: usize,
    pub objective: f64,
    pub dual_residual: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: SolverTrace,
    pub state: SolverState,
    pub summary: FinalState,
}

/// A run that hit a non-finite iterate or a numerical failure; the trace up
/// to the last healthy record is kept.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct SolverFailure {
    pub error: Error,
    pub partial: SolverTrace,
}

fn record(
    reg: &Regularizer,
    lambda: f64,
    e: &EmpiricalQuantities,
    state: &SolverState,
    outcome: &StepOutcome,
    batch: f64,
    tol: &StratumTolerance,
) -> Result<TracePoint> {
    let stratum = reg.stratum_of(&state.z, tol)?;
    let scaled = &outcome.v / lambda;
    let dual_residual = reg.subdifferential_at(&state.z, tol)?.distance(&scaled)?;
    Ok(TracePoint {
        k: state.k,
        batch,
        r0: complexity(&stratum)?,
        stratum,
        objective: erm_objective(reg, lambda, e, &state.w)?,
        dual_residual,
        step_ratio: outcome.step_norm / (outcome.alpha * outcome.gamma),
        v: outcome.v.as_slice().to_vec(),
    })
}

/// Runs `spec.iterations` steps, recording every `record_interval` steps.
pub fn run(
    reg: &Regularizer,
    lambda: f64,
    data: &Dataset,
    e: &EmpiricalQuantities,
    spec: &SolverSpec,
    tol: &StratumTolerance,
) -> std::result::Result<RunOutput, SolverFailure> {
    let fail = |error: Error, partial: &SolverTrace| SolverFailure {
        error,
        partial: partial.clone(),
    };
    let mut trace = SolverTrace::default();
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(fail(Error::config("lambda must be positive"), &trace));
    }
    if let Err(err) = Error::check_dim(reg.dim(), data.p()).and_then(|_| spec.validate(e, data.p())) {
        return Err(fail(err, &trace));
    }
    let mut state = SolverState::new(spec, data).map_err(|err| fail(err, &trace))?;
    let every = spec.record_interval(data.n());
    let per_batch = spec.steps_per_batch(data.n()) as f64;

    for _ in 0..spec.iterations {
        let outcome = match spec.method {
            Method::Fb => {
                let gamma = spec.gamma.at(state.k);
                let alpha = spec.alpha.at(state.k);
                let grad = &e.cn * &state.w - &e.un;
                prox_update(&mut state, reg, lambda, gamma, alpha, grad)
            }
            _ => rspg_step(&mut state, reg, lambda, data, spec),
        }
        .map_err(|err| fail(err, &trace))?;
        if state.k % every == 0 || state.k == spec.iterations {
            let point = record(reg, lambda, e, &state, &outcome, state.k as f64 / per_batch, tol)
                .map_err(|err| fail(err, &trace))?;
            if !point.objective.is_finite() {
                return Err(fail(Error::Diverged { step: state.k }, &trace));
            }
            trace.points.push(point);
        }
    }

    let last = trace.last().expect("at least one record");
    let summary = FinalState {
        method: spec.method,
        k: state.k,
        w: state.w.as_slice().to_vec(),
        z: state.z.as_slice().to_vec(),
        stratum: last.stratum.clone(),
        r0: last.r0,
        objective: last.objective,
        dual_residual: last.dual_residual,
    };
    Ok(RunOutput {
        trace,
        state,
        summary,
    })
}

/// Report on the checkable rows of the step-size hypotheses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HaReport {
    pub step_bound: f64,
    pub max_step: f64,
    pub step_range_ok: bool,
    /// Whether `sum alpha_k gamma_k^2` is finite for the schedule.
    pub square_summable: bool,
    pub warnings: Vec<String>,
}

impl HaReport {
    pub fn passes(&self) -> bool {
        self.step_range_ok && self.warnings.is_empty()
    }
}

/// Schedule-level check of the step-size hypotheses; never blocks a run.
///
/// The variance bound `sigma_k` is a theoretical quantity and is not
/// measured: SAGA's correction makes it vanish at the solution, while plain
/// Prox-SGD keeps it bounded away from zero.
pub fn validate_ha(spec: &SolverSpec, e: &EmpiricalQuantities) -> HaReport {
    let step_bound = 2.0 / e.ln;
    let max_step = spec.gamma.sup();
    let step_range_ok = max_step > 0.0 && max_step < step_bound;
    let square_summable = matches!(spec.gamma, StepSchedule::Decaying { .. });
    let mut warnings = Vec::new();
    if !step_range_ok {
        warnings.push(format!("step {max_step:.4e} is not below 2/L_n = {step_bound:.4e}"));
    }
    match (spec.method, spec.gamma) {
        (Method::ProxSgd, StepSchedule::Constant { .. }) => warnings.push(
            "prox-sgd with a constant step: the gradient noise does not vanish and sum gamma_k^2 diverges; iterates will not converge"
                .into(),
        ),
        (Method::ProxSgd, StepSchedule::Decaying { .. }) => warnings.push(
            "prox-sgd: sum gamma_k^2 is finite under a constant-variance model, but the variance bound sigma_k does not tend to 0; expect convergence without identification"
                .into(),
        ),
        _ => {}
    }
    HaReport {
        step_bound,
        max_step,
        step_range_ok,
        square_summable,
        warnings,
    }
}

#[derive(Debug, Clone)]
pub struct FbSolution {
    pub w: Vector,
    pub iterations: usize,
    /// Upper bound on `|un - Cn w - lambda dR(w)|`-type stationarity of the
    /// returned point, `(1/gamma + L_n) |w_{k+1} - w_k| / lambda`.
    pub stationarity: f64,
    pub converged: bool,
}

/// Forward-backward with `gamma = 1.8 / L_n` run until the empirical
/// certificate of the iterate is within `tol` of `dR(w)`.
pub fn solve_fb_to_tolerance(
    reg: &Regularizer,
    lambda: f64,
    e: &EmpiricalQuantities,
    tol: f64,
    max_iters: usize,
) -> Result<FbSolution> {
    if !(lambda > 0.0) {
        return Err(Error::config("lambda must be positive"));
    }
    Error::check_dim(reg.dim(), e.un.len())?;
    let p = e.un.len();
    if e.ln == 0.0 {
        return Ok(FbSolution {
            w: Vector::zeros(p),
            iterations: 0,
            stationarity: 0.0,
            converged: true,
        });
    }
    let gamma = 1.8 / e.ln;
    let factor = (1.0 / gamma + e.ln) / lambda;
    let mut w = Vector::zeros(p);
    let mut stationarity = f64::INFINITY;
    for k in 1..=max_iters {
        let grad = &e.cn * &w - &e.un;
        let next = reg.prox(gamma * lambda, &(&w - grad * gamma))?;
        stationarity = factor * (&next - &w).norm();
        w = next;
        if !stationarity.is_finite() {
            return Err(Error::Diverged { step: k });
        }
        if stationarity <= tol {
            return Ok(FbSolution {
                w,
                iterations: k,
                stationarity,
                converged: true,
            });
        }
    }
    Ok(FbSolution {
        w,
        iterations: max_iters,
        stationarity,
        converged: false,
    })
}
