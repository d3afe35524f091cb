//! Experiment orchestration: random instances, certificates, solver runs,
//! sandwich checks, replication sweeps and report files.
//!
//! Replication `r` uses seed `base_seed + r` for everything it draws, and
//! replications are fanned out on a rayon pool whose size comes from the
//! config or the `STRATATRACK_THREADS` environment variable. Results are
//! collected in replication order, so reports do not depend on the pool size.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::certificate::{self, Certificate, CertificateSolverConfig};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::problem::{
    empirical, generate_ground_truth, sample_dataset, toeplitz_covariance, AmplitudeLaw, Dataset,
    EmpiricalQuantities, PopulationModel,
};
use crate::regularizer::{Regularizer, StratumTolerance};
use crate::solver::{self, Method, SolverSpec, SolverTrace, StepSchedule};
use crate::strata::{complexity, sandwich_check, Stratum};

pub const THREADS_ENV: &str = "STRATATRACK_THREADS";

/// Feature covariance of the population model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CovarianceSpec {
    Identity,
    /// `C_ij = rho^|i-j|`
    Toeplitz { rho: f64 },
}

/// Which covariance enters the certificate problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CertificateCovariance {
    /// The design Gram matrix `Cn` of the drawn sample (fixed design).
    Empirical,
    /// The population covariance of the feature law.
    Population,
}

/// `lambda_n = lambda0 * n^(-exponent)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub lambda0: f64,
    pub exponent: f64,
}

impl LambdaSchedule {
    pub fn at(&self, n: usize) -> f64 {
        self.lambda0 * (n as f64).powf(-self.exponent)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverChoice {
    pub method: Method,
    /// Overrides the per-method default step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<StepSchedule>,
}

impl SolverChoice {
    pub fn default_for(method: Method) -> Self {
        SolverChoice { method, gamma: None }
    }

    pub fn spec(&self, e: &EmpiricalQuantities, batches: usize, seed: u64) -> SolverSpec {
        let mut spec = SolverSpec::with_defaults(self.method, e, batches, seed);
        if let Some(g) = self.gamma {
            spec.gamma = g;
        }
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub regularizer: Regularizer,
    pub n: usize,
    pub s: usize,
    pub lambda: f64,
    /// Used by the consistency sweep instead of `lambda`.
    pub lambda_schedule: LambdaSchedule,
    pub noise_std: f64,
    pub amplitude: AmplitudeLaw,
    pub covariance: CovarianceSpec,
    pub certificate_covariance: CertificateCovariance,
    pub solvers: Vec<SolverChoice>,
    /// Passes over the data (full-gradient steps for FB).
    pub batches: usize,
    pub replications: usize,
    pub base_seed: u64,
    /// Figure-2 selection: keep replications whose `delta` is listed.
    pub delta_targets: Vec<usize>,
    pub n_grid: Vec<usize>,
    /// Stationarity target for the FB reference solves of the sweep.
    pub fb_tolerance: f64,
    pub fb_max_iters: usize,
    pub tolerance: StratumTolerance,
    pub certificate: CertificateSolverConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn all_solvers() -> Vec<SolverChoice> {
    [Method::Fb, Method::ProxSgd, Method::Saga]
        .into_iter()
        .map(SolverChoice::default_for)
        .collect()
}

impl ExperimentConfig {
    /// Sparse setup: p = 100, n = 50, s = 10, lambda = 0.2.
    pub fn l1_default() -> Self {
        ExperimentConfig {
            regularizer: Regularizer::l1(100),
            n: 50,
            s: 10,
            lambda: 0.2,
            lambda_schedule: LambdaSchedule {
                lambda0: 1.0,
                exponent: 1.0 / 3.0,
            },
            noise_std: 1e-2,
            amplitude: AmplitudeLaw::RandomSign,
            covariance: CovarianceSpec::Identity,
            certificate_covariance: CertificateCovariance::Empirical,
            solvers: all_solvers(),
            batches: 400,
            replications: 200,
            base_seed: 1,
            delta_targets: vec![0, 10],
            n_grid: vec![50, 100, 200, 400, 800],
            fb_tolerance: 1e-9,
            fb_max_iters: 1_000_000,
            tolerance: StratumTolerance::default(),
            certificate: CertificateSolverConfig::default(),
            threads: None,
            output_dir: None,
        }
    }

    /// Low-rank setup: 20 x 20, n = 300, rank 4, lambda = 0.03.
    pub fn nuclear_default() -> Self {
        ExperimentConfig {
            regularizer: Regularizer::nuclear(20, 20),
            n: 300,
            s: 4,
            lambda: 0.03,
            batches: 600,
            replications: 50,
            delta_targets: vec![0, 3],
            ..Self::l1_default()
        }
    }

    pub fn preset(kind: &str) -> Result<Self> {
        match kind {
            "l1" => Ok(Self::l1_default()),
            "nuclear" => Ok(Self::nuclear_default()),
            other => Err(Error::config(format!("unknown regularizer {other:?} (expected l1 or nuclear)"))),
        }
    }

    /// Parses a JSON config; missing fields are taken from the preset of the
    /// regularizer kind it names (`l1` when absent).
    pub fn from_json(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text)?;
        let Value::Object(fields) = user else {
            return Err(Error::Format("experiment config must be a JSON object".into()));
        };
        let kind = fields
            .get("regularizer")
            .and_then(|r| r.get("kind"))
            .and_then(Value::as_str)
            .unwrap_or("l1");
        let mut merged = serde_json::to_value(Self::preset(kind)?)?;
        let target = merged.as_object_mut().expect("config serializes to an object");
        for (k, v) in fields {
            target.insert(k, v);
        }
        let cfg: ExperimentConfig = serde_json::from_value(merged)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.regularizer.validate()?;
        let bound = self.regularizer.complexity_bound();
        if self.s > bound {
            return Err(Error::ComplexityOutOfRange { s: self.s, bound });
        }
        if self.n == 0 || self.batches == 0 || self.replications == 0 {
            return Err(Error::config("n, batches and replications must be positive"));
        }
        if !(self.lambda > 0.0) || !(self.lambda_schedule.lambda0 > 0.0) {
            return Err(Error::config("lambda must be positive"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("noise_std must be nonnegative"));
        }
        if let CovarianceSpec::Toeplitz { rho } = self.covariance {
            if !(rho.abs() < 1.0) {
                return Err(Error::config("toeplitz rho must lie in (-1, 1)"));
            }
        }
        if self.n_grid.windows(2).any(|w| w[0] >= w[1]) || self.n_grid.contains(&0) {
            return Err(Error::config("n_grid must be positive and strictly increasing"));
        }
        if self.threads == Some(0) {
            return Err(Error::config("threads must be positive"));
        }
        Ok(())
    }

    pub fn seed(&self, rep: usize) -> u64 {
        self.base_seed.wrapping_add(rep as u64)
    }

    fn population_covariance(&self) -> Matrix {
        let p = self.regularizer.dim();
        match self.covariance {
            CovarianceSpec::Identity => Matrix::identity(p, p),
            CovarianceSpec::Toeplitz { rho } => toeplitz_covariance(p, rho),
        }
    }

    pub fn model(&self, w0: Vector) -> Result<PopulationModel> {
        match self.covariance {
            CovarianceSpec::Identity => PopulationModel::gaussian_iid(w0, self.noise_std),
            CovarianceSpec::Toeplitz { .. } => {
                PopulationModel::with_covariance(w0, self.population_covariance(), self.noise_std)
            }
        }
    }
}

/// Runs `f` on a pool sized by `threads`, else `STRATATRACK_THREADS`, else
/// the number of cores.
pub fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let from_env = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&t| t > 0)
                .ok_or_else(|| Error::config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?,
        ),
        Err(_) => None,
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = from_env.or(threads) {
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::config(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// One random problem with its certificate and sandwich bounds.
#[derive(Debug, Clone)]
pub struct Instance {
    pub seed: u64,
    pub w0: Vector,
    pub model: PopulationModel,
    pub data: Dataset,
    pub empirical: EmpiricalQuantities,
    pub certificate: Certificate,
    pub lower: Stratum,
    /// `J*(M*_eta0)`, the primal stratum mapped back from the certificate.
    pub upper: Stratum,
}

impl Instance {
    pub fn bounds(&self) -> (usize, usize) {
        (self.lower.size(), self.upper.size())
    }

    /// `R0(upper) - R0(lower)`; never negative since `eta0 ∈ dR(w0)`.
    pub fn delta(&self) -> usize {
        self.upper.size().saturating_sub(self.lower.size())
    }
}

/// Ground truth, population model and sample of one replication.
#[derive(Debug, Clone)]
pub struct Problem {
    pub seed: u64,
    pub w0: Vector,
    pub model: PopulationModel,
    pub data: Dataset,
    pub empirical: EmpiricalQuantities,
}

pub fn draw_problem(cfg: &ExperimentConfig, seed: u64) -> Result<Problem> {
    let w0 = generate_ground_truth(&cfg.regularizer, cfg.s, cfg.amplitude, seed)?;
    let model = cfg.model(w0.clone())?;
    let data = sample_dataset(&model, cfg.n, seed)?;
    let empirical = empirical(&data)?;
    Ok(Problem {
        seed,
        w0,
        model,
        data,
        empirical,
    })
}

/// Solves the certificate problem for a drawn problem.
pub fn certify(cfg: &ExperimentConfig, problem: Problem) -> Result<Instance> {
    let reg = &cfg.regularizer;
    let c = match cfg.certificate_covariance {
        CertificateCovariance::Empirical => &problem.empirical.cn,
        CertificateCovariance::Population => &problem.model.covariance,
    };
    let certificate =
        certificate::solve_population_certificate(reg, &problem.w0, c, &cfg.certificate, &cfg.tolerance)?;
    let lower = reg.stratum_of(&problem.w0, &cfg.tolerance)?;
    let upper = reg.mirror_map_inverse(&certificate.dual_stratum)?;
    Ok(Instance {
        seed: problem.seed,
        w0: problem.w0,
        model: problem.model,
        data: problem.data,
        empirical: problem.empirical,
        certificate,
        lower,
        upper,
    })
}

pub fn generate_instance(cfg: &ExperimentConfig, seed: u64) -> Result<Instance> {
    certify(cfg, draw_problem(cfg, seed)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverRow {
    pub method: Method,
    pub final_stratum: Stratum,
    #[serde(rename = "final_R0")]
    pub final_r0: usize,
    pub sandwich_ok: bool,
    pub identification_batch: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRow {
    pub replication: usize,
    pub seed: u64,
    /// `None` when the certificate problem could not be solved.
    pub w0_stratum: Option<Stratum>,
    pub eta0_dual_stratum: Option<Stratum>,
    #[serde(rename = "R0_bounds")]
    pub r0_bounds: Option<(usize, usize)>,
    pub delta: Option<usize>,
    pub ic_margin: Option<f64>,
    pub retained: bool,
    pub solvers: Vec<SolverRow>,
    pub sandwich_ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ReplicationRow {
    fn from_instance(rep: usize, inst: &Instance) -> Self {
        ReplicationRow {
            replication: rep,
            seed: inst.seed,
            w0_stratum: Some(inst.lower.clone()),
            eta0_dual_stratum: Some(inst.certificate.dual_stratum.clone()),
            r0_bounds: Some(inst.bounds()),
            delta: Some(inst.delta()),
            ic_margin: inst.certificate.ic.map(|ic| ic.margin),
            retained: true,
            solvers: Vec::new(),
            sandwich_ok: true,
            error: None,
        }
    }

    fn failed(rep: usize, seed: u64, err: &Error) -> Self {
        ReplicationRow {
            replication: rep,
            seed,
            w0_stratum: None,
            eta0_dual_stratum: None,
            r0_bounds: None,
            delta: None,
            ic_margin: None,
            retained: false,
            solvers: Vec::new(),
            sandwich_ok: false,
            error: Some(err.to_string()),
        }
    }

    /// Recomputes every sandwich flag from the stored strata.
    pub fn recheck(&self, reg: &Regularizer) -> Result<bool> {
        let (Some(low), Some(high)) = (&self.w0_stratum, &self.eta0_dual_stratum) else {
            return Ok(self.solvers.is_empty());
        };
        let mut all = true;
        for s in &self.solvers {
            let ok = sandwich_check(low, &s.final_stratum, high, reg)?;
            if ok != s.sandwich_ok {
                return Ok(false);
            }
            all &= ok;
        }
        Ok(all == self.sandwich_ok)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverAggregate {
    pub method: Method,
    pub runs: usize,
    pub sandwich_rate: f64,
    #[serde(rename = "median_final_R0")]
    pub median_final_r0: Option<f64>,
    pub median_identification_batch: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaGroup {
    pub delta: usize,
    pub retained: usize,
    /// Fraction of runs whose final stratum equals the true one.
    pub exact_rate: f64,
    /// Fraction of runs whose final complexity lies in `[R0(w0), R0(w0)+delta]`.
    pub within_bounds_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub replications: usize,
    pub solved: usize,
    pub retained: usize,
    #[serde(rename = "median_R0_lower")]
    pub median_lower: Option<f64>,
    #[serde(rename = "median_R0_upper")]
    pub median_upper: Option<f64>,
    pub median_delta: Option<f64>,
    pub solvers: Vec<SolverAggregate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub delta_groups: Vec<DeltaGroup>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportStatus {
    Ok,
    /// No replication passed the selection filter.
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub status: ReportStatus,
    pub config: ExperimentConfig,
    pub rows: Vec<ReplicationRow>,
    pub aggregate: Aggregate,
}

impl ExperimentReport {
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join("report.json");
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let m = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    })
}

fn aggregate(rows: &[ReplicationRow], methods: &[Method], delta_targets: Option<&[usize]>) -> Aggregate {
    let solved: Vec<&ReplicationRow> = rows.iter().filter(|r| r.r0_bounds.is_some()).collect();
    let retained: Vec<&ReplicationRow> = solved.iter().copied().filter(|r| r.retained).collect();
    let collect = |f: &dyn Fn(&ReplicationRow) -> f64| -> Option<f64> {
        median(&mut solved.iter().map(|r| f(r)).collect::<Vec<_>>())
    };
    let solvers = methods
        .iter()
        .map(|&m| {
            let runs: Vec<&SolverRow> = retained
                .iter()
                .flat_map(|r| r.solvers.iter().filter(move |s| s.method == m))
                .collect();
            let ok = runs.iter().filter(|s| s.sandwich_ok).count();
            SolverAggregate {
                method: m,
                runs: runs.len(),
                sandwich_rate: if runs.is_empty() { 0.0 } else { ok as f64 / runs.len() as f64 },
                median_final_r0: median(&mut runs.iter().map(|s| s.final_r0 as f64).collect::<Vec<_>>()),
                median_identification_batch: median(
                    &mut runs.iter().filter_map(|s| s.identification_batch).collect::<Vec<_>>(),
                ),
            }
        })
        .collect();
    let delta_groups = delta_targets
        .unwrap_or(&[])
        .iter()
        .map(|&d| {
            let group: Vec<&&ReplicationRow> = retained.iter().filter(|r| r.delta == Some(d)).collect();
            let runs: Vec<(usize, &SolverRow, &Stratum)> = group
                .iter()
                .flat_map(|r| {
                    let low = r.w0_stratum.as_ref().expect("solved rows carry strata");
                    r.solvers.iter().map(move |s| (r.r0_bounds.unwrap().0, s, low))
                })
                .collect();
            let rate = |pred: &dyn Fn(&(usize, &SolverRow, &Stratum)) -> bool| {
                if runs.is_empty() {
                    0.0
                } else {
                    runs.iter().filter(|x| pred(x)).count() as f64 / runs.len() as f64
                }
            };
            DeltaGroup {
                delta: d,
                retained: group.len(),
                exact_rate: rate(&|(_, s, low)| &s.final_stratum == *low),
                within_bounds_rate: rate(&|(lo, s, _)| s.final_r0 >= *lo && s.final_r0 <= lo + d),
            }
        })
        .collect();
    Aggregate {
        replications: rows.len(),
        solved: solved.len(),
        retained: retained.len(),
        median_lower: collect(&|r| r.r0_bounds.unwrap().0 as f64),
        median_upper: collect(&|r| r.r0_bounds.unwrap().1 as f64),
        median_delta: collect(&|r| r.delta.unwrap() as f64),
        solvers,
        delta_groups,
    }
}

/// Result of one solver on one instance.
#[derive(Debug, Clone)]
pub struct SolverRun {
    pub method: Method,
    pub trace: SolverTrace,
    pub w: Vector,
    pub row: SolverRow,
}

/// Runs one solver on a drawn problem with the configured parameters.
pub fn run_on_problem(
    cfg: &ExperimentConfig,
    data: &Dataset,
    e: &EmpiricalQuantities,
    seed: u64,
    choice: &SolverChoice,
) -> std::result::Result<solver::RunOutput, solver::SolverFailure> {
    // solver streams are keyed by replication seed and method
    let seed = seed.wrapping_mul(4).wrapping_add(choice.method as u64);
    let spec = choice.spec(e, cfg.batches, seed);
    solver::run(&cfg.regularizer, cfg.lambda, data, e, &spec, &cfg.tolerance)
}

pub fn run_solver(cfg: &ExperimentConfig, inst: &Instance, choice: &SolverChoice, rep: usize) -> Result<SolverRun> {
    let out = run_on_problem(cfg, &inst.data, &inst.empirical, inst.seed, choice).map_err(|f| {
        log::warn!("replication {rep}: {} failed after {} records", choice.method.name(), f.partial.points.len());
        f.error
    })?;
    let final_stratum = out.summary.stratum.clone();
    let sandwich_ok = sandwich_check(
        &inst.lower,
        &final_stratum,
        &inst.certificate.dual_stratum,
        &cfg.regularizer,
    )?;
    Ok(SolverRun {
        method: choice.method,
        row: SolverRow {
            method: choice.method,
            final_r0: complexity(&final_stratum)?,
            final_stratum,
            sandwich_ok,
            identification_batch: out.trace.identification_batch(),
        },
        w: out.state.w,
        trace: out.trace,
    })
}

fn trace_path(dir: &Path, method: Method, rep: usize) -> PathBuf {
    dir.join("traces").join(format!("{}_{rep}.csv", method.name()))
}

/// A single instance run with every configured solver.
#[derive(Debug, Clone)]
pub struct Figure1Output {
    pub report: ExperimentReport,
    pub instance: Instance,
    pub runs: Vec<SolverRun>,
}

/// Single-instance comparison of the configured solvers. With `out`, writes
/// `traces/<solver>_0.csv`, `report.json` and `plot.gp`; traces of solvers
/// that finished are kept on disk even when a later one fails.
pub fn run_figure1(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Figure1Output> {
    cfg.validate()?;
    with_pool(cfg.threads, || figure1_inner(cfg, out))?
}

fn figure1_inner(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Figure1Output> {
    let inst = generate_instance(cfg, cfg.seed(0))?;
    if let Some(dir) = out {
        fs::create_dir_all(dir.join("traces"))?;
    }
    let results: Vec<Result<SolverRun>> = cfg
        .solvers
        .par_iter()
        .map(|choice| {
            let run = run_solver(cfg, &inst, choice, 0)?;
            if let Some(dir) = out {
                run.trace.save_csv(&trace_path(dir, run.method, 0))?;
            }
            Ok(run)
        })
        .collect();
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut row = ReplicationRow::from_instance(0, &inst);
    row.solvers = runs.iter().map(|r| r.row.clone()).collect();
    row.sandwich_ok = row.solvers.iter().all(|s| s.sandwich_ok);
    let methods: Vec<Method> = cfg.solvers.iter().map(|s| s.method).collect();
    let rows = vec![row];
    let report = ExperimentReport {
        experiment: "figure1".into(),
        status: ReportStatus::Ok,
        config: cfg.clone(),
        aggregate: aggregate(&rows, &methods, None),
        rows,
    };
    if let Some(dir) = out {
        report.save(dir)?;
        fs::write(dir.join("plot.gp"), figure1_plot(cfg, &inst, &methods))?;
    }
    Ok(Figure1Output {
        report,
        instance: inst,
        runs,
    })
}

fn figure1_plot(cfg: &ExperimentConfig, inst: &Instance, methods: &[Method]) -> String {
    let (lo, hi) = inst.bounds();
    let mut s = String::new();
    let _ = writeln!(s, "# gnuplot script; run from this directory: gnuplot plot.gp");
    let _ = writeln!(s, "set datafile separator ','");
    let _ = writeln!(s, "set terminal pngcairo size 900,600");
    let _ = writeln!(s, "set output 'figure1.png'");
    let _ = writeln!(s, "set xlabel 'batch'");
    let _ = writeln!(s, "set ylabel 'R0'");
    let _ = writeln!(s, "set key outside");
    let _ = writeln!(s, "set title '{} (lambda = {})'", cfg.regularizer.name(), cfg.lambda);
    let mut parts = Vec::new();
    for m in methods {
        let color = match m {
            Method::Fb => "blue",
            Method::ProxSgd => "purple",
            Method::Saga => "red",
        };
        parts.push(format!(
            "'traces/{}_0.csv' using 1:3 skip 1 with lines lw 2 lc rgb '{color}' title '{}'",
            m.name(),
            m.name()
        ));
    }
    parts.push(format!("{lo} with lines dt 3 lc rgb 'black' title 'R0(w0)'"));
    parts.push(format!("{hi} with lines dt 2 lc rgb 'black' title 'R0(J*(M*eta0))'"));
    let _ = writeln!(s, "plot {}", parts.join(", \\\n     "));
    s
}

/// Output of the replication sweep: report plus per-trajectory and averaged
/// complexity curves.
#[derive(Debug, Clone)]
pub struct Figure2Output {
    pub report: ExperimentReport,
    /// `(replication, delta, R0 per recorded batch)` for each retained run.
    pub trajectories: Vec<(usize, usize, Vec<f64>)>,
    pub batches: Vec<f64>,
    /// Pointwise mean of the trajectories of each target delta (empty groups
    /// are omitted).
    pub averages: Vec<(usize, Vec<f64>)>,
}

/// Replications filtered by `delta`, with SAGA (or the configured
/// stochastic solver, the last one listed) run on every retained instance.
/// With `out`, writes `traces/<solver>_<rep>.csv`, `averaged.csv`,
/// `report.json` and `plot.gp`.
pub fn run_figure2(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Figure2Output> {
    cfg.validate()?;
    with_pool(cfg.threads, || figure2_inner(cfg, out))?
}

fn figure2_solver(cfg: &ExperimentConfig) -> SolverChoice {
    cfg.solvers
        .iter()
        .rev()
        .find(|s| s.method == Method::Saga)
        .or(cfg.solvers.last())
        .cloned()
        .unwrap_or_else(|| SolverChoice::default_for(Method::Saga))
}

fn figure2_inner(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Figure2Output> {
    let choice = figure2_solver(cfg);
    if let Some(dir) = out {
        fs::create_dir_all(dir.join("traces"))?;
    }
    let results: Vec<Result<(ReplicationRow, Option<SolverTrace>)>> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| {
            let seed = cfg.seed(rep);
            let inst = match generate_instance(cfg, seed) {
                Ok(inst) => inst,
                Err(err @ (Error::CertificateInfeasible { .. } | Error::CertificateNotConverged { .. })) => {
                    log::info!("replication {rep}: {err}");
                    return Ok((ReplicationRow::failed(rep, seed, &err), None));
                }
                Err(err) => return Err(err),
            };
            let mut row = ReplicationRow::from_instance(rep, &inst);
            row.retained = cfg.delta_targets.contains(&inst.delta());
            if !row.retained {
                return Ok((row, None));
            }
            let run = run_solver(cfg, &inst, &choice, rep)?;
            if let Some(dir) = out {
                run.trace.save_csv(&trace_path(dir, run.method, rep))?;
            }
            row.sandwich_ok = run.row.sandwich_ok;
            row.solvers.push(run.row);
            Ok((row, Some(run.trace)))
        })
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(results.len());
    let mut trajectories = Vec::new();
    let mut batches: Vec<f64> = Vec::new();
    for (row, trace) in results {
        if let Some(trace) = trace {
            if batches.is_empty() {
                batches = trace.points.iter().map(|p| p.batch).collect();
            }
            let r0 = trace.points.iter().map(|p| p.r0 as f64).collect();
            trajectories.push((row.replication, row.delta.expect("retained rows are solved"), r0));
        }
        rows.push(row);
    }
    let averages: Vec<(usize, Vec<f64>)> = cfg
        .delta_targets
        .iter()
        .filter_map(|&d| {
            let group: Vec<&Vec<f64>> = trajectories.iter().filter(|t| t.1 == d).map(|t| &t.2).collect();
            if group.is_empty() {
                return None;
            }
            let mut mean = vec![0.0; batches.len()];
            for traj in &group {
                for (m, v) in mean.iter_mut().zip(traj.iter()) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= group.len() as f64);
            Some((d, mean))
        })
        .collect();

    let status = if trajectories.is_empty() {
        ReportStatus::Empty
    } else {
        ReportStatus::Ok
    };
    let report = ExperimentReport {
        experiment: "figure2".into(),
        status,
        config: cfg.clone(),
        aggregate: aggregate(&rows, &[choice.method], Some(&cfg.delta_targets)),
        rows,
    };
    let output = Figure2Output {
        report,
        trajectories,
        batches,
        averages,
    };
    if let Some(dir) = out {
        output.report.save(dir)?;
        write_averages(&dir.join("averaged.csv"), &output)?;
        fs::write(dir.join("plot.gp"), figure2_plot(&output, choice.method))?;
    }
    Ok(output)
}

fn write_averages(path: &Path, out: &Figure2Output) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["batch".to_string()];
    header.extend(out.averages.iter().map(|(d, _)| format!("delta_{d}")));
    w.write_record(&header)?;
    for (i, b) in out.batches.iter().enumerate() {
        let mut rec = vec![b.to_string()];
        rec.extend(out.averages.iter().map(|(_, m)| m[i].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn figure2_plot(out: &Figure2Output, method: Method) -> String {
    let palette = ["blue", "red", "dark-green", "orange", "purple"];
    let color = |d: usize| {
        let idx = out.averages.iter().position(|(x, _)| *x == d).unwrap_or(0);
        palette[idx % palette.len()]
    };
    let mut s = String::new();
    let _ = writeln!(s, "# gnuplot script; run from this directory: gnuplot plot.gp");
    let _ = writeln!(s, "set datafile separator ','");
    let _ = writeln!(s, "set terminal pngcairo size 900,600");
    let _ = writeln!(s, "set output 'figure2.png'");
    let _ = writeln!(s, "set xlabel 'batch'");
    let _ = writeln!(s, "set ylabel 'R0'");
    let mut parts = Vec::new();
    for (rep, d, _) in &out.trajectories {
        parts.push(format!(
            "'traces/{}_{rep}.csv' using 1:3 skip 1 with lines lw 0.5 lc rgb '{}' notitle",
            method.name(),
            color(*d)
        ));
    }
    for (i, (d, _)) in out.averages.iter().enumerate() {
        parts.push(format!(
            "'averaged.csv' using 1:{} skip 1 with lines lw 3 lc rgb '{}' title 'delta = {d}'",
            i + 2,
            color(*d)
        ));
    }
    if parts.is_empty() {
        let _ = writeln!(s, "# no retained replications");
    } else {
        let _ = writeln!(s, "plot {}", parts.join(", \\\n     "));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub replication: usize,
    pub w_error: f64,
    pub eta_error: f64,
    pub sandwich_ok: bool,
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n: usize,
    pub lambda: f64,
    pub median_w_error: f64,
    pub median_eta_error: f64,
    pub sandwich_rate: f64,
    pub cells: Vec<SweepCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub w0: Vec<f64>,
    pub eta0: Vec<f64>,
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join("sweep.json");
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }
}

/// Consistency trend over sample sizes: one ground truth (drawn from
/// `base_seed`), datasets of size `n` from seeds `base_seed + r`, each solved
/// by FB to `fb_tolerance` at `lambda_n`, compared with `w0` and with the
/// certificate of the population covariance.
pub fn run_consistency_sweep(cfg: &ExperimentConfig, n_grid: &[usize]) -> Result<SweepReport> {
    cfg.validate()?;
    if n_grid.is_empty() || n_grid.windows(2).any(|w| w[0] >= w[1]) || n_grid.contains(&0) {
        return Err(Error::config("n_grid must be nonempty, positive and strictly increasing"));
    }
    with_pool(cfg.threads, || sweep_inner(cfg, n_grid))?
}

fn sweep_inner(cfg: &ExperimentConfig, n_grid: &[usize]) -> Result<SweepReport> {
    let reg = &cfg.regularizer;
    let w0 = generate_ground_truth(reg, cfg.s, cfg.amplitude, cfg.base_seed)?;
    let model = cfg.model(w0.clone())?;
    let eta0 = certificate::solve_population_certificate(reg, &w0, &model.covariance, &cfg.certificate, &cfg.tolerance)?;
    let eta0_vec = eta0.eta_vector();
    let lower = reg.stratum_of(&w0, &cfg.tolerance)?;

    let mut points = Vec::with_capacity(n_grid.len());
    for &n in n_grid {
        let lambda = cfg.lambda_schedule.at(n);
        let cells: Vec<Result<SweepCell>> = (0..cfg.replications)
            .into_par_iter()
            .map(|rep| {
                let data = sample_dataset(&model, n, cfg.seed(rep))?;
                let e = empirical(&data)?;
                let sol = solver::solve_fb_to_tolerance(reg, lambda, &e, cfg.fb_tolerance, cfg.fb_max_iters)?;
                if !sol.converged {
                    log::warn!("n = {n}, replication {rep}: FB stopped at stationarity {:.3e}", sol.stationarity);
                }
                let emp = certificate::empirical_certificate(reg, lambda, &e, &sol.w, &cfg.tolerance)?;
                let stratum = reg.stratum_of(&sol.w, &cfg.tolerance)?;
                Ok(SweepCell {
                    replication: rep,
                    w_error: (&sol.w - &w0).norm(),
                    eta_error: (emp.eta_vector() - &eta0_vec).norm(),
                    sandwich_ok: sandwich_check(&lower, &stratum, &eta0.dual_stratum, reg)?,
                    kkt_residual: emp.kkt_residual,
                })
            })
            .collect();
        let cells = cells.into_iter().collect::<Result<Vec<_>>>()?;
        let ok = cells.iter().filter(|c| c.sandwich_ok).count();
        points.push(SweepPoint {
            n,
            lambda,
            median_w_error: median(&mut cells.iter().map(|c| c.w_error).collect::<Vec<_>>()).unwrap_or(f64::NAN),
            median_eta_error: median(&mut cells.iter().map(|c| c.eta_error).collect::<Vec<_>>()).unwrap_or(f64::NAN),
            sandwich_rate: ok as f64 / cells.len().max(1) as f64,
            cells,
        });
    }
    Ok(SweepReport {
        w0: w0.as_slice().to_vec(),
        eta0: eta0.eta,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            regularizer: Regularizer::l1(8),
            n: 40,
            s: 2,
            lambda: 0.05,
            batches: 30,
            replications: 3,
            delta_targets: vec![0, 1, 2],
            threads: Some(1),
            ..ExperimentConfig::l1_default()
        }
    }

    #[test]
    fn medians() {
        assert_eq!(median(&mut []), None);
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    #[test]
    fn config_json_merges_over_preset() {
        let cfg = ExperimentConfig::from_json(r#"{"regularizer":{"kind":"nuclear","rows":20,"cols":20},"replications":3}"#).unwrap();
        assert_eq!(cfg.n, 300);
        assert_eq!(cfg.replications, 3);
        assert_eq!(cfg.delta_targets, vec![0, 3]);
        assert!(ExperimentConfig::from_json(r#"{"s":500}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"bogus":1}"#).is_err());
        assert!(ExperimentConfig::from_json("[1]").is_err());
        let back = ExperimentConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn lambda_schedule() {
        let s = LambdaSchedule {
            lambda0: 2.0,
            exponent: 0.5,
        };
        assert!((s.at(100) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn figure1_rows_recheck() {
        let cfg = tiny();
        let out = run_figure1(&cfg, None).unwrap();
        assert_eq!(out.report.rows.len(), 1);
        assert_eq!(out.runs.len(), 3);
        assert!(out.report.rows[0].recheck(&cfg.regularizer).unwrap());
    }

    #[test]
    fn figure2_single_replication_has_one_row() {
        let mut cfg = tiny();
        cfg.replications = 1;
        cfg.delta_targets = (0..=8).collect();
        let out = run_figure2(&cfg, None).unwrap();
        assert_eq!(out.report.rows.len(), 1);
    }

    #[test]
    fn figure2_empty_selection_is_reported() {
        let mut cfg = tiny();
        cfg.delta_targets = vec![100];
        let out = run_figure2(&cfg, None).unwrap();
        assert_eq!(out.report.status, ReportStatus::Empty);
        assert!(out.trajectories.is_empty());
    }
}
