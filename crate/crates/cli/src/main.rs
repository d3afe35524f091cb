use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::{json, Value};
use stratatrack::certificate::{
    empirical_certificate, irrepresentable_check, solve_population_certificate, CertificateSolverConfig,
};
use stratatrack::harness::{run_consistency_sweep, run_figure1, run_figure2, ExperimentConfig};
use stratatrack::problem::{
    empirical, generate_ground_truth, sample_dataset, toeplitz_covariance, AmplitudeLaw, Dataset, PopulationModel,
};
use stratatrack::solver::{run, Method, RelaxationSchedule, SolverSpec, StepSchedule};
use stratatrack::strata::{sandwich_check, Side};
use stratatrack::{Error, Matrix, Regularizer, StratumTolerance, Vector};

/// Stratum identification for l1 / nuclear-norm regularized least squares.
#[derive(Parser)]
#[command(name = "stratatrack", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a ground truth and a Gaussian dataset.
    Generate(GenerateArgs),
    /// Run FB, Prox-SGD or SAGA on a dataset.
    Solve(SolveArgs),
    /// Population certificate for a ground truth.
    Certificate(CertificateArgs),
    /// Check the stratum sandwich for a solution.
    Check(CheckArgs),
    /// Regenerate the solver-comparison (1) or replication (2) experiment.
    Reproduce(ReproduceArgs),
    /// Consistency sweep over sample sizes.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum RegKind {
    L1,
    Nuclear,
}

#[derive(Args)]
struct RegArgs {
    #[arg(long, value_enum, default_value = "l1")]
    reg: RegKind,
    /// Matrix shape `RxC` for the nuclear norm (default: square)
    #[arg(long)]
    shape: Option<String>,
}

impl RegArgs {
    /// The regularizer acting on vectors of length `dim`.
    fn build(&self, dim: usize) -> Result<Regularizer, Failure> {
        match self.reg {
            RegKind::L1 => Ok(Regularizer::l1(dim)),
            RegKind::Nuclear => {
                let (r, c) = match &self.shape {
                    Some(s) => parse_shape(s)?,
                    None => {
                        let side = (dim as f64).sqrt().round() as usize;
                        if side * side != dim {
                            return Err(Failure::usage(format!(
                                "dimension {dim} is not square; pass --shape RxC"
                            )));
                        }
                        (side, side)
                    }
                };
                if r * c != dim {
                    return Err(Failure::usage(format!("shape {r}x{c} does not match dimension {dim}")));
                }
                Ok(Regularizer::nuclear(r, c))
            }
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DataFormat {
    Csv,
    Binary,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    reg: RegArgs,
    /// Dimension for l1 (ignored for the nuclear norm)
    #[arg(long, default_value_t = 100)]
    p: usize,
    #[arg(long, default_value_t = 50)]
    n: usize,
    /// Support size (l1) or rank (nuclear)
    #[arg(long, default_value_t = 10)]
    s: usize,
    #[arg(long, default_value_t = 1e-2)]
    noise: f64,
    /// Toeplitz feature correlation; identity covariance when absent
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value = "csv")]
    format: DataFormat,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    reg: RegArgs,
    /// Dataset: `.csv`, or the `.json` header of a binary dataset
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    lambda: f64,
    #[arg(long, default_value = "fb")]
    method: String,
    /// Constant step; per-method default when neither this nor --gamma-a is set
    #[arg(long, conflicts_with = "gamma_a")]
    gamma: Option<f64>,
    /// Decaying step `a / (k + b)`
    #[arg(long, requires = "gamma_b")]
    gamma_a: Option<f64>,
    #[arg(long, requires = "gamma_a")]
    gamma_b: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Passes over the data (full steps for FB)
    #[arg(long, default_value_t = 400)]
    batches: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    record_every: Option<usize>,
    /// Writes `trace.csv` and `state.json` here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CertificateArgs {
    #[command(flatten)]
    reg: RegArgs,
    /// Ground truth: a JSON array or an object with a `w0` field
    #[arg(long)]
    w0: PathBuf,
    /// `identity`, or a covariance file (JSON rows or headerless CSV)
    #[arg(long, default_value = "identity")]
    cov: String,
    /// Safety margin for the irrepresentable check
    #[arg(long, default_value_t = 0.0)]
    margin: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    reg: RegArgs,
    #[arg(long)]
    w0: PathBuf,
    /// Certificate JSON (`eta` field) or array
    #[arg(long)]
    eta0: PathBuf,
    /// Final state JSON (`z`/`w` field) or array
    #[arg(long)]
    solution: PathBuf,
}

#[derive(Args)]
struct ReproduceArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    figure: u8,
    #[arg(long, value_enum, default_value = "l1")]
    reg: RegKind,
    /// JSON overrides merged over the preset
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "l1")]
    reg: RegKind,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

/// Exit status classes: usage problems (2) vs. mathematical failures (1).
#[derive(Debug)]
enum Failure {
    Usage(String),
    Math(String),
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Failure::Usage(msg.into())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_)
            | Error::ComplexityOutOfRange { .. }
            | Error::DimensionMismatch { .. }
            | Error::Format(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_)
            | Error::InvalidStratum(_)
            | Error::StratumMismatch(_) => Failure::Usage(e.to_string()),
            _ => Failure::Math(e.to_string()),
        }
    }
}

fn parse_shape(s: &str) -> Result<(usize, usize), Failure> {
    let bad = || Failure::usage(format!("bad shape {s:?}, expected RxC"));
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let r: usize = r.trim().parse().map_err(|_| bad())?;
    let c: usize = c.trim().parse().map_err(|_| bad())?;
    Ok((r, c))
}

fn read_json(path: &Path) -> Result<Value, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

/// A bare array, or the first of `keys` present in an object.
fn read_vector(path: &Path, keys: &[&str]) -> Result<Vector, Failure> {
    let v = read_json(path)?;
    let arr = match &v {
        Value::Array(_) => &v,
        Value::Object(map) => keys
            .iter()
            .find_map(|k| map.get(*k))
            .ok_or_else(|| Failure::usage(format!("{}: none of {keys:?} found", path.display())))?,
        _ => return Err(Failure::usage(format!("{}: expected an array or object", path.display()))),
    };
    let vals: Vec<f64> = serde_json::from_value(arr.clone())
        .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    Ok(Vector::from_vec(vals))
}

fn read_matrix(path: &Path) -> Result<Matrix, Failure> {
    let rows: Vec<Vec<f64>> = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_value(read_json(path)?).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?
    } else {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Failure::usage(e.to_string()))?;
            let row: Result<Vec<f64>, _> = rec.iter().map(|f| f.trim().parse::<f64>()).collect();
            rows.push(row.map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?);
        }
        rows
    };
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Failure::usage(format!("{}: covariance must be square", path.display())));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(Matrix::from_row_slice(n, n, &flat))
}

fn load_dataset(path: &Path) -> Result<Dataset, Failure> {
    let d = if path.extension().is_some_and(|e| e == "json") {
        Dataset::load_binary(path)?
    } else {
        Dataset::load_csv(path)?
    };
    Ok(d)
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(v).map_err(Error::from)? + "\n";
    std::fs::write(path, text).map_err(Error::from)?;
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<(), Failure> {
    let reg = match a.reg.reg {
        RegKind::L1 => Regularizer::l1(a.p),
        RegKind::Nuclear => {
            let (r, c) = parse_shape(a.reg.shape.as_deref().unwrap_or("20x20"))?;
            Regularizer::nuclear(r, c)
        }
    };
    reg.validate()?;
    if a.n == 0 {
        return Err(Failure::usage("--n must be positive"));
    }
    let w0 = generate_ground_truth(&reg, a.s, AmplitudeLaw::RandomSign, a.seed)?;
    let model = match a.rho {
        None => PopulationModel::gaussian_iid(w0.clone(), a.noise)?,
        Some(rho) => PopulationModel::with_covariance(w0.clone(), toeplitz_covariance(reg.dim(), rho), a.noise)?,
    };
    let data = sample_dataset(&model, a.n, a.seed)?;
    std::fs::create_dir_all(&a.out).map_err(Error::from)?;
    let dataset_path = match a.format {
        DataFormat::Csv => {
            let p = a.out.join("dataset.csv");
            data.save_csv(&p)?;
            p
        }
        DataFormat::Binary => data.save_binary(&a.out, "dataset")?,
    };
    let stratum = reg.stratum_of(&w0, &StratumTolerance::default())?;
    write_json(
        &a.out.join("ground_truth.json"),
        &json!({
            "regularizer": reg,
            "s": a.s,
            "seed": a.seed,
            "noise_std": a.noise,
            "rho": a.rho,
            "stratum": stratum,
            "w0": w0.as_slice(),
        }),
    )?;
    println!("dataset {}", dataset_path.display());
    println!("ground truth {}", a.out.join("ground_truth.json").display());
    Ok(())
}

fn solve(a: SolveArgs) -> Result<(), Failure> {
    let method: Method = a
        .method
        .parse()
        .map_err(|_| Failure::usage(format!("unknown method {:?} (fb, proxsgd, saga)", a.method)))?;
    let data = load_dataset(&a.input)?;
    let reg = a.reg.build(data.p())?;
    let e = empirical(&data)?;
    let mut spec = SolverSpec::with_defaults(method, &e, a.batches, a.seed);
    if let Some(g) = a.gamma {
        spec.gamma = StepSchedule::Constant { gamma: g };
    }
    if let (Some(ga), Some(gb)) = (a.gamma_a, a.gamma_b) {
        spec.gamma = StepSchedule::Decaying { a: ga, b: gb };
    }
    spec.alpha = RelaxationSchedule::Constant { alpha: a.alpha };
    spec.record_every = a.record_every;
    let tol = StratumTolerance::default();
    info!("{} on n={} p={} for {} iterations", method.name(), data.n(), data.p(), spec.iterations);
    let out = match run(&reg, a.lambda, &data, &e, &spec, &tol) {
        Ok(out) => out,
        Err(fail) => {
            if let Some(dir) = &a.out {
                std::fs::create_dir_all(dir).map_err(Error::from)?;
                fail.partial.save_csv(&dir.join("trace.csv"))?;
            }
            return Err(fail.error.into());
        }
    };
    let w = Vector::from_column_slice(&out.summary.w);
    let cert = empirical_certificate(&reg, a.lambda, &e, &w, &tol)?;
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir).map_err(Error::from)?;
        out.trace.save_csv(&dir.join("trace.csv"))?;
        write_json(&dir.join("state.json"), &out.summary)?;
        write_json(&dir.join("certificate.json"), &cert)?;
    }
    let s = &out.summary;
    println!("method {}", method.name());
    println!("iterations {}", s.k);
    println!("stratum {}", s.stratum);
    println!("R0 {}", s.r0);
    println!("objective {:.12e}", s.objective);
    println!("dual_residual {:.3e}", s.dual_residual);
    println!("kkt_residual {:.3e}", cert.kkt_residual);
    Ok(())
}

fn certificate(a: CertificateArgs) -> Result<(), Failure> {
    let w0 = read_vector(&a.w0, &["w0", "w"])?;
    let reg = a.reg.build(w0.len())?;
    let c = if a.cov == "identity" {
        Matrix::identity(w0.len(), w0.len())
    } else {
        read_matrix(Path::new(&a.cov))?
    };
    if c.nrows() != w0.len() {
        return Err(Error::DimensionMismatch {
            expected: w0.len(),
            found: c.nrows(),
        }
        .into());
    }
    let tol = StratumTolerance::default();
    let mut cert = solve_population_certificate(&reg, &w0, &c, &CertificateSolverConfig::default(), &tol)?;
    let ic = irrepresentable_check(&reg, &w0, &cert, a.margin, &tol)?;
    cert.ic = Some(ic);
    if let Some(path) = &a.out {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(Error::from)?;
        }
        write_json(path, &cert)?;
    }
    println!("dual stratum {}", cert.dual_stratum);
    println!("kkt_residual {:.3e}", cert.kkt_residual);
    println!("ic {} (margin {:.6})", if ic.holds { "holds" } else { "fails" }, ic.margin);
    Ok(())
}

fn check(a: CheckArgs) -> Result<bool, Failure> {
    let w0 = read_vector(&a.w0, &["w0", "w"])?;
    let eta0 = read_vector(&a.eta0, &["eta", "eta0"])?;
    let sol = read_vector(&a.solution, &["z", "w"])?;
    let reg = a.reg.build(w0.len())?;
    if eta0.len() != w0.len() || sol.len() != w0.len() {
        return Err(Error::DimensionMismatch {
            expected: w0.len(),
            found: if eta0.len() != w0.len() { eta0.len() } else { sol.len() },
        }
        .into());
    }
    let tol = StratumTolerance::default();
    let low = reg.stratum_of(&w0, &tol)?;
    let mid = reg.stratum_of(&sol, &tol)?;
    let dual = reg.dual_stratum_of(&reg.project_dual_ball(&eta0)?, &tol)?;
    let high = reg.mirror_map_inverse(&dual)?;
    debug_assert_eq!(high.side, Side::Primal);
    let ok = sandwich_check(&low, &mid, &dual, &reg)?;
    println!("lower  {low}");
    println!("middle {mid}");
    println!("upper  {high}");
    println!("sandwich {}", if ok { "holds" } else { "violated" });
    Ok(ok)
}

fn load_config(path: Option<&Path>, reg: RegKind) -> Result<ExperimentConfig, Failure> {
    let cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => match reg {
            RegKind::L1 => ExperimentConfig::l1_default(),
            RegKind::Nuclear => ExperimentConfig::nuclear_default(),
        },
    };
    Ok(cfg)
}

fn reproduce(a: ReproduceArgs) -> Result<(), Failure> {
    let mut cfg = load_config(a.config.as_deref(), a.reg)?;
    if let Some(r) = a.replications {
        cfg.replications = r;
    }
    if a.threads.is_some() {
        cfg.threads = a.threads;
    }
    let report = if a.figure == 1 {
        run_figure1(&cfg, Some(&a.out))?.report
    } else {
        run_figure2(&cfg, Some(&a.out))?.report
    };
    let agg = &report.aggregate;
    println!("status {:?}", report.status);
    println!("replications {} solved {} retained {}", agg.replications, agg.solved, agg.retained);
    for g in &agg.delta_groups {
        println!(
            "delta {} retained {} exact {:.3} within_bounds {:.3}",
            g.delta, g.retained, g.exact_rate, g.within_bounds_rate
        );
    }
    println!("report {}", a.out.join("report.json").display());
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<(), Failure> {
    let mut cfg = load_config(a.config.as_deref(), a.reg)?;
    if a.threads.is_some() {
        cfg.threads = a.threads;
    }
    let grid = cfg.n_grid.clone();
    let report = run_consistency_sweep(&cfg, &grid)?;
    let path = report.save(&a.out)?;
    for p in &report.points {
        println!(
            "n {} lambda {:.4e} w_error {:.4e} eta_error {:.4e} sandwich {:.3}",
            p.n, p.lambda, p.median_w_error, p.median_eta_error, p.sandwich_rate
        );
    }
    println!("report {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a).map(|_| true),
        Command::Solve(a) => solve(a).map(|_| true),
        Command::Certificate(a) => certificate(a).map(|_| true),
        Command::Check(a) => check(a),
        Command::Reproduce(a) => reproduce(a).map(|_| true),
        Command::Sweep(a) => sweep(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Math(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
