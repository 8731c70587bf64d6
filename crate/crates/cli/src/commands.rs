//! Command definitions and handlers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use gpml_core::asymptotics::{
    asymptotic_variance, bias_approximation, efficient_kappa, pseudo_true, PopulationContext, DEFAULT_DRAWS,
};
use gpml_core::dgp::{generate, CensorFamily, CensorSpec, DgpConfig};
use gpml_core::experiments::{
    run_bias_check, run_moment_check, run_phase_grid, run_sweep, CheckPlan, PhasePlan, ReplicationPlan, SweepAxis,
};
use gpml_core::selection::{cross_validate_with, default_grid, holdout_rmse, HoldoutResult, DEFAULT_FOLDS};
use gpml_core::solver::{bootstrap_se, fit, Termination};
use gpml_core::{Dataset, EstimatorSpec};
use nalgebra::DVector;
use serde::Serialize;

use crate::error::CliError;
use crate::io::{load_csv, write_dataset, write_rows};
use crate::transform::{transform, TransformRecord};

#[derive(Debug, Parser)]
#[command(
    name = "gpml",
    version,
    about = "Generalized pseudo-maximum-likelihood estimation and simulation",
    after_help = "Every subcommand also accepts --config <file.json>: a JSON object of flag values \
                  (e.g. {\"kappa\": 0.5, \"add_intercept\": true}) applied before the explicit flags."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one estimator to a CSV dataset and print JSON.
    Fit(FitArgs),
    /// Choose kappa by k-fold cross-validation.
    Cv(CvArgs),
    /// Draw one synthetic dataset and write it as CSV.
    Simulate(SimulateArgs),
    /// Monte Carlo sweep over one DGP parameter.
    Sweep(SweepArgs),
    /// Optimal kappa over an (alpha, tau) grid.
    Phase(PhaseArgs),
    /// Population moments at replication-average estimates.
    MomentCheck(CheckArgs),
    /// Monte Carlo bias against the first-order bias formula.
    BiasCheck(CheckArgs),
    /// Pseudo-true parameter, bias approximation and asymptotic variance.
    Asymptotics(AsymptoticsArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub data: PathBuf,
    /// Name of the outcome column; all other columns are covariates.
    #[arg(long, default_value = "y")]
    pub outcome: String,
    /// Prepend a column of ones.
    #[arg(long)]
    pub add_intercept: bool,
    /// Standardize covariates (population sd); the intercept is left alone.
    #[arg(long)]
    pub standardize: bool,
}

#[derive(Debug, Args)]
pub struct SolverArgs {
    #[arg(long, default_value_t = 0.0)]
    pub c: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, default_value_t = 200)]
    pub max_iter: usize,
}

impl SolverArgs {
    fn spec(&self, kappa: f64) -> Result<EstimatorSpec, CliError> {
        let spec = EstimatorSpec::default()
            .with_kappa(kappa)
            .with_c(self.c)
            .with_tol(self.tol)
            .with_max_iter(self.max_iter);
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub kappa: f64,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Number of bootstrap resamples for standard errors (0 = none).
    #[arg(long, default_value_t = 0)]
    pub bootstrap: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output path (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// `start:end:step` or a comma-separated list; default -1:1:0.05.
    #[arg(long, allow_hyphen_values = true)]
    pub grid: Option<String>,
    #[arg(long, default_value_t = DEFAULT_FOLDS)]
    pub k: usize,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Also report 80/20 holdout RMSE of the selected kappa over this many splits.
    #[arg(long, default_value_t = 0)]
    pub holdout_repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DgpArgs {
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// none, logistic_power, double_exponential or threshold.
    #[arg(long, default_value = "none")]
    pub censor: String,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    #[arg(long, default_value_t = 2.0)]
    pub beta: f64,
    /// Cut-off for threshold censoring.
    #[arg(long, default_value_t = 1.0)]
    pub threshold_c: f64,
    /// Comma-separated true parameter.
    #[arg(long, default_value = "1,1", allow_hyphen_values = true)]
    pub theta0: String,
}

impl DgpArgs {
    fn config(&self, n: usize, seed: u64) -> Result<DgpConfig, CliError> {
        let family: CensorFamily = self
            .censor
            .parse()
            .map_err(|e: gpml_core::Error| CliError::usage("--censor", e.to_string()))?;
        let censor = CensorSpec {
            family,
            tau: self.tau,
            beta: self.beta,
            threshold_c: self.threshold_c,
        };
        let config = DgpConfig {
            theta0: parse_list("--theta0", &self.theta0)?,
            alpha: self.alpha,
            censor,
            n,
            seed,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub dgp: DgpArgs,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub dgp: DgpArgs,
    /// alpha, tau, beta or kappa.
    #[arg(long)]
    pub axis: String,
    #[arg(long, allow_hyphen_values = true)]
    pub values: String,
    #[arg(long, default_value = "-1,-0.5,0,0.5,1", allow_hyphen_values = true)]
    pub kappas: String,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 200)]
    pub reps: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PhaseArgs {
    #[arg(long, default_value = "0,0.5,1,1.5,2")]
    pub alphas: String,
    #[arg(long, default_value = "0.5,1,2,4,8")]
    pub taus: String,
    #[arg(long, default_value = "-1:1:0.1", allow_hyphen_values = true)]
    pub kappa_grid: String,
    #[arg(long, default_value = "logistic_power")]
    pub censor: String,
    #[arg(long, default_value_t = 2.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 200)]
    pub reps: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long, default_value = "1,0,-1", allow_hyphen_values = true)]
    pub kappas: String,
    /// Comma-separated beta values; `none` gives an uncensored reference row.
    #[arg(long, default_value = "none,0.25,1,5,9")]
    pub betas: String,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 200)]
    pub reps: usize,
    /// Covariate draws for the population averages.
    #[arg(long, default_value_t = 10_000)]
    pub draws: usize,
    /// Fit kappa = -0.95 wherever kappa = -1 is requested.
    #[arg(long)]
    pub substitute_gamma: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AsymptoticsArgs {
    #[command(flatten)]
    pub dgp: DgpArgs,
    #[arg(long, default_value = "-1,-0.5,0,0.5,1", allow_hyphen_values = true)]
    pub kappas: String,
    #[arg(long, default_value_t = DEFAULT_DRAWS)]
    pub draws: usize,
    /// Seed of the covariate draws.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses a comma-separated list of reals.
pub fn parse_list(flag: &str, text: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| CliError::usage(flag, format!("'{}' is not a number", s.trim())))
        })
        .collect()
}

/// Parses `start:end:step` (inclusive) or a comma-separated list.
pub fn parse_grid(flag: &str, text: &str) -> Result<Vec<f64>, CliError> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() == 1 {
        return parse_list(flag, text);
    }
    if parts.len() != 3 {
        return Err(CliError::usage(flag, "expected start:end:step"));
    }
    let nums = parse_list(flag, &parts.join(","))?;
    let (start, end, step) = (nums[0], nums[1], nums[2]);
    if !(step > 0.0) || end < start {
        return Err(CliError::usage(flag, "need step > 0 and end >= start"));
    }
    let count = ((end - start) / step + 1e-9).floor() as usize + 1;
    // Rounding to 12 decimals keeps grid points such as 0.3 exact.
    Ok((0..count)
        .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
        .collect())
}

fn parse_betas(text: &str) -> Result<Vec<Option<f64>>, CliError> {
    text.split(',')
        .map(|s| match s.trim() {
            "none" => Ok(None),
            v => v
                .parse::<f64>()
                .map(Some)
                .map_err(|_| CliError::usage("--betas", format!("'{v}' is neither a number nor 'none'"))),
        })
        .collect()
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|source| CliError::Io {
            path: p.display().to_string(),
            source,
        })?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn io_error(path: Option<&Path>) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.map_or("stdout".into(), |p| p.display().to_string()),
        source,
    }
}

fn emit_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<(), CliError> {
    let mut out = open_output(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| CliError::Runtime(e.to_string()))?;
    writeln!(out).and_then(|_| out.flush()).map_err(io_error(path))
}

fn emit_csv<T: Serialize>(path: Option<&Path>, rows: &[T]) -> Result<(), CliError> {
    let mut out = open_output(path)?;
    write_rows(&mut out, rows).map_err(|e| CliError::Runtime(e.to_string()))?;
    out.flush().map_err(io_error(path))
}

#[derive(Serialize)]
struct Meta<'a, P: Serialize> {
    command: &'a str,
    generated_at: String,
    plan: &'a P,
}

/// Writes `<out>.meta.json` next to a CSV output; the only place timestamps appear.
fn emit_meta<P: Serialize>(out: Option<&Path>, command: &str, plan: &P) -> Result<(), CliError> {
    let Some(out) = out else { return Ok(()) };
    let mut path = out.as_os_str().to_owned();
    path.push(".meta.json");
    let meta = Meta {
        command,
        generated_at: chrono::Utc::now().to_rfc3339(),
        plan,
    };
    emit_json(Some(Path::new(&path)), &meta)
}

fn prepare(args: &DataArgs) -> Result<(Dataset, TransformRecord), CliError> {
    let raw = load_csv(&args.data, &args.outcome)?;
    transform(&raw, args.add_intercept, args.standardize)
}

fn to_vec(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

/// Fit output. The first nine fields are the stable schema.
#[derive(Debug, Serialize)]
pub struct FitOutput {
    pub theta_hat: Vec<f64>,
    pub std_errors: Option<Vec<f64>>,
    pub kappa: f64,
    pub c: f64,
    pub converged: bool,
    pub moment_norm: f64,
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub feature_names: Option<Vec<String>>,
    pub iterations: usize,
    pub termination: Termination,
    pub covariance: Option<Vec<Vec<f64>>>,
    pub bootstrap: Option<BootstrapOutput>,
    pub transform: TransformRecord,
    /// Coefficients on the untransformed covariates, when recoverable.
    pub theta_original: Option<Vec<f64>>,
}

#[derive(Debug, Serialize)]
pub struct BootstrapOutput {
    pub resamples: usize,
    pub std_errors: Vec<f64>,
    pub dropped: usize,
}

fn run_fit(args: &FitArgs) -> Result<(), CliError> {
    let spec = args.solver.spec(args.kappa)?;
    let (data, record) = prepare(&args.data)?;
    let result = fit(&data, &spec)?;
    let bootstrap = if args.bootstrap > 0 {
        let b = bootstrap_se(&data, &spec, args.bootstrap, args.seed)?;
        Some(BootstrapOutput {
            resamples: args.bootstrap,
            std_errors: to_vec(&b.std_errors),
            dropped: b.dropped,
        })
    } else {
        None
    };
    let output = FitOutput {
        theta_hat: to_vec(&result.theta_hat),
        std_errors: result.std_errors.as_ref().map(to_vec),
        kappa: spec.kappa,
        c: spec.c,
        converged: result.converged,
        moment_norm: result.moment_norm,
        n: data.n(),
        d: data.d(),
        seed: args.seed,
        feature_names: data.feature_names().map(<[String]>::to_vec),
        iterations: result.iterations,
        termination: result.trace.termination,
        covariance: result
            .covariance
            .as_ref()
            .map(|c| c.row_iter().map(|r| r.iter().copied().collect()).collect()),
        bootstrap,
        theta_original: if record.add_intercept || record.standardize {
            record.unmap(&result.theta_hat).as_ref().map(to_vec)
        } else {
            None
        },
        transform: record,
    };
    emit_json(args.out.as_deref(), &output)?;
    if !result.converged {
        return Err(CliError::Runtime(format!(
            "fit did not converge ({:?}, moment norm {:e})",
            result.trace.termination, result.moment_norm
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct CvOutput {
    pub selected_kappa: f64,
    pub kappa_grid: Vec<f64>,
    pub e_curve: Vec<Option<f64>>,
    pub per_fold: Vec<Vec<Option<f64>>>,
    pub failures: Vec<(usize, f64)>,
    pub k: usize,
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub holdout: Option<HoldoutOutput>,
}

#[derive(Debug, Serialize)]
pub struct HoldoutOutput {
    pub split_fraction: f64,
    pub repeats: usize,
    pub selected: HoldoutResult,
    pub poisson: HoldoutResult,
}

fn run_cv(args: &CvArgs) -> Result<(), CliError> {
    let grid = match &args.grid {
        Some(g) => parse_grid("--grid", g)?,
        None => default_grid(),
    };
    let base = args.solver.spec(0.0)?;
    let (data, _) = prepare(&args.data)?;
    let cv = cross_validate_with(&data, &grid, args.k, args.seed, &base)?;
    let holdout = if args.holdout_repeats > 0 {
        let split = 0.8;
        Some(HoldoutOutput {
            split_fraction: split,
            repeats: args.holdout_repeats,
            selected: holdout_rmse(&data, &base.with_kappa(cv.selected_kappa), split, args.seed, args.holdout_repeats)?,
            poisson: holdout_rmse(&data, &base.with_kappa(0.0), split, args.seed, args.holdout_repeats)?,
        })
    } else {
        None
    };
    emit_json(
        args.out.as_deref(),
        &CvOutput {
            selected_kappa: cv.selected_kappa,
            kappa_grid: cv.kappa_grid,
            e_curve: cv.e_curve,
            per_fold: cv.per_fold,
            failures: cv.failures,
            k: args.k,
            n: data.n(),
            d: data.d(),
            seed: args.seed,
            holdout,
        },
    )
}

fn run_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let config = args.dgp.config(args.n, args.seed)?;
    let sample = generate(&config)?;
    let path = args.out.as_deref();
    let mut out = open_output(path)?;
    write_dataset(&mut out, &sample.dataset, "y")
        .and_then(|_| out.flush())
        .map_err(io_error(path))?;
    emit_meta(path, "simulate", &config)
}

fn run_sweep_cmd(args: &SweepArgs) -> Result<(), CliError> {
    let axis: SweepAxis = args
        .axis
        .parse()
        .map_err(|e: gpml_core::Error| CliError::usage("--axis", e.to_string()))?;
    let values = parse_list("--values", &args.values)?;
    let kappas = parse_list("--kappas", &args.kappas)?;
    let config = args.dgp.config(args.n, args.seed)?;
    if matches!(axis, SweepAxis::Tau | SweepAxis::Beta) && config.censor.family == CensorFamily::None {
        return Err(CliError::usage("--axis", "tau and beta sweeps need a censoring family (--censor)"));
    }
    let plan = ReplicationPlan::new(config, axis, values, kappas)
        .with_reps(args.reps)
        .with_n(args.n)
        .with_seed(args.seed);
    let result = run_sweep(&plan)?;
    emit_csv(args.out.as_deref(), &result.rows)?;
    emit_meta(args.out.as_deref(), "sweep", &plan)
}

#[derive(Serialize)]
struct PhaseRow {
    alpha: f64,
    tau: f64,
    coord: usize,
    optimal_kappa: f64,
    rmse_at_opt: f64,
    band_min: f64,
    band_max: f64,
    warning: bool,
}

fn run_phase(args: &PhaseArgs) -> Result<(), CliError> {
    let family: CensorFamily = args
        .censor
        .parse()
        .map_err(|e: gpml_core::Error| CliError::usage("--censor", e.to_string()))?;
    let mut plan = PhasePlan::new(
        parse_list("--alphas", &args.alphas)?,
        parse_list("--taus", &args.taus)?,
        parse_grid("--kappa-grid", &args.kappa_grid)?,
        args.reps,
        args.n,
        args.seed,
    );
    plan.dgp.censor.family = family;
    plan.dgp.censor.beta = args.beta;
    let cells = run_phase_grid(&plan)?;
    let rows: Vec<PhaseRow> = cells
        .iter()
        .map(|c| PhaseRow {
            alpha: c.alpha,
            tau: c.tau,
            coord: c.coord,
            optimal_kappa: c.optimal_kappa,
            rmse_at_opt: c.rmse_at_opt,
            band_min: c.band.first().copied().unwrap_or(f64::NAN),
            band_max: c.band.last().copied().unwrap_or(f64::NAN),
            warning: c.warning,
        })
        .collect();
    emit_csv(args.out.as_deref(), &rows)?;
    emit_meta(args.out.as_deref(), "phase", &plan)
}

fn check_plan(args: &CheckArgs) -> CheckPlan {
    CheckPlan {
        alpha: args.alpha,
        tau: args.tau,
        reps: args.reps,
        n: args.n,
        base_seed: args.seed,
        draws: args.draws,
        substitute_gamma: args.substitute_gamma,
        ..CheckPlan::default()
    }
}

#[derive(Serialize)]
struct MomentRow {
    kappa_requested: f64,
    kappa_used: f64,
    beta: Option<f64>,
    moment_1: f64,
    moment_2: f64,
    n_converged: usize,
    reps: usize,
}

fn run_moment(args: &CheckArgs) -> Result<(), CliError> {
    let plan = check_plan(args);
    let rows = run_moment_check(&plan, &parse_list("--kappas", &args.kappas)?, &parse_betas(&args.betas)?)?;
    let rows: Vec<MomentRow> = rows
        .into_iter()
        .map(|r| MomentRow {
            kappa_requested: r.kappa_requested,
            kappa_used: r.kappa_used,
            beta: r.beta,
            moment_1: r.components[0],
            moment_2: r.components[1],
            n_converged: r.n_converged,
            reps: r.reps,
        })
        .collect();
    emit_csv(args.out.as_deref(), &rows)?;
    emit_meta(args.out.as_deref(), "moment-check", &plan)
}

fn run_bias(args: &CheckArgs) -> Result<(), CliError> {
    let plan = check_plan(args);
    let rows = run_bias_check(&plan, &parse_list("--kappas", &args.kappas)?, &parse_betas(&args.betas)?)?;
    emit_csv(args.out.as_deref(), &rows)?;
    emit_meta(args.out.as_deref(), "bias-check", &plan)
}

#[derive(Debug, Serialize)]
pub struct AsymptoticsRow {
    pub kappa: f64,
    pub pseudo_true: Vec<f64>,
    pub bias_approximation: Vec<f64>,
    pub asymptotic_variance: Vec<Vec<f64>>,
    pub variance_trace: f64,
}

#[derive(Debug, Serialize)]
pub struct AsymptoticsOutput {
    pub alpha: f64,
    pub censor: CensorSpec,
    pub draws: usize,
    pub seed: u64,
    pub efficient_kappa: f64,
    pub rows: Vec<AsymptoticsRow>,
}

fn run_asymptotics(args: &AsymptoticsArgs) -> Result<(), CliError> {
    let config = args.dgp.config(1, 0)?;
    if config.theta0.len() != 2 {
        return Err(CliError::usage("--theta0", "the built-in covariate law has 2 columns"));
    }
    let ctx = PopulationContext::new(&config.theta0, config.alpha, config.censor, args.draws, args.seed)?;
    let rows = parse_list("--kappas", &args.kappas)?
        .into_iter()
        .map(|k| {
            let v = asymptotic_variance(k, &ctx)?;
            Ok(AsymptoticsRow {
                kappa: k,
                pseudo_true: to_vec(&pseudo_true(k, &ctx)?),
                bias_approximation: to_vec(&bias_approximation(k, &ctx)?),
                variance_trace: v.trace(),
                asymptotic_variance: v.row_iter().map(|r| r.iter().copied().collect()).collect(),
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    emit_json(
        args.out.as_deref(),
        &AsymptoticsOutput {
            alpha: config.alpha,
            censor: config.censor,
            draws: args.draws,
            seed: args.seed,
            efficient_kappa: efficient_kappa(config.alpha),
            rows,
        },
    )
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Fit(a) => run_fit(a),
        Command::Cv(a) => run_cv(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Sweep(a) => run_sweep_cmd(a),
        Command::Phase(a) => run_phase(a),
        Command::MomentCheck(a) => run_moment(a),
        Command::BiasCheck(a) => run_bias(a),
        Command::Asymptotics(a) => run_asymptotics(a),
    }
}
