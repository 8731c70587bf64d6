//! Seeded Monte Carlo harness: parameter sweeps, the optimal-`kappa` phase
//! grid, and the population-moment and bias-formula checks.
//!
//! Replication `r` of every cell draws its data with seed `base_seed ^ r`,
//! so cells share random numbers and differences between cells are not
//! swamped by independent noise. Replications run in parallel and are
//! collected in index order before any statistic is computed.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::asymptotics::{bias_approximation, population_moments, PopulationContext, DEFAULT_DRAW_SEED};
use crate::dgp::{generate, CensorSpec, DgpConfig};
use crate::error::{Error, Result};
use crate::model::EstimatorSpec;
use crate::random::derive_seed;
use crate::selection::select_kappa;
use crate::solver::fit;

/// Share of non-converged replications above which a cell is flagged.
pub const WARNING_FAILURE_SHARE: f64 = 0.1;
/// Stand-in for `kappa = -1` when the gamma substitution is requested.
pub const GAMMA_SUBSTITUTE: f64 = -0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Alpha,
    Tau,
    Beta,
    Kappa,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::Alpha => "alpha",
            Self::Tau => "tau",
            Self::Beta => "beta",
            Self::Kappa => "kappa",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(Self::Alpha),
            "tau" => Ok(Self::Tau),
            "beta" => Ok(Self::Beta),
            "kappa" => Ok(Self::Kappa),
            other => Err(Error::InvalidParameter {
                name: "axis",
                reason: format!("unknown axis '{other}' (expected alpha, tau, beta or kappa)"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationPlan {
    /// Template; `n` and `seed` are replaced per replication, the swept field per cell.
    pub dgp: DgpConfig,
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    /// Estimators fitted in every cell; ignored on the `kappa` axis.
    pub kappa_set: Vec<f64>,
    pub reps: usize,
    pub n: usize,
    pub base_seed: u64,
    /// Solver controls; `kappa` is overridden per fit.
    pub spec: EstimatorSpec,
}

impl ReplicationPlan {
    pub fn new(dgp: DgpConfig, axis: SweepAxis, values: Vec<f64>, kappa_set: Vec<f64>) -> Self {
        Self {
            n: dgp.n,
            base_seed: dgp.seed,
            dgp,
            axis,
            values,
            kappa_set,
            reps: 200,
            spec: EstimatorSpec::default(),
        }
    }

    pub fn with_reps(mut self, reps: usize) -> Self {
        self.reps = reps;
        self
    }

    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        self
    }

    pub fn with_seed(mut self, base_seed: u64) -> Self {
        self.base_seed = base_seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::InvalidParameter {
                name: "reps",
                reason: "must be at least 1".into(),
            });
        }
        if self.values.is_empty() {
            return Err(Error::InvalidParameter {
                name: "values",
                reason: "sweep needs at least one value".into(),
            });
        }
        if self.axis != SweepAxis::Kappa && self.kappa_set.is_empty() {
            return Err(Error::InvalidParameter {
                name: "kappa_set",
                reason: "must not be empty".into(),
            });
        }
        validate_kappas(&self.kappa_set)?;
        if self.axis == SweepAxis::Kappa {
            validate_kappas(&self.values)?;
        }
        self.spec.validate()?;
        for &v in &self.values {
            self.cell(v).0.validate()?;
        }
        Ok(())
    }

    /// DGP and estimators for one cell of the sweep.
    fn cell(&self, value: f64) -> (DgpConfig, Vec<f64>) {
        let mut dgp = DgpConfig {
            n: self.n,
            seed: self.base_seed,
            ..self.dgp.clone()
        };
        let mut kappas = self.kappa_set.clone();
        match self.axis {
            SweepAxis::Alpha => dgp.alpha = value,
            SweepAxis::Tau => dgp.censor.tau = value,
            SweepAxis::Beta => dgp.censor.beta = value,
            SweepAxis::Kappa => kappas = vec![value],
        }
        (dgp, kappas)
    }
}

fn validate_kappas(kappas: &[f64]) -> Result<()> {
    match kappas.iter().find(|k| !(-1.0..=1.0).contains(*k)) {
        Some(k) => Err(Error::InvalidParameter {
            name: "kappa",
            reason: format!("{k} is outside [-1, 1]"),
        }),
        None => Ok(()),
    }
}

/// Per-replication estimates of one cell: `estimates[g][r]` is the fit of
/// `kappas[g]` on replication `r`, `None` when it did not converge.
#[derive(Debug, Clone, PartialEq)]
pub struct CellDraws {
    pub theta0: DVector<f64>,
    pub kappas: Vec<f64>,
    pub estimates: Vec<Vec<Option<DVector<f64>>>>,
}

/// Summary of one estimator and coordinate over the converged replications.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoordSummary {
    pub bias: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub std: f64,
    pub rmse: f64,
    /// Monte Carlo standard error of `bias`.
    pub bias_se: f64,
    /// Delta-method Monte Carlo standard error of `rmse`.
    pub rmse_se: f64,
    pub n_converged: usize,
}

impl CellDraws {
    pub fn reps(&self) -> usize {
        self.estimates.first().map_or(0, Vec::len)
    }

    pub fn converged(&self, g: usize) -> usize {
        self.estimates[g].iter().flatten().count()
    }

    /// Statistics for `kappas[g]`, coordinate `coord` (0-based). Fields are
    /// NaN when fewer than two replications converged.
    pub fn summary(&self, g: usize, coord: usize) -> CoordSummary {
        let errors: Vec<f64> = self.estimates[g]
            .iter()
            .flatten()
            .map(|t| t[coord] - self.theta0[coord])
            .collect();
        let count = errors.len();
        if count < 2 {
            return CoordSummary {
                bias: f64::NAN,
                std: f64::NAN,
                rmse: f64::NAN,
                bias_se: f64::NAN,
                rmse_se: f64::NAN,
                n_converged: count,
            };
        }
        let c = count as f64;
        let bias = errors.iter().sum::<f64>() / c;
        let var = errors.iter().map(|e| (e - bias).powi(2)).sum::<f64>() / (c - 1.0);
        let std = var.sqrt();
        let rmse = (bias * bias + var).sqrt();
        let sq_mean = errors.iter().map(|e| e * e).sum::<f64>() / c;
        let sq_var = errors.iter().map(|e| (e * e - sq_mean).powi(2)).sum::<f64>() / (c - 1.0);
        let rmse_se = if rmse > 0.0 {
            (sq_var / c).sqrt() / (2.0 * rmse)
        } else {
            0.0
        };
        CoordSummary {
            bias,
            std,
            rmse,
            bias_se: std / c.sqrt(),
            rmse_se,
            n_converged: count,
        }
    }

    /// Mean of the converged estimates of `kappas[g]`.
    pub fn mean_estimate(&self, g: usize) -> Option<DVector<f64>> {
        let kept: Vec<&DVector<f64>> = self.estimates[g].iter().flatten().collect();
        if kept.is_empty() {
            return None;
        }
        let sum = kept.iter().fold(DVector::zeros(self.theta0.len()), |acc, t| acc + *t);
        Some(sum / kept.len() as f64)
    }
}

/// Runs `reps` replications of `dgp` (seed `base_seed ^ r`) and fits every `kappa` on each.
pub fn simulate_cell(
    dgp: &DgpConfig,
    kappas: &[f64],
    reps: usize,
    base_seed: u64,
    spec: &EstimatorSpec,
) -> Result<CellDraws> {
    dgp.validate()?;
    validate_kappas(kappas)?;
    let per_rep: Vec<Vec<Option<DVector<f64>>>> = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let config = DgpConfig {
                seed: derive_seed(base_seed, r),
                ..dgp.clone()
            };
            let sample = match generate(&config) {
                Ok(s) => s,
                Err(_) => return vec![None; kappas.len()],
            };
            kappas
                .iter()
                .map(|&k| match fit(&sample.dataset, &spec.with_kappa(k)) {
                    Ok(f) if f.converged => Some(f.theta_hat),
                    _ => None,
                })
                .collect()
        })
        .collect();
    let estimates = (0..kappas.len())
        .map(|g| per_rep.iter().map(|row| row[g].clone()).collect())
        .collect();
    Ok(CellDraws {
        theta0: dgp.theta0_vector(),
        kappas: kappas.to_vec(),
        estimates,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub cell_param_name: String,
    pub cell_param_value: f64,
    pub kappa: f64,
    /// 1-based coordinate of theta.
    pub coord: usize,
    pub bias: f64,
    pub std: f64,
    pub rmse: f64,
    pub n_converged: usize,
    pub reps: usize,
    pub n: usize,
    pub base_seed: u64,
    /// More than 10% of the cell's replications failed for this `kappa`.
    pub warning: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub plan: ReplicationPlan,
    pub rows: Vec<SweepRow>,
}

pub fn run_sweep(plan: &ReplicationPlan) -> Result<SweepResult> {
    plan.validate()?;
    let mut rows = Vec::new();
    for &value in &plan.values {
        let (dgp, kappas) = plan.cell(value);
        let draws = simulate_cell(&dgp, &kappas, plan.reps, plan.base_seed, &plan.spec)?;
        for (g, &kappa) in kappas.iter().enumerate() {
            let failed = plan.reps - draws.converged(g);
            let warning = failed as f64 > WARNING_FAILURE_SHARE * plan.reps as f64;
            for coord in 0..dgp.theta0.len() {
                let s = draws.summary(g, coord);
                rows.push(SweepRow {
                    cell_param_name: plan.axis.name().to_string(),
                    cell_param_value: value,
                    kappa,
                    coord: coord + 1,
                    bias: s.bias,
                    std: s.std,
                    rmse: s.rmse,
                    n_converged: s.n_converged,
                    reps: plan.reps,
                    n: plan.n,
                    base_seed: plan.base_seed,
                    warning,
                });
            }
        }
    }
    Ok(SweepResult {
        plan: plan.clone(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseCell {
    pub alpha: f64,
    pub tau: f64,
    /// 1-based coordinate of theta.
    pub coord: usize,
    pub optimal_kappa: f64,
    pub rmse_at_opt: f64,
    /// RMSE per grid point (`None` when fewer than two replications converged).
    pub rmse: Vec<Option<f64>>,
    pub rmse_se: Vec<Option<f64>>,
    /// Contiguous grid points around the optimum whose RMSE is within one
    /// Monte Carlo standard error (of the optimum's RMSE) of the minimum.
    pub band: Vec<f64>,
    pub warning: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhasePlan {
    /// Template; `alpha` and `censor.tau` are set per cell.
    pub dgp: DgpConfig,
    pub alpha_values: Vec<f64>,
    pub tau_values: Vec<f64>,
    pub kappa_grid: Vec<f64>,
    pub reps: usize,
    pub n: usize,
    pub base_seed: u64,
    pub spec: EstimatorSpec,
}

impl PhasePlan {
    /// Logistic-power censoring with `beta = 2`, `theta0 = (1, 1)`.
    pub fn new(alpha_values: Vec<f64>, tau_values: Vec<f64>, kappa_grid: Vec<f64>, reps: usize, n: usize, base_seed: u64) -> Self {
        Self {
            dgp: DgpConfig {
                censor: CensorSpec::logistic_power(1.0, 2.0),
                ..DgpConfig::default()
            },
            alpha_values,
            tau_values,
            kappa_grid,
            reps,
            n,
            base_seed,
            spec: EstimatorSpec::default(),
        }
    }
}

/// Index range of the contiguous run around `best` where `rmse <= limit`.
fn contiguous_band(rmse: &[Option<f64>], best: usize, limit: f64) -> std::ops::RangeInclusive<usize> {
    let inside = |g: usize| matches!(rmse[g], Some(r) if r <= limit);
    let mut lo = best;
    while lo > 0 && inside(lo - 1) {
        lo -= 1;
    }
    let mut hi = best;
    while hi + 1 < rmse.len() && inside(hi + 1) {
        hi += 1;
    }
    lo..=hi
}

/// Optimal `kappa` per `(alpha, tau)` cell and coordinate, rows ordered by alpha, tau, coordinate.
pub fn run_phase_grid(plan: &PhasePlan) -> Result<Vec<PhaseCell>> {
    if plan.alpha_values.is_empty() || plan.tau_values.is_empty() || plan.kappa_grid.is_empty() {
        return Err(Error::InvalidParameter {
            name: "grid",
            reason: "alpha, tau and kappa grids must be non-empty".into(),
        });
    }
    if plan.reps < 2 {
        return Err(Error::InvalidParameter {
            name: "reps",
            reason: "need at least 2 replications".into(),
        });
    }
    plan.spec.validate()?;
    let mut cells = Vec::new();
    for &alpha in &plan.alpha_values {
        for &tau in &plan.tau_values {
            let mut dgp = DgpConfig {
                alpha,
                n: plan.n,
                seed: plan.base_seed,
                ..plan.dgp.clone()
            };
            dgp.censor.tau = tau;
            let draws = simulate_cell(&dgp, &plan.kappa_grid, plan.reps, plan.base_seed, &plan.spec)?;
            let warning = (0..plan.kappa_grid.len())
                .any(|g| (plan.reps - draws.converged(g)) as f64 > WARNING_FAILURE_SHARE * plan.reps as f64);
            for coord in 0..dgp.theta0.len() {
                let summaries: Vec<CoordSummary> =
                    (0..plan.kappa_grid.len()).map(|g| draws.summary(g, coord)).collect();
                let rmse: Vec<Option<f64>> = summaries.iter().map(|s| Some(s.rmse).filter(|v| v.is_finite())).collect();
                let rmse_se: Vec<Option<f64>> =
                    summaries.iter().map(|s| Some(s.rmse_se).filter(|v| v.is_finite())).collect();
                let best = select_kappa(&plan.kappa_grid, &rmse).ok_or(Error::AllCandidatesFailed)?;
                let best_rmse = rmse[best].expect("selected point has a value");
                let limit = best_rmse + rmse_se[best].unwrap_or(0.0);
                let band = contiguous_band(&rmse, best, limit).map(|g| plan.kappa_grid[g]).collect();
                cells.push(PhaseCell {
                    alpha,
                    tau,
                    coord: coord + 1,
                    optimal_kappa: plan.kappa_grid[best],
                    rmse_at_opt: best_rmse,
                    rmse,
                    rmse_se,
                    band,
                    warning,
                });
            }
        }
    }
    Ok(cells)
}

/// Settings shared by the moment and bias checks. Censoring is logistic
/// power with the given `tau`; each check row sets `beta`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckPlan {
    pub theta0: Vec<f64>,
    pub alpha: f64,
    pub tau: f64,
    pub reps: usize,
    pub n: usize,
    pub base_seed: u64,
    /// Covariate draws for the population averages.
    pub draws: usize,
    /// Fit `kappa = -0.95` wherever `kappa = -1` is requested.
    pub substitute_gamma: bool,
    pub spec: EstimatorSpec,
}

impl Default for CheckPlan {
    fn default() -> Self {
        Self {
            theta0: vec![1.0, 1.0],
            alpha: 1.0,
            tau: 1.0,
            reps: 200,
            n: 1000,
            base_seed: 0,
            draws: 10_000,
            substitute_gamma: false,
            spec: EstimatorSpec::default(),
        }
    }
}

impl CheckPlan {
    fn kappa_used(&self, kappa: f64) -> f64 {
        if self.substitute_gamma && kappa == -1.0 {
            GAMMA_SUBSTITUTE
        } else {
            kappa
        }
    }

    fn censor(&self, beta: Option<f64>) -> CensorSpec {
        match beta {
            Some(b) => CensorSpec::logistic_power(self.tau, b),
            None => CensorSpec::none(),
        }
    }

    fn simulate(&self, kappas: &[f64], beta: Option<f64>) -> Result<CellDraws> {
        let dgp = DgpConfig {
            theta0: self.theta0.clone(),
            alpha: self.alpha,
            censor: self.censor(beta),
            n: self.n,
            seed: self.base_seed,
        };
        simulate_cell(&dgp, kappas, self.reps, self.base_seed, &self.spec)
    }

    fn context(&self, beta: Option<f64>) -> Result<PopulationContext> {
        PopulationContext::new(&self.theta0, self.alpha, self.censor(beta), self.draws, DEFAULT_DRAW_SEED)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentCheckRow {
    pub kappa_requested: f64,
    pub kappa_used: f64,
    /// `None` for the uncensored reference row.
    pub beta: Option<f64>,
    /// Population moments at the replication-average estimate.
    pub components: Vec<f64>,
    pub n_converged: usize,
    pub reps: usize,
}

/// Averages the estimates over replications and evaluates the population
/// moments there. `beta_values` entries of `None` give uncensored rows.
pub fn run_moment_check(plan: &CheckPlan, kappa_set: &[f64], beta_values: &[Option<f64>]) -> Result<Vec<MomentCheckRow>> {
    validate_kappas(kappa_set)?;
    let used: Vec<f64> = kappa_set.iter().map(|&k| plan.kappa_used(k)).collect();
    let mut rows = Vec::new();
    for &beta in beta_values {
        let draws = plan.simulate(&used, beta)?;
        let ctx = plan.context(beta)?;
        for (g, &k) in kappa_set.iter().enumerate() {
            let components = match draws.mean_estimate(g) {
                Some(avg) => population_moments(&avg, used[g], &ctx)?.iter().copied().collect(),
                None => vec![f64::NAN; plan.theta0.len()],
            };
            rows.push(MomentCheckRow {
                kappa_requested: k,
                kappa_used: used[g],
                beta,
                components,
                n_converged: draws.converged(g),
                reps: plan.reps,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasCheckRow {
    pub kappa_requested: f64,
    pub kappa_used: f64,
    pub beta: Option<f64>,
    /// 1-based coordinate of theta.
    pub coord: usize,
    pub mc_bias: f64,
    pub mc_se: f64,
    pub analytic_bias: f64,
    pub abs_gap: f64,
    /// `abs_gap / |mc_bias|`.
    pub rel_gap: f64,
    pub n_converged: usize,
    pub reps: usize,
}

/// Monte Carlo bias against the first-order bias formula per `(kappa, beta)`.
pub fn run_bias_check(plan: &CheckPlan, kappa_set: &[f64], beta_values: &[Option<f64>]) -> Result<Vec<BiasCheckRow>> {
    validate_kappas(kappa_set)?;
    let used: Vec<f64> = kappa_set.iter().map(|&k| plan.kappa_used(k)).collect();
    let mut rows = Vec::new();
    for &beta in beta_values {
        let draws = plan.simulate(&used, beta)?;
        let ctx = plan.context(beta)?;
        for (g, &k) in kappa_set.iter().enumerate() {
            let analytic = bias_approximation(used[g], &ctx)?;
            for coord in 0..plan.theta0.len() {
                let s = draws.summary(g, coord);
                let gap = (analytic[coord] - s.bias).abs();
                rows.push(BiasCheckRow {
                    kappa_requested: k,
                    kappa_used: used[g],
                    beta,
                    coord: coord + 1,
                    mc_bias: s.bias,
                    mc_se: s.bias_se,
                    analytic_bias: analytic[coord],
                    abs_gap: gap,
                    rel_gap: gap / s.bias.abs(),
                    n_converged: s.n_converged,
                    reps: plan.reps,
                });
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_plan(axis: SweepAxis, values: Vec<f64>) -> ReplicationPlan {
        ReplicationPlan::new(DgpConfig::default(), axis, values, vec![0.0, 1.0])
            .with_reps(6)
            .with_n(200)
            .with_seed(11)
    }

    #[test]
    fn sweep_row_count_and_identity() {
        let result = run_sweep(&tiny_plan(SweepAxis::Alpha, vec![0.0, 1.0, 2.0])).unwrap();
        assert_eq!(result.rows.len(), 3 * 2 * 2);
        for row in &result.rows {
            let lhs = row.rmse * row.rmse;
            let rhs = row.bias * row.bias + row.std * row.std;
            assert!((lhs - rhs).abs() <= 1e-10 * rhs.max(f64::MIN_POSITIVE));
            assert!(row.n_converged <= row.reps);
        }
    }

    #[test]
    fn kappa_axis_fits_one_estimator_per_cell() {
        let result = run_sweep(&tiny_plan(SweepAxis::Kappa, vec![-0.5, 0.5])).unwrap();
        assert_eq!(result.rows.len(), 2 * 2);
        assert_eq!(result.rows[0].kappa, -0.5);
        assert_eq!(result.rows[3].kappa, 0.5);
    }

    #[test]
    fn sweep_is_reproducible() {
        let plan = tiny_plan(SweepAxis::Alpha, vec![1.0]);
        assert_eq!(run_sweep(&plan).unwrap(), run_sweep(&plan).unwrap());
    }

    #[test]
    fn invalid_plans_rejected() {
        assert!(run_sweep(&tiny_plan(SweepAxis::Alpha, vec![])).is_err());
        assert!(run_sweep(&tiny_plan(SweepAxis::Alpha, vec![-1.0])).is_err());
        assert!(run_sweep(&tiny_plan(SweepAxis::Kappa, vec![2.0])).is_err());
        assert!(run_sweep(&tiny_plan(SweepAxis::Alpha, vec![1.0]).with_reps(0)).is_err());
    }

    #[test]
    fn band_is_contiguous() {
        let rmse = [Some(3.0), Some(1.05), Some(1.0), Some(1.02), None, Some(1.0)];
        assert_eq!(contiguous_band(&rmse, 2, 1.06), 1..=3);
    }

    #[test]
    fn summary_of_too_few_fits_is_nan() {
        let draws = CellDraws {
            theta0: DVector::from_vec(vec![1.0]),
            kappas: vec![0.0],
            estimates: vec![vec![Some(DVector::from_vec(vec![1.2])), None]],
        };
        let s = draws.summary(0, 0);
        assert!(s.bias.is_nan());
        assert_eq!(s.n_converged, 1);
    }

    #[test]
    fn gamma_substitution_is_explicit() {
        let mut plan = CheckPlan::default();
        assert_eq!(plan.kappa_used(-1.0), -1.0);
        plan.substitute_gamma = true;
        assert_eq!(plan.kappa_used(-1.0), GAMMA_SUBSTITUTE);
        assert_eq!(plan.kappa_used(0.0), 0.0);
    }
}
