//! Root-finding for the estimating equations.
//!
//! Every fit starts from the Poisson solution (a concave problem started at
//! `theta = 0`) and then walks `kappa` toward its target in steps of
//! `continuation_step`, running a damped Newton iteration on `m(theta) = 0`
//! at each stop. Step acceptance requires a strict decrease of `||m||_inf`,
//! so the same machinery serves `c > 0`, where no objective exists.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Dataset, EstimatorSpec, FitResult};
use crate::moments::{accumulate, score_outer_product};
use crate::random::{seeded_rng, RESAMPLE_STREAM};

/// Singular-value ratio below which a matrix is treated as singular.
pub const RANK_THRESHOLD: f64 = 1e-10;
/// Smallest step length tried by the backtracking line search.
pub const MIN_STEP: f64 = 1.0 / (1u64 << 30) as f64;
/// Intermediate continuation stops are solved to this multiple of the final tolerance.
const CONTINUATION_SLACK: f64 = 1e3;
/// Share of bootstrap resamples allowed to fail.
pub const BOOTSTRAP_FAILURE_BUDGET: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIter,
    LineSearchFailed,
    NonFinite,
    /// The moment Jacobian became numerically singular (e.g. the gamma
    /// objective flattening out when most outcomes are zero).
    FlatRegion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Poisson,
    Continuation,
    Refinement,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub phase: Phase,
    pub kappa: f64,
    pub theta: Vec<f64>,
    pub moment_norm: f64,
    /// Accepted step length; 0 for the record opening a stage.
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverTrace {
    pub records: Vec<IterationRecord>,
    pub termination: Termination,
}

impl SolverTrace {
    fn new() -> Self {
        Self {
            records: Vec::new(),
            termination: Termination::MaxIter,
        }
    }

    fn push(&mut self, phase: Phase, kappa: f64, theta: &DVector<f64>, moment_norm: f64, step: f64) {
        self.records.push(IterationRecord {
            phase,
            kappa,
            theta: theta.iter().copied().collect(),
            moment_norm,
            step,
        });
    }

    /// Number of accepted Newton steps.
    pub fn steps(&self) -> usize {
        self.records.iter().filter(|r| r.step > 0.0).count()
    }
}

/// Errors when `x` is numerically rank deficient, naming the null-space direction.
pub fn check_full_rank(x: &DMatrix<f64>) -> Result<()> {
    let svd = x.clone().svd(false, true);
    let s = &svd.singular_values;
    let (imin, smin) = s
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
    let smax = s.max();
    let ratio = if smax > 0.0 { smin / smax } else { 0.0 };
    if ratio < RANK_THRESHOLD {
        let v_t = svd.v_t.expect("right singular vectors requested");
        return Err(Error::RankDeficient {
            ratio,
            direction: v_t.row(imin).iter().copied().collect(),
        });
    }
    Ok(())
}

/// Solves `a z = rhs`, returning `None` when `a` is numerically singular.
fn solve_checked(a: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin / smax < RANK_THRESHOLD {
        return None;
    }
    svd.solve(rhs, 0.0).ok().filter(|z| z.iter().all(|v| v.is_finite()))
}

fn poisson_objective(theta: &DVector<f64>, data: &Dataset) -> Option<f64> {
    let eta = data.x() * theta;
    let v: f64 = eta
        .iter()
        .zip(data.y().iter())
        .map(|(&e, &y)| y * e - e.exp())
        .sum::<f64>()
        / data.n() as f64;
    v.is_finite().then_some(v)
}

struct StageOutcome {
    theta: DVector<f64>,
    norm: f64,
    termination: Termination,
    iterations: usize,
}

/// Damped Newton ascent on the concave Poisson objective.
fn poisson_stage(
    data: &Dataset,
    start: DVector<f64>,
    tol: f64,
    max_iter: usize,
    trace: &mut SolverTrace,
) -> Result<StageOutcome> {
    let mut theta = start;
    let mut objective = poisson_objective(&theta, data).ok_or_else(|| Error::NonFiniteEvaluation {
        theta: theta.iter().copied().collect(),
    })?;
    let (mut m, mut jac) = accumulate(&theta, data, 0.0, 0.0, true)?;
    let mut norm = m.amax();
    trace.push(Phase::Poisson, 0.0, &theta, norm, 0.0);

    let mut iterations = 0;
    let termination = loop {
        if norm <= tol {
            break Termination::Converged;
        }
        if iterations >= max_iter {
            break Termination::MaxIter;
        }
        let Some(direction) = solve_checked(jac.as_ref().expect("jacobian"), &-&m) else {
            break Termination::FlatRegion;
        };
        let mut step = 1.0;
        let accepted = loop {
            let trial = &theta + &direction * step;
            if let Some(value) = poisson_objective(&trial, data) {
                if let Ok((tm, tj)) = accumulate(&trial, data, 0.0, 0.0, true) {
                    let tnorm = tm.amax();
                    // Near the optimum the objective stops resolving increases;
                    // a flat objective with a smaller residual is still progress.
                    let flat = (value - objective).abs() <= 1e-15 * objective.abs().max(1.0);
                    if value > objective || (flat && tnorm < norm) {
                        break Some((trial, value, tm, tj, tnorm));
                    }
                }
            }
            step *= 0.5;
            if step < MIN_STEP {
                break None;
            }
        };
        let Some((t, value, tm, tj, tnorm)) = accepted else {
            break Termination::LineSearchFailed;
        };
        theta = t;
        objective = value;
        m = tm;
        jac = tj;
        norm = tnorm;
        iterations += 1;
        trace.push(Phase::Poisson, 0.0, &theta, norm, step);
    };
    Ok(StageOutcome {
        theta,
        norm,
        termination,
        iterations,
    })
}

/// Damped Newton on `m(theta) = 0` at fixed `(kappa, c)` with backtracking on `||m||_inf`.
#[allow(clippy::too_many_arguments)]
fn newton_stage(
    data: &Dataset,
    kappa: f64,
    c: f64,
    start: DVector<f64>,
    tol: f64,
    max_iter: usize,
    phase: Phase,
    trace: &mut SolverTrace,
) -> StageOutcome {
    let mut theta = start;
    let (mut m, mut jac) = match accumulate(&theta, data, kappa, c, true) {
        Ok(v) => v,
        Err(_) => {
            return StageOutcome {
                norm: f64::INFINITY,
                theta,
                termination: Termination::NonFinite,
                iterations: 0,
            }
        }
    };
    let mut norm = m.amax();
    trace.push(phase, kappa, &theta, norm, 0.0);

    let mut iterations = 0;
    let termination = loop {
        if norm <= tol {
            break Termination::Converged;
        }
        if iterations >= max_iter {
            break Termination::MaxIter;
        }
        let Some(direction) = solve_checked(jac.as_ref().expect("jacobian"), &-&m) else {
            break Termination::FlatRegion;
        };
        let mut step = 1.0;
        let accepted = loop {
            let trial = &theta + &direction * step;
            if let Ok((tm, _)) = accumulate(&trial, data, kappa, c, false) {
                let tnorm = tm.amax();
                if tnorm < norm {
                    break Some((trial, tm, tnorm));
                }
            }
            step *= 0.5;
            if step < MIN_STEP {
                break None;
            }
        };
        let Some((t, tm, tnorm)) = accepted else {
            break Termination::LineSearchFailed;
        };
        match accumulate(&t, data, kappa, c, true) {
            Ok((_, tj)) => jac = tj,
            Err(_) => break Termination::NonFinite,
        }
        theta = t;
        m = tm;
        norm = tnorm;
        iterations += 1;
        trace.push(phase, kappa, &theta, norm, step);
    };
    StageOutcome {
        theta,
        norm,
        termination,
        iterations,
    }
}

/// The `kappa` values visited on the way from 0 to `target`, ending at `target`.
pub fn continuation_path(target: f64, step: f64) -> Vec<f64> {
    if target == 0.0 {
        return Vec::new();
    }
    let stops = (target.abs() / step - 1e-9).ceil().max(1.0) as usize;
    (1..=stops)
        .map(|i| target.signum() * (i as f64 * step).min(target.abs()))
        .collect()
}

fn finish(
    data: &Dataset,
    spec: &EstimatorSpec,
    outcome: StageOutcome,
    iterations: usize,
    mut trace: SolverTrace,
) -> FitResult {
    let converged = outcome.norm <= spec.scaled_tol(data);
    trace.termination = if converged {
        Termination::Converged
    } else {
        outcome.termination
    };
    let covariance = if converged {
        sandwich_covariance(data, spec, &outcome.theta).ok()
    } else {
        None
    };
    let std_errors = covariance
        .as_ref()
        .map(|c| DVector::from_iterator(c.nrows(), c.diagonal().iter().map(|v| v.max(0.0).sqrt())));
    FitResult {
        theta_hat: outcome.theta,
        moment_norm: outcome.norm,
        iterations,
        converged,
        covariance,
        std_errors,
        trace,
    }
}

/// Poisson pseudo-maximum-likelihood fit (`kappa = 0`) from `theta = 0`.
pub fn fit_poisson(data: &Dataset) -> Result<FitResult> {
    fit_poisson_with(data, &EstimatorSpec::poisson())
}

/// [`fit_poisson`] with the tolerance and iteration cap taken from `spec`.
pub fn fit_poisson_with(data: &Dataset, spec: &EstimatorSpec) -> Result<FitResult> {
    spec.validate()?;
    check_full_rank(data.x())?;
    let mut trace = SolverTrace::new();
    let outcome = poisson_stage(
        data,
        DVector::zeros(data.d()),
        spec.scaled_tol(data),
        spec.max_iter,
        &mut trace,
    )?;
    let iterations = outcome.iterations;
    let poisson = spec.with_kappa(0.0).with_c(0.0);
    Ok(finish(data, &poisson, outcome, iterations, trace))
}

/// Solves the estimating equations for `spec.kappa` and `spec.c`.
///
/// Returns a non-converged result (with trace) when the line search stalls
/// or the iteration budget runs out; errors only on invalid input or a
/// non-finite starting point.
pub fn fit(data: &Dataset, spec: &EstimatorSpec) -> Result<FitResult> {
    spec.validate()?;
    check_full_rank(data.x())?;
    let tol = spec.scaled_tol(data);
    let mut trace = SolverTrace::new();

    let mut outcome = poisson_stage(data, DVector::zeros(data.d()), tol, spec.max_iter, &mut trace)?;
    let mut iterations = outcome.iterations;

    let path = continuation_path(spec.kappa, spec.continuation_step);
    let intermediate = path.len().saturating_sub(1);
    for &kappa in &path[..intermediate] {
        let stage = newton_stage(
            data,
            kappa,
            spec.c,
            outcome.theta.clone(),
            tol * CONTINUATION_SLACK,
            spec.max_iter,
            Phase::Continuation,
            &mut trace,
        );
        iterations += stage.iterations;
        if stage.termination == Termination::NonFinite {
            return Ok(finish(data, spec, stage, iterations, trace));
        }
        outcome = stage;
    }

    let stage = newton_stage(
        data,
        spec.kappa,
        spec.c,
        outcome.theta,
        tol,
        spec.max_iter,
        Phase::Refinement,
        &mut trace,
    );
    iterations += stage.iterations;
    Ok(finish(data, spec, stage, iterations, trace))
}

/// Plug-in sandwich `J^-1 I J^-1 / n` at `theta_hat`, with
/// `I = (1/n) sum psi psi'` and `J = -(1/n) sum d psi / d theta`.
pub fn sandwich_covariance(data: &Dataset, spec: &EstimatorSpec, theta_hat: &DVector<f64>) -> Result<DMatrix<f64>> {
    let (_, jac) = accumulate(theta_hat, data, spec.kappa, spec.c, true)?;
    let bread = -jac.expect("jacobian requested");
    let meat = score_outer_product(theta_hat, data, spec)?;

    let svd = bread.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin / smax < RANK_THRESHOLD {
        return Err(Error::Singular {
            context: "moment Jacobian",
            condition: if smin > 0.0 { smax / smin } else { f64::INFINITY },
        });
    }
    let inv = svd.pseudo_inverse(0.0).map_err(|_| Error::Singular {
        context: "moment Jacobian",
        condition: smax / smin,
    })?;
    let cov = &inv * meat * &inv / data.n() as f64;
    Ok((&cov + cov.transpose()) * 0.5)
}

/// Nonparametric bootstrap standard errors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapSe {
    pub std_errors: DVector<f64>,
    /// Resamples whose fit converged.
    pub replicates: usize,
    /// Resamples dropped for non-convergence or fit errors.
    pub dropped: usize,
}

/// Resamples rows with replacement `b` times; resample `i` is seeded with
/// `seed + i`. Results are reduced in resample order, so the output does not
/// depend on thread scheduling.
pub fn bootstrap_se(data: &Dataset, spec: &EstimatorSpec, b: usize, seed: u64) -> Result<BootstrapSe> {
    if b < 2 {
        return Err(Error::InvalidParameter {
            name: "B",
            reason: format!("need at least 2 resamples, got {b}"),
        });
    }
    spec.validate()?;
    let n = data.n();
    let fits: Vec<Option<DVector<f64>>> = (0..b as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeded_rng(seed.wrapping_add(i), RESAMPLE_STREAM);
            let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let sample = data.select_rows(&rows);
            match fit(&sample, spec) {
                Ok(f) if f.converged => Some(f.theta_hat),
                _ => None,
            }
        })
        .collect();

    let kept: Vec<DVector<f64>> = fits.into_iter().flatten().collect();
    let dropped = b - kept.len();
    if dropped as f64 > BOOTSTRAP_FAILURE_BUDGET * b as f64 || kept.len() < 2 {
        return Err(Error::ExcessiveFailures { failed: dropped, total: b });
    }
    let count = kept.len() as f64;
    let mean = kept.iter().fold(DVector::zeros(data.d()), |acc, t| acc + t) / count;
    let var = kept
        .iter()
        .fold(DVector::zeros(data.d()), |acc: DVector<f64>, t| {
            acc + (t - &mean).map(|v| v * v)
        })
        / (count - 1.0);
    Ok(BootstrapSe {
        std_errors: var.map(f64::sqrt),
        replicates: kept.len(),
        dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn intercept_only(y: &[f64]) -> Dataset {
        Dataset::from_rows(y.to_vec(), &vec![vec![1.0]; y.len()]).unwrap()
    }

    /// Bisection on a scalar function with a sign change on `[lo, hi]`.
    fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        let flo = f(lo);
        assert!(flo * f(hi) < 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) * flo > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn poisson_intercept_only() {
        let fit = fit_poisson(&intercept_only(&[1.0, 3.0])).unwrap();
        assert!(fit.converged);
        assert_abs_diff_eq!(fit.theta_hat[0], 2f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn poisson_one_dimensional_root_matches_bisection() {
        let e = std::f64::consts::E;
        let data = Dataset::from_rows(vec![e, e * e], &[vec![1.0], vec![2.0]]).unwrap();
        let oracle = bisect(|t| (e - t.exp()) + 2.0 * (e * e - (2.0 * t).exp()), -5.0, 5.0);
        let fit = fit_poisson(&data).unwrap();
        assert_abs_diff_eq!(oracle, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.theta_hat[0], oracle, epsilon = 1e-6);
    }

    #[test]
    fn rank_deficiency_names_null_direction() {
        let rows = vec![vec![1.0, 2.0], vec![2.0, 4.0], vec![-1.0, -2.0]];
        let data = Dataset::from_rows(vec![1.0, 2.0, 3.0], &rows).unwrap();
        match fit_poisson(&data).unwrap_err() {
            Error::RankDeficient { direction, .. } => {
                // (2, -1) / sqrt(5) spans the null space, up to sign.
                let scale = 5f64.sqrt();
                assert_abs_diff_eq!((direction[0] * scale).abs(), 2.0, epsilon = 1e-8);
                assert_abs_diff_eq!((direction[1] * scale).abs(), 1.0, epsilon = 1e-8);
                assert!(direction[0] * direction[1] < 0.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn kappa_zero_fit_is_identical_to_poisson() {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![1.0, (i as f64 * 0.37).sin()]).collect();
        let y: Vec<f64> = (0..30).map(|i| ((i * 7) % 5) as f64).collect();
        let data = Dataset::from_rows(y, &rows).unwrap();
        let a = fit_poisson(&data).unwrap();
        let b = fit(&data, &EstimatorSpec::poisson()).unwrap();
        assert!((a.theta_hat - b.theta_hat).amax() <= 1e-10);
    }

    #[test]
    fn intercept_only_is_kappa_invariant() {
        let data = intercept_only(&[1.0, 3.0]);
        for k in [-1.0, -0.5, 0.3, 1.0] {
            let f = fit(&data, &EstimatorSpec::new(k).unwrap()).unwrap();
            assert!(f.converged, "kappa {k}");
            assert_abs_diff_eq!(f.theta_hat[0], 2f64.ln(), epsilon = 1e-8);
        }
    }

    #[test]
    fn shifted_weights_fit() {
        // Negative-binomial form: c = 1/b, kappa = -1.
        let data = intercept_only(&[0.0, 2.0, 7.0]);
        let f = fit(&data, &EstimatorSpec::new(-1.0).unwrap().with_c(0.5)).unwrap();
        assert!(f.converged);
        assert_abs_diff_eq!(f.theta_hat[0], 3f64.ln(), epsilon = 1e-8);
    }

    #[test]
    fn continuation_path_ends_at_target() {
        assert!(continuation_path(0.0, 0.1).is_empty());
        let p = continuation_path(-0.95, 0.1);
        assert_eq!(p.len(), 10);
        assert_eq!(*p.last().unwrap(), -0.95);
        let p = continuation_path(0.3, 0.1);
        assert_eq!(p.len(), 3);
        assert_abs_diff_eq!(p[0], 0.1);
        assert_eq!(p[2], 0.3);
    }

    #[test]
    fn noiseless_covariance_is_zero() {
        let rows: Vec<Vec<f64>> = (0..12).map(|i| vec![1.0, i as f64 / 6.0 - 1.0]).collect();
        let y: Vec<f64> = rows.iter().map(|r| (0.5 * r[0] - 0.7 * r[1]).exp()).collect();
        let data = Dataset::from_rows(y, &rows).unwrap();
        let theta = DVector::from_vec(vec![0.5, -0.7]);
        let cov = sandwich_covariance(&data, &EstimatorSpec::new(0.5).unwrap(), &theta).unwrap();
        assert!(cov.amax() < 1e-25);
    }

    #[test]
    fn intercept_only_poisson_sandwich() {
        // J = mean(y) = 2, I = mean((y - 2)^2) = 1, so cov = 1 / (2 * 2 * 2).
        let data = intercept_only(&[1.0, 3.0]);
        let cov = sandwich_covariance(&data, &EstimatorSpec::poisson(), &DVector::from_vec(vec![2f64.ln()])).unwrap();
        assert_abs_diff_eq!(cov[(0, 0)], 0.125, epsilon = 1e-14);
    }

    #[test]
    fn singular_bread_reports_condition() {
        // All-zero outcomes under gamma weights give J = -(1/n) sum (y / mu) x x' = 0.
        let data = intercept_only(&[0.0, 0.0, 0.0]);
        let err = sandwich_covariance(&data, &EstimatorSpec::new(-1.0).unwrap(), &DVector::from_vec(vec![0.0]));
        assert!(matches!(err, Err(Error::Singular { .. })));
    }

    #[test]
    fn gamma_with_mostly_zeros_terminates() {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![1.0, (i as f64 * 0.91).cos()]).collect();
        let y: Vec<f64> = (0..40).map(|i| if i % 5 == 0 { 1.0 + i as f64 / 10.0 } else { 0.0 }).collect();
        let data = Dataset::from_rows(y, &rows).unwrap();
        let f = fit(&data, &EstimatorSpec::new(-1.0).unwrap()).unwrap();
        assert!(f.converged || f.trace.termination != Termination::Converged);
        assert!(f.iterations <= 200 * 12);

        let zeros = intercept_only(&[0.0, 0.0, 0.0, 0.0]);
        let f = fit(&zeros, &EstimatorSpec::new(-1.0).unwrap()).unwrap();
        assert!(!f.converged);
    }

    #[test]
    fn bootstrap_rejects_small_b() {
        assert!(bootstrap_se(&intercept_only(&[1.0, 3.0]), &EstimatorSpec::poisson(), 1, 0).is_err());
    }

    #[test]
    fn bootstrap_is_deterministic() {
        let data = intercept_only(&[1.0, 3.0, 0.0, 4.0, 2.0]);
        let a = bootstrap_se(&data, &EstimatorSpec::poisson(), 50, 9).unwrap();
        let b = bootstrap_se(&data, &EstimatorSpec::poisson(), 50, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bootstrap_of_noiseless_data_is_zero() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![1.0, i as f64 / 10.0 - 1.0]).collect();
        let y: Vec<f64> = rows.iter().map(|r| (r[0] + r[1]).exp()).collect();
        let data = Dataset::from_rows(y, &rows).unwrap();
        let se = bootstrap_se(&data, &EstimatorSpec::new(0.5).unwrap(), 40, 1).unwrap();
        assert!(se.std_errors.amax() < 1e-8);
    }
}
