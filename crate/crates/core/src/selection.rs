//! Choosing `kappa` from data: k-fold cross-validation on out-of-sample
//! squared error, and repeated train/test splits.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Dataset, EstimatorSpec};
use crate::random::{derive_seed, seeded_rng, PARTITION_STREAM};
use crate::solver::fit;

pub const DEFAULT_FOLDS: usize = 5;
/// Relative and absolute slack under which two CV errors count as tied.
pub const TIE_RELATIVE: f64 = 1e-9;
pub const TIE_ABSOLUTE: f64 = 1e-12;
/// Share of holdout repeats allowed to fail.
pub const HOLDOUT_FAILURE_BUDGET: f64 = 0.2;

/// `-1, -0.95, ..., 1`.
pub fn default_grid() -> Vec<f64> {
    (0..=40).map(|i| (i as f64 - 20.0) / 20.0).collect()
}

/// Seeded partition of `0..n` into `k` folds whose sizes differ by at most one.
/// Each fold is returned in increasing row order.
pub fn kfold_partition(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || n < k {
        return Err(Error::InvalidParameter {
            name: "k",
            reason: format!("need 2 <= k <= n, got k = {k}, n = {n}"),
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed, PARTITION_STREAM));
    let mut folds = vec![Vec::with_capacity(n / k + 1); k];
    for (pos, row) in order.into_iter().enumerate() {
        folds[pos % k].push(row);
    }
    for fold in &mut folds {
        fold.sort_unstable();
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvResult {
    pub kappa_grid: Vec<f64>,
    /// Fold-averaged test MSE per `kappa`; `None` where any fold failed.
    pub e_curve: Vec<Option<f64>>,
    pub selected_kappa: f64,
    /// `per_fold[j][g]` is the test MSE of fold `j` at `kappa_grid[g]`.
    pub per_fold: Vec<Vec<Option<f64>>>,
    /// `(fold, kappa)` pairs whose fit failed or did not converge.
    pub failures: Vec<(usize, f64)>,
}

fn squared_error(data: &Dataset, rows: &[usize], theta: &DVector<f64>) -> f64 {
    let x = data.x();
    let y = data.y();
    rows.iter()
        .map(|&i| {
            let eta: f64 = (0..data.d()).map(|j| x[(i, j)] * theta[j]).sum();
            let r = y[i] - eta.exp();
            r * r
        })
        .sum()
}

fn complement(n: usize, rows: &[usize]) -> Vec<usize> {
    let mut held = vec![false; n];
    for &i in rows {
        held[i] = true;
    }
    (0..n).filter(|&i| !held[i]).collect()
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter {
            name: "grid",
            reason: "must not be empty".into(),
        });
    }
    if let Some(k) = grid.iter().find(|k| !(-1.0..=1.0).contains(*k)) {
        return Err(Error::InvalidParameter {
            name: "grid",
            reason: format!("kappa {k} is outside [-1, 1]"),
        });
    }
    Ok(())
}

/// Index of the smallest error; near-ties go to the smallest `|kappa|`, then the larger `kappa`.
pub fn select_kappa(grid: &[f64], errors: &[Option<f64>]) -> Option<usize> {
    let best = errors.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return None;
    }
    let slack = (TIE_RELATIVE * best.abs()).max(TIE_ABSOLUTE);
    (0..grid.len())
        .filter(|&g| matches!(errors[g], Some(e) if e <= best + slack))
        .min_by(|&a, &b| {
            grid[a]
                .abs()
                .total_cmp(&grid[b].abs())
                .then(grid[b].total_cmp(&grid[a]))
        })
}

/// k-fold cross-validation with default solver settings.
pub fn cross_validate(data: &Dataset, grid: &[f64], k: usize, seed: u64) -> Result<CvResult> {
    cross_validate_with(data, grid, k, seed, &EstimatorSpec::default())
}

/// k-fold cross-validation; `spec` supplies `c` and solver controls, its `kappa` is ignored.
pub fn cross_validate_with(
    data: &Dataset,
    grid: &[f64],
    k: usize,
    seed: u64,
    spec: &EstimatorSpec,
) -> Result<CvResult> {
    if data.n() < 2 * k {
        return Err(Error::InvalidParameter {
            name: "k",
            reason: format!("need n >= 2k, got n = {}, k = {k}", data.n()),
        });
    }
    let folds = kfold_partition(data.n(), k, seed)?;
    cross_validate_folds(data, grid, &folds, spec)
}

/// Cross-validation over caller-supplied folds.
pub fn cross_validate_folds(
    data: &Dataset,
    grid: &[f64],
    folds: &[Vec<usize>],
    spec: &EstimatorSpec,
) -> Result<CvResult> {
    validate_grid(grid)?;
    spec.validate()?;
    if folds.len() < 2 {
        return Err(Error::InvalidParameter {
            name: "folds",
            reason: format!("need at least 2, got {}", folds.len()),
        });
    }
    let n = data.n();
    if folds.iter().flatten().any(|&i| i >= n) {
        return Err(Error::InvalidParameter {
            name: "folds",
            reason: format!("row index out of range for n = {n}"),
        });
    }
    let k = folds.len();
    let jobs: Vec<(usize, usize)> = (0..k).flat_map(|j| (0..grid.len()).map(move |g| (j, g))).collect();
    let results: Vec<Option<f64>> = jobs
        .par_iter()
        .map(|&(j, g)| {
            let test = &folds[j];
            if test.is_empty() {
                return None;
            }
            let train = data.select_rows(&complement(n, test));
            match fit(&train, &spec.with_kappa(grid[g])) {
                Ok(f) if f.converged => Some(squared_error(data, test, &f.theta_hat) / test.len() as f64),
                _ => None,
            }
        })
        .collect();

    let per_fold: Vec<Vec<Option<f64>>> = results.chunks(grid.len()).map(<[_]>::to_vec).collect();
    let failures: Vec<(usize, f64)> = jobs
        .iter()
        .zip(&results)
        .filter(|(_, r)| r.is_none())
        .map(|(&(j, g), _)| (j, grid[g]))
        .collect();
    let e_curve: Vec<Option<f64>> = (0..grid.len())
        .map(|g| {
            let mut total = 0.0;
            for fold in &per_fold {
                total += fold[g]?;
            }
            Some(total / k as f64)
        })
        .collect();
    let selected = select_kappa(grid, &e_curve).ok_or(Error::AllCandidatesFailed)?;
    Ok(CvResult {
        kappa_grid: grid.to_vec(),
        e_curve,
        selected_kappa: grid[selected],
        per_fold,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HoldoutResult {
    pub mean_rmse: f64,
    /// Sample standard deviation across repeats (0 for a single repeat).
    pub sd_rmse: f64,
    pub used: usize,
    pub skipped: usize,
}

/// Repeated random splits: fit on a `split_fraction` share of rows, report
/// the test RMSE of `y - exp(x'theta)`. Repeat `r` is seeded with `seed ^ r`.
pub fn holdout_rmse(
    data: &Dataset,
    spec: &EstimatorSpec,
    split_fraction: f64,
    seed: u64,
    repeats: usize,
) -> Result<HoldoutResult> {
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(Error::InvalidParameter {
            name: "split_fraction",
            reason: format!("must lie in (0, 1), got {split_fraction}"),
        });
    }
    if repeats == 0 {
        return Err(Error::InvalidParameter {
            name: "repeats",
            reason: "must be at least 1".into(),
        });
    }
    spec.validate()?;
    let n = data.n();
    let n_train = (split_fraction * n as f64).round() as usize;
    if n_train < data.d() || n_train >= n {
        return Err(Error::InvalidParameter {
            name: "split_fraction",
            reason: format!("gives {n_train} training rows out of {n}"),
        });
    }
    let scores: Vec<Option<f64>> = (0..repeats as u64)
        .into_par_iter()
        .map(|r| {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut seeded_rng(derive_seed(seed, r), PARTITION_STREAM));
            let (train, test) = order.split_at(n_train);
            let mut train = train.to_vec();
            train.sort_unstable();
            match fit(&data.select_rows(&train), spec) {
                Ok(f) if f.converged => Some((squared_error(data, test, &f.theta_hat) / test.len() as f64).sqrt()),
                _ => None,
            }
        })
        .collect();
    let used: Vec<f64> = scores.iter().flatten().copied().collect();
    let skipped = repeats - used.len();
    if skipped as f64 > HOLDOUT_FAILURE_BUDGET * repeats as f64 || used.is_empty() {
        return Err(Error::ExcessiveFailures {
            failed: skipped,
            total: repeats,
        });
    }
    let count = used.len() as f64;
    let mean = used.iter().sum::<f64>() / count;
    let sd = if used.len() > 1 {
        (used.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(HoldoutResult {
        mean_rmse: mean,
        sd_rmse: sd,
        used: used.len(),
        skipped,
    })
}
