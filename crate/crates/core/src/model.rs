//! Shared domain types: datasets, estimator specifications, fit results,
//! and the exponential-mean link.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::solver::SolverTrace;

/// Largest linear predictor whose exponential is treated as finite.
pub fn overflow_threshold() -> f64 {
    f64::MAX.ln() - 2.0
}

/// Non-negative outcomes `y` with an `n x d` covariate matrix.
///
/// No intercept column is ever added implicitly.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DVector<f64>,
    x: DMatrix<f64>,
    feature_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(y: DVector<f64>, x: DMatrix<f64>) -> Result<Self> {
        if y.len() != x.nrows() {
            return Err(Error::DimensionMismatch {
                context: "outcome length vs covariate rows",
                expected: (x.nrows(), x.ncols()),
                found: (y.len(), 1),
            });
        }
        if x.ncols() == 0 {
            return Err(Error::InvalidData("at least one covariate column is required".into()));
        }
        if x.nrows() < x.ncols() {
            return Err(Error::InvalidData(format!(
                "need n >= d, got n = {} and d = {}",
                x.nrows(),
                x.ncols()
            )));
        }
        for (row, &value) in y.iter().enumerate() {
            if !value.is_finite() {
                return Err(Error::InvalidData(format!("non-finite outcome at row {row}")));
            }
            if value < 0.0 {
                return Err(Error::NegativeOutcome { row, value });
            }
        }
        for column in 0..x.ncols() {
            for row in 0..x.nrows() {
                if !x[(row, column)].is_finite() {
                    return Err(Error::NonFiniteCovariate { row, column });
                }
            }
        }
        Ok(Self {
            y,
            x,
            feature_names: None,
        })
    }

    /// Builds a dataset from row-major covariate rows.
    pub fn from_rows(y: Vec<f64>, rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != d) {
            return Err(Error::DimensionMismatch {
                context: "covariate row width",
                expected: (i, d),
                found: (i, r.len()),
            });
        }
        let x = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
        Self::new(DVector::from_vec(y), x)
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.d() {
            return Err(Error::DimensionMismatch {
                context: "feature names vs covariate columns",
                expected: (1, self.d()),
                found: (1, names.len()),
            });
        }
        self.feature_names = Some(names);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn feature_names(&self) -> Option<&[String]> {
        self.feature_names.as_deref()
    }

    pub fn mean_y(&self) -> f64 {
        self.y.mean()
    }

    /// Row subset, in the order given. Indices may repeat (bootstrap).
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i]));
        let x = DMatrix::from_fn(rows.len(), self.d(), |i, j| self.x[(rows[i], j)]);
        Self {
            y,
            x,
            feature_names: self.feature_names.clone(),
        }
    }

    pub fn into_parts(self) -> (DVector<f64>, DMatrix<f64>, Option<Vec<String>>) {
        (self.y, self.x, self.feature_names)
    }
}

/// Identifies one member of the estimator family: weights `(c + mu)^kappa`
/// plus solver controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EstimatorSpec {
    pub kappa: f64,
    pub c: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub continuation_step: f64,
}

impl Default for EstimatorSpec {
    fn default() -> Self {
        Self {
            kappa: 0.0,
            c: 0.0,
            tol: 1e-8,
            max_iter: 200,
            continuation_step: 0.1,
        }
    }
}

impl EstimatorSpec {
    pub fn new(kappa: f64) -> Result<Self> {
        let spec = Self {
            kappa,
            ..Self::default()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn poisson() -> Self {
        Self::default()
    }

    pub fn with_kappa(self, kappa: f64) -> Self {
        Self { kappa, ..self }
    }

    pub fn with_c(self, c: f64) -> Self {
        Self { c, ..self }
    }

    pub fn with_tol(self, tol: f64) -> Self {
        Self { tol, ..self }
    }

    pub fn with_max_iter(self, max_iter: usize) -> Self {
        Self { max_iter, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.kappa) {
            return Err(Error::InvalidParameter {
                name: "kappa",
                reason: format!("{} is outside [-1, 1]", self.kappa),
            });
        }
        if !(self.c >= 0.0 && self.c.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "c",
                reason: format!("{} is not a finite non-negative number", self.c),
            });
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter {
                name: "tol",
                reason: format!("{} is not positive", self.tol),
            });
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidParameter {
                name: "max_iter",
                reason: "must be positive".into(),
            });
        }
        if !(self.continuation_step > 0.0) {
            return Err(Error::InvalidParameter {
                name: "continuation_step",
                reason: format!("{} is not positive", self.continuation_step),
            });
        }
        Ok(())
    }

    /// Absolute threshold on the max-norm of the moment vector.
    pub fn scaled_tol(&self, data: &Dataset) -> f64 {
        self.tol * data.mean_y().max(1.0)
    }
}

/// Outcome of solving the estimating equations.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub theta_hat: DVector<f64>,
    pub moment_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub covariance: Option<DMatrix<f64>>,
    pub std_errors: Option<DVector<f64>>,
    pub trace: SolverTrace,
}

/// Linear predictor `X theta`.
pub fn linear_predictor(theta: &DVector<f64>, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    if theta.len() != x.ncols() {
        return Err(Error::DimensionMismatch {
            context: "theta vs covariate matrix",
            expected: (x.nrows(), x.ncols()),
            found: (theta.len(), 1),
        });
    }
    Ok(x * theta)
}

/// Conditional means with an overflow flag.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanEval {
    pub mu: DVector<f64>,
    /// Set when any linear predictor exceeded [`overflow_threshold`]; those
    /// entries are saturated at `exp(threshold)`.
    pub overflow: bool,
}

/// `mu_i = exp(theta' x_i)`.
pub fn conditional_mean(theta: &DVector<f64>, x: &DMatrix<f64>) -> Result<MeanEval> {
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFiniteParameter {
            theta: theta.iter().copied().collect(),
        });
    }
    let eta = linear_predictor(theta, x)?;
    let limit = overflow_threshold();
    let mut overflow = false;
    let mu = eta.map(|e| {
        if e > limit {
            overflow = true;
            limit.exp()
        } else {
            e.exp()
        }
    });
    Ok(MeanEval { mu, overflow })
}
