//! Population analytics under censoring: the pseudo-true parameter, the
//! first-order bias approximation and the sandwich variance.
//!
//! Every expectation over `x` is a plain average over one fixed set of draws
//! held by [`PopulationContext`], so identities between formulas hold exactly
//! on the same context rather than only up to Monte Carlo error.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dgp::{censor_probability_unchecked, draw_covariates, CensorSpec};
use crate::error::{Error, Result};
use crate::model::overflow_threshold;
use crate::solver::{MIN_STEP, RANK_THRESHOLD};

pub const DEFAULT_DRAWS: usize = 100_000;
pub const MIN_DRAWS: usize = 1_000;
/// Seed of the default covariate draw set.
pub const DEFAULT_DRAW_SEED: u64 = 20_240_601;

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationContext {
    theta0: DVector<f64>,
    alpha: f64,
    censor: CensorSpec,
    x_draws: DMatrix<f64>,
    eta0: DVector<f64>,
    mu0: DVector<f64>,
    p: DVector<f64>,
}

impl PopulationContext {
    /// Context over `m` draws from the built-in two-covariate law.
    pub fn new(theta0: &[f64], alpha: f64, censor: CensorSpec, m: usize, seed: u64) -> Result<Self> {
        if m < MIN_DRAWS {
            return Err(Error::InvalidParameter {
                name: "draws",
                reason: format!("need at least {MIN_DRAWS}, got {m}"),
            });
        }
        Self::with_draws(theta0, alpha, censor, draw_covariates(m, seed)?)
    }

    /// [`PopulationContext::new`] with the default draw count and seed.
    pub fn standard(theta0: &[f64], alpha: f64, censor: CensorSpec) -> Result<Self> {
        Self::new(theta0, alpha, censor, DEFAULT_DRAWS, DEFAULT_DRAW_SEED)
    }

    /// Context over caller-supplied covariate draws (one row per draw).
    pub fn with_draws(theta0: &[f64], alpha: f64, censor: CensorSpec, x_draws: DMatrix<f64>) -> Result<Self> {
        if x_draws.nrows() < MIN_DRAWS {
            return Err(Error::InvalidParameter {
                name: "draws",
                reason: format!("need at least {MIN_DRAWS}, got {}", x_draws.nrows()),
            });
        }
        if x_draws.ncols() != theta0.len() {
            return Err(Error::DimensionMismatch {
                context: "covariate draws vs theta0",
                expected: (x_draws.nrows(), theta0.len()),
                found: (x_draws.nrows(), x_draws.ncols()),
            });
        }
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidParameter {
                name: "alpha",
                reason: format!("must be finite and non-negative, got {alpha}"),
            });
        }
        if x_draws.iter().any(|v| !v.is_finite()) || theta0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite covariate draw or theta0".into()));
        }
        censor.validate()?;
        let theta0 = DVector::from_column_slice(theta0);
        let eta0 = predictor(&x_draws, &theta0)?;
        let mu0 = eta0.map(f64::exp);
        let p = mu0.map(|m| censor_probability_unchecked(m, &censor));
        Ok(Self {
            theta0,
            alpha,
            censor,
            x_draws,
            eta0,
            mu0,
            p,
        })
    }

    pub fn theta0(&self) -> &DVector<f64> {
        &self.theta0
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn censor(&self) -> &CensorSpec {
        &self.censor
    }

    pub fn x_draws(&self) -> &DMatrix<f64> {
        &self.x_draws
    }

    pub fn draws(&self) -> usize {
        self.x_draws.nrows()
    }

    pub fn d(&self) -> usize {
        self.x_draws.ncols()
    }

    /// Censoring probability at each draw.
    pub fn censor_probabilities(&self) -> &DVector<f64> {
        &self.p
    }

    /// Same context with a different heteroskedasticity exponent; draws are shared.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidParameter {
                name: "alpha",
                reason: format!("must be finite and non-negative, got {alpha}"),
            });
        }
        Ok(Self { alpha, ..self.clone() })
    }

    /// Average of `w_i x_i`.
    fn weighted_mean(&self, w: impl Fn(usize) -> f64) -> DVector<f64> {
        let (m, d) = (self.draws(), self.d());
        let mut out = DVector::zeros(d);
        for i in 0..m {
            let wi = w(i);
            for j in 0..d {
                out[j] += wi * self.x_draws[(i, j)];
            }
        }
        out / m as f64
    }

    /// Average of `w_i x_i x_i'`.
    fn weighted_gram(&self, w: impl Fn(usize) -> f64) -> DMatrix<f64> {
        let (m, d) = (self.draws(), self.d());
        let mut out = DMatrix::zeros(d, d);
        for i in 0..m {
            let wi = w(i);
            for a in 0..d {
                let xa = wi * self.x_draws[(i, a)];
                for b in 0..=a {
                    out[(a, b)] += xa * self.x_draws[(i, b)];
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                out[(b, a)] = out[(a, b)];
            }
        }
        out / m as f64
    }
}

/// Row-wise dot products, accumulated in column order so that equal inputs give equal bits.
fn predictor(x: &DMatrix<f64>, theta: &DVector<f64>) -> Result<DVector<f64>> {
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFiniteParameter {
            theta: theta.iter().copied().collect(),
        });
    }
    let limit = overflow_threshold();
    let mut eta = DVector::zeros(x.nrows());
    for i in 0..x.nrows() {
        let mut e = 0.0;
        for j in 0..x.ncols() {
            e += x[(i, j)] * theta[j];
        }
        if e > limit {
            return Err(Error::Overflow { index: i });
        }
        eta[i] = e;
    }
    Ok(eta)
}

/// `E_x{((1 - P) mu0 - mu) exp(kappa theta'x) x}` over the context draws.
pub fn population_moments(theta: &DVector<f64>, kappa: f64, ctx: &PopulationContext) -> Result<DVector<f64>> {
    Ok(moments_and_jacobian(theta, kappa, ctx, false)?.0)
}

fn moments_and_jacobian(
    theta: &DVector<f64>,
    kappa: f64,
    ctx: &PopulationContext,
    with_jacobian: bool,
) -> Result<(DVector<f64>, Option<DMatrix<f64>>)> {
    if theta.len() != ctx.d() {
        return Err(Error::DimensionMismatch {
            context: "theta vs covariate draws",
            expected: (ctx.d(), 1),
            found: (theta.len(), 1),
        });
    }
    let eta = predictor(&ctx.x_draws, theta)?;
    let mu = eta.map(f64::exp);
    let tilt = eta.map(|e| (kappa * e).exp());
    if let Some(index) = (0..eta.len()).find(|&i| !(tilt[i] * mu[i]).is_finite()) {
        return Err(Error::Overflow { index });
    }
    let resid = |i: usize| (1.0 - ctx.p[i]) * ctx.mu0[i] - mu[i];
    let m = ctx.weighted_mean(|i| resid(i) * tilt[i]);
    let jac = with_jacobian.then(|| ctx.weighted_gram(|i| (kappa * resid(i) - mu[i]) * tilt[i]));
    Ok((m, jac))
}

/// Solution of the population moment equations, by damped Newton from `theta0`.
pub fn pseudo_true(kappa: f64, ctx: &PopulationContext) -> Result<DVector<f64>> {
    const MAX_ITER: usize = 100;
    let mut theta = ctx.theta0.clone();
    let (mut m, mut jac) = moments_and_jacobian(&theta, kappa, ctx, true)?;
    let mut norm = m.amax();
    for _ in 0..MAX_ITER {
        if norm <= 1e-8 * theta.amax().max(1.0) {
            return Ok(theta);
        }
        let direction = jac
            .take()
            .expect("jacobian requested")
            .lu()
            .solve(&-&m)
            .ok_or(Error::Singular {
                context: "population Jacobian",
                condition: f64::INFINITY,
            })?;
        let mut step = 1.0;
        loop {
            let trial = &theta + &direction * step;
            if let Ok((tm, tj)) = moments_and_jacobian(&trial, kappa, ctx, true) {
                if tm.amax() < norm {
                    theta = trial;
                    norm = tm.amax();
                    m = tm;
                    jac = tj;
                    break;
                }
            }
            step *= 0.5;
            if step < MIN_STEP {
                return Err(Error::NoConvergence {
                    context: "pseudo-true parameter",
                    iterations: MAX_ITER,
                    residual: norm,
                });
            }
        }
    }
    if norm <= 1e-8 * theta.amax().max(1.0) {
        return Ok(theta);
    }
    Err(Error::NoConvergence {
        context: "pseudo-true parameter",
        iterations: MAX_ITER,
        residual: norm,
    })
}

fn condition_number(a: &DMatrix<f64>) -> f64 {
    let s = a.singular_values();
    let (smax, smin) = (s.max(), s.min());
    if smin > 0.0 {
        smax / smin
    } else {
        f64::INFINITY
    }
}

fn checked_inverse(a: &DMatrix<f64>, context: &'static str) -> Result<DMatrix<f64>> {
    let condition = condition_number(a);
    if !(condition.is_finite() && 1.0 / condition >= RANK_THRESHOLD) {
        return Err(Error::Singular { context, condition });
    }
    a.clone().try_inverse().ok_or(Error::Singular { context, condition })
}

/// First-order bias `(A'A)^{-1} A b` with
/// `A = E_x{(P kappa - 1) x x' exp((kappa + 1) theta0'x)}` and
/// `b = E_x{P x exp((kappa + 1) theta0'x)}`. Does not depend on `alpha`.
pub fn bias_approximation(kappa: f64, ctx: &PopulationContext) -> Result<DVector<f64>> {
    let scale = ctx.eta0.map(|e| ((kappa + 1.0) * e).exp());
    let a = ctx.weighted_gram(|i| (ctx.p[i] * kappa - 1.0) * scale[i]);
    let b = ctx.weighted_mean(|i| ctx.p[i] * scale[i]);
    let ata = a.transpose() * &a;
    let inv = checked_inverse(&ata, "A'A")?;
    Ok(inv * (&a * b))
}

fn sandwich(j: &DMatrix<f64>, i: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let j_inv = checked_inverse(j, "population J")?;
    let v = &j_inv * i * &j_inv;
    Ok((&v + v.transpose()) * 0.5)
}

/// Per-observation sandwich `J^-1 I J^-1` at the pseudo-true parameter,
/// with the additive heteroskedasticity term in `I`. Divide by `n` for the
/// variance of the estimator.
pub fn asymptotic_variance(kappa: f64, ctx: &PopulationContext) -> Result<DMatrix<f64>> {
    let theta = pseudo_true(kappa, ctx)?;
    let eta = predictor(&ctx.x_draws, &theta)?;
    let mu = eta.map(f64::exp);
    let tilt = eta.map(|e| (kappa * e).exp());
    let tilt2 = eta.map(|e| (2.0 * kappa * e).exp());
    let hetero = ctx.eta0.map(|e| (ctx.alpha * e).exp());
    let i_mat = ctx.weighted_gram(|i| {
        let (p, m, m0) = (ctx.p[i], mu[i], ctx.mu0[i]);
        tilt2[i] * (p * (m * m) + (1.0 - p) * ((m0 - m) * (m0 - m) + hetero[i]))
    });
    let j_mat = ctx.weighted_gram(|i| {
        let resid = (1.0 - ctx.p[i]) * ctx.mu0[i] - mu[i];
        -(resid * tilt[i] * kappa) + tilt[i] * mu[i]
    });
    sandwich(&j_mat, &i_mat)
}

/// Uncensored sandwich `E[mu^{k+1} xx']^-1 E[mu^{2k+alpha} xx'] E[mu^{k+1} xx']^-1`
/// at `theta0`, ignoring the context's censoring. Powers of `mu` are formed as
/// products of `exp(k eta)`, `exp(eta)` and `exp(alpha eta)`, matching
/// [`asymptotic_variance`] term by term when there is no censoring.
pub fn uncensored_variance(kappa: f64, ctx: &PopulationContext) -> Result<DMatrix<f64>> {
    let tilt = ctx.eta0.map(|e| (kappa * e).exp());
    let tilt2 = ctx.eta0.map(|e| (2.0 * kappa * e).exp());
    let hetero = ctx.eta0.map(|e| (ctx.alpha * e).exp());
    let i_mat = ctx.weighted_gram(|i| tilt2[i] * hetero[i]);
    let j_mat = ctx.weighted_gram(|i| tilt[i] * ctx.mu0[i]);
    sandwich(&j_mat, &i_mat)
}

/// The `kappa` minimizing the uncensored asymptotic variance when `Var(y|x) = mu^alpha`.
///
/// Returns values below `-1` for `alpha > 2`, outside the estimator family.
pub fn efficient_kappa(alpha: f64) -> f64 {
    1.0 - alpha
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedEstimator {
    Poisson,
    Nls,
}

/// One-dimensional biases of Poisson and NLS under censoring:
/// `-E[x P mu] / E[x^2 mu]` and `-E[x P mu^2] / E[x^2 (1 + P) mu^2]`.
pub fn corollary_bias_1d(estimator: NamedEstimator, ctx: &PopulationContext) -> Result<f64> {
    if ctx.d() != 1 {
        return Err(Error::InvalidParameter {
            name: "ctx",
            reason: format!("one-dimensional formula needs d = 1, got {}", ctx.d()),
        });
    }
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..ctx.draws() {
        let (x, p, m) = (ctx.x_draws[(i, 0)], ctx.p[i], ctx.mu0[i]);
        match estimator {
            NamedEstimator::Poisson => {
                num += x * p * m;
                den += x * x * m;
            }
            NamedEstimator::Nls => {
                num += x * p * m * m;
                den += x * x * (1.0 + p) * m * m;
            }
        }
    }
    if den == 0.0 {
        return Err(Error::Singular {
            context: "corollary denominator",
            condition: f64::INFINITY,
        });
    }
    Ok(-num / den)
}

/// Uncensored asymptotic variance of Poisson or NLS written directly in terms
/// of `Var(y|x) = mu^alpha`: `E[xx' mu]^-1 E[xx' Var] E[xx' mu]^-1` and
/// `E[xx' mu^2]^-1 E[xx' mu^2 Var] E[xx' mu^2]^-1`.
pub fn named_variance(estimator: NamedEstimator, ctx: &PopulationContext) -> Result<DMatrix<f64>> {
    let var = ctx.eta0.map(|e| (ctx.alpha * e).exp());
    let (j_mat, i_mat) = match estimator {
        NamedEstimator::Poisson => (ctx.weighted_gram(|i| ctx.mu0[i]), ctx.weighted_gram(|i| var[i])),
        NamedEstimator::Nls => {
            let sq = |i: usize| ctx.mu0[i] * ctx.mu0[i];
            (ctx.weighted_gram(sq), ctx.weighted_gram(|i| sq(i) * var[i]))
        }
    };
    sandwich(&j_mat, &i_mat)
}
