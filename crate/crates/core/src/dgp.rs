//! Synthetic data: Gaussian and uniform covariates, mean-one log-normal
//! multiplicative noise with heteroskedasticity exponent `alpha`, and
//! censoring to zero with a probability that falls as the mean grows.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::random::{seeded_rng, COVARIATE_STREAM, OUTCOME_STREAM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CensorFamily {
    None,
    /// `P = 1 / (1 + (tau mu0)^beta)`
    LogisticPower,
    /// `P = exp(-(tau mu0)^beta)`
    DoubleExponential,
    /// `P = 1` when `mu0 <= threshold_c`, else 0.
    Threshold,
}

impl std::str::FromStr for CensorFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "none" => Ok(Self::None),
            "logistic_power" => Ok(Self::LogisticPower),
            "double_exponential" => Ok(Self::DoubleExponential),
            "threshold" => Ok(Self::Threshold),
            other => Err(Error::InvalidParameter {
                name: "censor",
                reason: format!(
                    "unknown family '{other}' (expected none, logistic_power, double_exponential or threshold)"
                ),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CensorSpec {
    pub family: CensorFamily,
    pub tau: f64,
    pub beta: f64,
    pub threshold_c: f64,
}

impl CensorSpec {
    pub fn none() -> Self {
        Self {
            family: CensorFamily::None,
            tau: 1.0,
            beta: 1.0,
            threshold_c: 1.0,
        }
    }

    pub fn logistic_power(tau: f64, beta: f64) -> Self {
        Self {
            family: CensorFamily::LogisticPower,
            tau,
            beta,
            ..Self::none()
        }
    }

    pub fn double_exponential(tau: f64, beta: f64) -> Self {
        Self {
            family: CensorFamily::DoubleExponential,
            tau,
            beta,
            ..Self::none()
        }
    }

    pub fn threshold(c: f64) -> Self {
        Self {
            family: CensorFamily::Threshold,
            threshold_c: c,
            ..Self::none()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParameter {
                    name,
                    reason: format!("must be positive and finite, got {v}"),
                })
            }
        };
        match self.family {
            CensorFamily::None => Ok(()),
            CensorFamily::LogisticPower | CensorFamily::DoubleExponential => {
                positive("tau", self.tau)?;
                positive("beta", self.beta)
            }
            CensorFamily::Threshold => positive("threshold_c", self.threshold_c),
        }
    }
}

impl Default for CensorSpec {
    fn default() -> Self {
        Self::none()
    }
}

/// Probability that an observation with latent mean `mu0` is replaced by zero.
pub fn censor_probability(mu0: f64, censor: &CensorSpec) -> Result<f64> {
    if !(mu0 > 0.0) {
        return Err(Error::InvalidParameter {
            name: "mu0",
            reason: format!("must be positive, got {mu0}"),
        });
    }
    Ok(censor_probability_unchecked(mu0, censor))
}

pub(crate) fn censor_probability_unchecked(mu0: f64, censor: &CensorSpec) -> f64 {
    match censor.family {
        CensorFamily::None => 0.0,
        CensorFamily::LogisticPower => 1.0 / (1.0 + (censor.tau * mu0).powf(censor.beta)),
        CensorFamily::DoubleExponential => (-(censor.tau * mu0).powf(censor.beta)).exp(),
        CensorFamily::Threshold => {
            if mu0 <= censor.threshold_c {
                1.0
            } else {
                0.0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub theta0: Vec<f64>,
    pub alpha: f64,
    pub censor: CensorSpec,
    pub n: usize,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            theta0: vec![1.0, 1.0],
            alpha: 1.0,
            censor: CensorSpec::none(),
            n: 1000,
            seed: 0,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidParameter {
                name: "alpha",
                reason: format!("must be finite and non-negative, got {}", self.alpha),
            });
        }
        if self.n == 0 {
            return Err(Error::InvalidParameter {
                name: "n",
                reason: "must be at least 1".into(),
            });
        }
        if self.theta0.is_empty() || self.theta0.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "theta0",
                reason: "must be a non-empty finite vector".into(),
            });
        }
        self.censor.validate()
    }

    pub fn theta0_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.theta0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSample {
    pub dataset: Dataset,
    pub censored_mask: Vec<bool>,
    pub latent_mean: DVector<f64>,
}

/// `n x 2` design: column 0 standard normal, column 1 uniform on `[0, 1]`,
/// drawn row by row (normal first).
pub fn draw_covariates(n: usize, seed: u64) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(Error::InvalidParameter {
            name: "n",
            reason: "must be at least 1".into(),
        });
    }
    let mut rng = seeded_rng(seed, COVARIATE_STREAM);
    let mut x = DMatrix::zeros(n, 2);
    for i in 0..n {
        x[(i, 0)] = StandardNormal.sample(&mut rng);
        x[(i, 1)] = rng.random::<f64>();
    }
    Ok(x)
}

/// The two unit draws consumed per observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitDraws {
    pub uniform: f64,
    pub normal: f64,
}

/// One outcome: zero when `uniform < p_censor`, otherwise `mu0 * eta` with
/// `eta = exp(-s^2/2 + s z)`, `s^2 = ln(1 + mu0^(alpha - 2))`, so that
/// `E[eta] = 1` and `Var(mu0 eta) = mu0^alpha`.
pub fn draw_outcome(mu0: f64, alpha: f64, p_censor: f64, draws: UnitDraws) -> f64 {
    if draws.uniform < p_censor {
        return 0.0;
    }
    let v = mu0.powf(alpha - 2.0);
    let s2 = v.ln_1p();
    mu0 * (-0.5 * s2 + s2.sqrt() * draws.normal).exp()
}

/// Draws outcomes for a fixed design. Each row consumes one uniform and then
/// one normal from the outcome stream, in row order, whether or not it is censored.
pub fn generate_with_covariates(config: &DgpConfig, x: DMatrix<f64>) -> Result<SimulatedSample> {
    config.validate()?;
    if x.ncols() != config.theta0.len() {
        return Err(Error::DimensionMismatch {
            context: "design vs theta0",
            expected: (x.nrows(), config.theta0.len()),
            found: (x.nrows(), x.ncols()),
        });
    }
    let theta0 = config.theta0_vector();
    let eta = &x * &theta0;
    let mut rng = seeded_rng(config.seed, OUTCOME_STREAM);
    let n = x.nrows();
    let mut y = DVector::zeros(n);
    let mut mask = Vec::with_capacity(n);
    let mut latent = DVector::zeros(n);
    for i in 0..n {
        let mu0 = eta[i].exp();
        let draws = UnitDraws {
            uniform: rng.random::<f64>(),
            normal: StandardNormal.sample(&mut rng),
        };
        let p = censor_probability(mu0, &config.censor)?;
        y[i] = draw_outcome(mu0, config.alpha, p, draws);
        mask.push(draws.uniform < p);
        latent[i] = mu0;
    }
    Ok(SimulatedSample {
        dataset: Dataset::new(y, x)?,
        censored_mask: mask,
        latent_mean: latent,
    })
}

/// Full simulation design with covariates from [`draw_covariates`]; requires a 2-vector `theta0`.
pub fn generate(config: &DgpConfig) -> Result<SimulatedSample> {
    config.validate()?;
    if config.theta0.len() != 2 {
        return Err(Error::InvalidParameter {
            name: "theta0",
            reason: format!(
                "the built-in design has 2 covariates, got theta0 of length {}",
                config.theta0.len()
            ),
        });
    }
    let x = draw_covariates(config.n, config.seed)?;
    generate_with_covariates(config, x)
}
