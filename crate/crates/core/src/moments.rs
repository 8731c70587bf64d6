//! The weighted estimating equations
//! `m(theta) = (1/n) sum_i (y_i - mu_i) (c + mu_i)^kappa x_i`, their analytic
//! Jacobian, and the optimization objective whose gradient reproduces them
//! when `c = 0`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{overflow_threshold, Dataset, EstimatorSpec};

/// Below this distance from 0, -1 or 1 the objective dispatches to the
/// closed-form Poisson, gamma or least-squares objective.
pub const KAPPA_ENDPOINT_EPS: f64 = 1e-10;

/// Moment vector, Jacobian and (for `c = 0`) objective at one parameter value.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentEval {
    pub m: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub objective: Option<f64>,
}

/// Observation weight `(c + mu)^kappa`.
pub fn moment_weight(mu: f64, kappa: f64, c: f64) -> f64 {
    if kappa == 0.0 {
        1.0
    } else {
        (c + mu).powf(kappa)
    }
}

fn non_finite(theta: &DVector<f64>) -> Error {
    Error::NonFiniteEvaluation {
        theta: theta.iter().copied().collect(),
    }
}

fn check_theta(theta: &DVector<f64>, data: &Dataset) -> Result<()> {
    if theta.len() != data.d() {
        return Err(Error::DimensionMismatch {
            context: "theta vs covariate matrix",
            expected: (data.n(), data.d()),
            found: (theta.len(), 1),
        });
    }
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(non_finite(theta));
    }
    Ok(())
}

/// Per-row quantities: linear predictor, mean, weight.
#[inline]
fn row_terms(eta: f64, kappa: f64, c: f64) -> (f64, f64) {
    let mu = eta.exp();
    let w = if kappa == 0.0 {
        1.0
    } else if c == 0.0 {
        (kappa * eta).exp()
    } else {
        (c + mu).powf(kappa)
    };
    (mu, w)
}

/// Single pass over the rows. Returns `(m, J)` with `J` only when requested.
pub(crate) fn accumulate(
    theta: &DVector<f64>,
    data: &Dataset,
    kappa: f64,
    c: f64,
    with_jacobian: bool,
) -> Result<(DVector<f64>, Option<DMatrix<f64>>)> {
    check_theta(theta, data)?;
    let (n, d) = (data.n(), data.d());
    let x = data.x();
    let y = data.y();
    let limit = overflow_threshold();

    let mut m = vec![0.0; d];
    let mut jac = if with_jacobian { vec![0.0; d * d] } else { Vec::new() };
    let mut row = vec![0.0; d];

    for i in 0..n {
        let mut eta = 0.0;
        for j in 0..d {
            row[j] = x[(i, j)];
            eta += row[j] * theta[j];
        }
        if eta > limit {
            return Err(non_finite(theta));
        }
        let (mu, w) = row_terms(eta, kappa, c);
        let resid = y[i] - mu;
        let score = resid * w;
        for j in 0..d {
            m[j] += score * row[j];
        }
        if with_jacobian {
            // d/dtheta of (y - mu)(c + mu)^k x = (c+mu)^(k-1) [k mu (y-mu) - mu (c+mu)] x x'
            let s = if c == 0.0 {
                w * (kappa * resid - mu)
            } else {
                w * mu / (c + mu) * (kappa * resid - (c + mu))
            };
            for a in 0..d {
                let sa = s * row[a];
                for b in a..d {
                    jac[a * d + b] += sa * row[b];
                }
            }
        }
    }

    let inv_n = 1.0 / n as f64;
    let m = DVector::from_iterator(d, m.into_iter().map(|v| v * inv_n));
    if m.iter().any(|v| !v.is_finite()) {
        return Err(non_finite(theta));
    }
    let jac = if with_jacobian {
        let j = DMatrix::from_fn(d, d, |a, b| {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            jac[lo * d + hi] * inv_n
        });
        if j.iter().any(|v| !v.is_finite()) {
            return Err(non_finite(theta));
        }
        Some(j)
    } else {
        None
    };
    Ok((m, jac))
}

/// Sample-average moment vector for `(kappa, c)` taken from `spec`.
pub fn moment_vector(theta: &DVector<f64>, data: &Dataset, spec: &EstimatorSpec) -> Result<DVector<f64>> {
    accumulate(theta, data, spec.kappa, spec.c, false).map(|(m, _)| m)
}

/// Analytic Jacobian of [`moment_vector`] with respect to `theta`.
pub fn moment_jacobian(theta: &DVector<f64>, data: &Dataset, spec: &EstimatorSpec) -> Result<DMatrix<f64>> {
    accumulate(theta, data, spec.kappa, spec.c, true).map(|(_, j)| j.expect("jacobian requested"))
}

/// Moment vector and Jacobian in one pass; the objective is filled in when `c = 0`.
pub fn evaluate(theta: &DVector<f64>, data: &Dataset, spec: &EstimatorSpec) -> Result<MomentEval> {
    let (m, jacobian) = accumulate(theta, data, spec.kappa, spec.c, true)?;
    let objective = if spec.c == 0.0 {
        Some(objective_and_gradient(theta, data, spec)?.0)
    } else {
        None
    };
    Ok(MomentEval {
        m,
        jacobian: jacobian.expect("jacobian requested"),
        objective,
    })
}

/// Outer-product average `(1/n) sum_i psi_i psi_i'` of the per-observation scores.
pub fn score_outer_product(
    theta: &DVector<f64>,
    data: &Dataset,
    spec: &EstimatorSpec,
) -> Result<DMatrix<f64>> {
    check_theta(theta, data)?;
    let (n, d) = (data.n(), data.d());
    let x = data.x();
    let y = data.y();
    let mut out = DMatrix::zeros(d, d);
    let mut psi = DVector::zeros(d);
    for i in 0..n {
        let eta: f64 = (0..d).map(|j| x[(i, j)] * theta[j]).sum();
        if eta > overflow_threshold() {
            return Err(non_finite(theta));
        }
        let (mu, w) = row_terms(eta, spec.kappa, spec.c);
        let score = (y[i] - mu) * w;
        for j in 0..d {
            psi[j] = score * x[(i, j)];
        }
        out.ger(1.0, &psi, &psi, 1.0);
    }
    out /= n as f64;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(non_finite(theta));
    }
    Ok(out)
}

#[derive(Clone, Copy)]
enum Objective {
    Poisson,
    Gamma,
    LeastSquares,
    Power(f64),
}

impl Objective {
    fn for_kappa(kappa: f64) -> Self {
        if kappa.abs() < KAPPA_ENDPOINT_EPS {
            Objective::Poisson
        } else if (kappa + 1.0).abs() < KAPPA_ENDPOINT_EPS {
            Objective::Gamma
        } else if (kappa - 1.0).abs() < KAPPA_ENDPOINT_EPS {
            Objective::LeastSquares
        } else {
            Objective::Power(kappa)
        }
    }

    /// Per-observation (value, d value / d eta).
    #[inline]
    fn term(self, y: f64, eta: f64) -> (f64, f64) {
        match self {
            Objective::Poisson => {
                let mu = eta.exp();
                (y * eta - mu, y - mu)
            }
            Objective::Gamma => {
                let inv = (-eta).exp();
                (-eta - y * inv, y * inv - 1.0)
            }
            Objective::LeastSquares => {
                // Half the negated squared loss, so the gradient matches n * m.
                let mu = eta.exp();
                let r = y - mu;
                (-0.5 * r * r, r * mu)
            }
            Objective::Power(k) => {
                let a = (k * eta).exp();
                let b = ((k + 1.0) * eta).exp();
                (y * a / k - b / (k + 1.0), y * a - b)
            }
        }
    }
}

/// Summed objective whose gradient equals `n * m(theta)` for `c = 0`.
///
/// Concave for `kappa` in `[-1, 0]`; not concave for `kappa > 0`.
pub fn objective_and_gradient(
    theta: &DVector<f64>,
    data: &Dataset,
    spec: &EstimatorSpec,
) -> Result<(f64, DVector<f64>)> {
    if spec.c != 0.0 {
        return Err(Error::Unsupported(format!(
            "the objective is only defined for c = 0 (got c = {})",
            spec.c
        )));
    }
    if !(-1.0..=1.0).contains(&spec.kappa) {
        return Err(Error::InvalidParameter {
            name: "kappa",
            reason: format!("{} is outside [-1, 1]", spec.kappa),
        });
    }
    check_theta(theta, data)?;
    let objective = Objective::for_kappa(spec.kappa);
    let (n, d) = (data.n(), data.d());
    let x = data.x();
    let y = data.y();
    let limit = overflow_threshold();

    let mut value = 0.0;
    let mut grad = DVector::<f64>::zeros(d);
    for i in 0..n {
        let eta: f64 = (0..d).map(|j| x[(i, j)] * theta[j]).sum();
        if eta.abs() > limit {
            return Err(non_finite(theta));
        }
        let (v, dv) = objective.term(y[i], eta);
        value += v;
        for j in 0..d {
            grad[j] += dv * x[(i, j)];
        }
    }
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(non_finite(theta));
    }
    Ok((value, grad))
}
