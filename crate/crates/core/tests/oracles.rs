//! Solver and moment evaluations checked against independent numerical oracles:
//! central finite differences, scalar bisection, nested grid refinement and
//! exact bootstrap enumeration.

use gpml_core::dgp::{generate, DgpConfig};
use gpml_core::moments::{moment_jacobian, moment_vector, objective_and_gradient};
use gpml_core::{bootstrap_se, fit, fit_poisson, sandwich_covariance, Dataset, EstimatorSpec};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn random_dataset(rng: &mut ChaCha20Rng, n: usize, d: usize) -> Dataset {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let y: Vec<f64> = (0..n)
        .map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..4.0) })
        .collect();
    Dataset::from_rows(y, &rows).unwrap()
}

fn random_theta(rng: &mut ChaCha20Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.random_range(-0.8..0.8))
}

fn fd_jacobian(f: impl Fn(&DVector<f64>) -> DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
    let d = theta.len();
    let mut jac = DMatrix::zeros(f(theta).len(), d);
    for j in 0..d {
        let h = 1e-6 * theta[j].abs().max(1.0);
        let mut up = theta.clone();
        let mut down = theta.clone();
        up[j] += h;
        down[j] -= h;
        jac.set_column(j, &((f(&up) - f(&down)) / (2.0 * h)));
    }
    jac
}

fn relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-12)
}

#[test]
fn jacobian_matches_finite_differences() {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    for trial in 0..40 {
        let n = rng.random_range(5..=50);
        let d = rng.random_range(1..=4);
        let data = random_dataset(&mut rng, n, d);
        let theta = random_theta(&mut rng, d);
        let kappa = rng.random_range(-1.0..=1.0);
        let c = if trial % 3 == 0 { rng.random_range(0.0..2.0) } else { 0.0 };
        let spec = EstimatorSpec::new(kappa).unwrap().with_c(c);
        let analytic = moment_jacobian(&theta, &data, &spec).unwrap();
        let numeric = fd_jacobian(|t| moment_vector(t, &data, &spec).unwrap(), &theta);
        let err = relative_error(&numeric, &analytic);
        assert!(err <= 1e-6, "trial {trial}: kappa {kappa}, c {c}, rel err {err:e}");
    }
}

#[test]
fn poisson_jacobian_is_negative_information() {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let data = random_dataset(&mut rng, 30, 3);
    let theta = random_theta(&mut rng, 3);
    let jac = moment_jacobian(&theta, &data, &EstimatorSpec::poisson()).unwrap();
    let mut info = DMatrix::zeros(3, 3);
    for i in 0..data.n() {
        let x = data.x().row(i).transpose();
        info += &x * x.transpose() * x.dot(&theta).exp();
    }
    info /= data.n() as f64;
    assert!((jac + &info).amax() <= 1e-12 * info.amax());
}

#[test]
fn gradient_matches_finite_differences_of_objective() {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    for &kappa in &[-1.0, -0.5, 0.0, 0.5, 1.0] {
        let data = random_dataset(&mut rng, 5, 2);
        let theta = random_theta(&mut rng, 2);
        let spec = EstimatorSpec::new(kappa).unwrap();
        let (_, grad) = objective_and_gradient(&theta, &data, &spec).unwrap();
        let numeric = fd_jacobian(
            |t| DVector::from_element(1, objective_and_gradient(t, &data, &spec).unwrap().0),
            &theta,
        );
        let err = relative_error(&numeric.transpose(), &DMatrix::from_column_slice(2, 1, grad.as_slice()));
        assert!(err <= 1e-6, "kappa {kappa}: rel err {err:e}");
    }
}

#[test]
fn poisson_root_matches_bisection() {
    let e = std::f64::consts::E;
    let data = Dataset::from_rows(vec![e, e * e], &[vec![1.0], vec![2.0]]).unwrap();
    let f = |t: f64| (e - t.exp()) + 2.0 * (e * e - (2.0 * t).exp());
    let (mut lo, mut hi) = (-5.0, 5.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let fit = fit_poisson(&data).unwrap();
    assert!((fit.theta_hat[0] - 0.5 * (lo + hi)).abs() <= 1e-6);
    assert!((fit.theta_hat[0] - 1.0).abs() <= 1e-6);
}

/// Minimizes `||m||_inf` over a box of radius 5 around `center` by three
/// levels of grid refinement (101 points per axis per level).
fn grid_oracle(data: &Dataset, spec: &EstimatorSpec, center: &DVector<f64>) -> DVector<f64> {
    let d = center.len();
    let mut best = center.clone();
    let mut radius = 5.0;
    let points = 101usize;
    for _ in 0..3 {
        let origin = best.clone();
        let step = 2.0 * radius / (points - 1) as f64;
        let mut best_norm = f64::INFINITY;
        for idx in 0..points.pow(d as u32) {
            let mut theta = origin.clone();
            let mut rest = idx;
            for j in 0..d {
                theta[j] += -radius + step * (rest % points) as f64;
                rest /= points;
            }
            if let Ok(m) = moment_vector(&theta, data, spec) {
                if m.amax() < best_norm {
                    best_norm = m.amax();
                    best = theta;
                }
            }
        }
        radius = 2.0 * step;
    }
    best
}

#[test]
fn solver_agrees_with_grid_refinement_oracle() {
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    for trial in 0..12 {
        let d = 1 + trial % 2;
        let n = rng.random_range(8..=20);
        let theta0 = random_theta(&mut rng, d);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let y: Vec<f64> = rows
            .iter()
            .map(|r| {
                let eta: f64 = r.iter().zip(theta0.iter()).map(|(a, b)| a * b).sum();
                eta.exp() * rng.random_range(0.2..1.8)
            })
            .collect();
        let data = Dataset::from_rows(y, &rows).unwrap();
        let kappa = [-1.0, -0.5, 0.0, 0.5, 1.0][trial % 5];
        let spec = EstimatorSpec::new(kappa).unwrap();
        let fitted = fit(&data, &spec).unwrap();
        assert!(fitted.converged, "trial {trial}");
        let oracle = grid_oracle(&data, &spec, &theta0);
        let gap = (&fitted.theta_hat - &oracle).amax();
        assert!(gap <= 1e-3, "trial {trial}: kappa {kappa}, gap {gap:e}");
    }
}

#[test]
fn gamma_fit_on_simulated_data_is_consistent() {
    let config = DgpConfig {
        alpha: 1.0,
        n: 3000,
        seed: 17,
        ..DgpConfig::default()
    };
    let sample = generate(&config).unwrap();
    let spec = EstimatorSpec::new(-1.0).unwrap();
    let fitted = fit(&sample.dataset, &spec).unwrap();
    assert!(fitted.converged);
    assert!((&fitted.theta_hat - DVector::from_vec(vec![1.0, 1.0])).amax() <= 0.1);
    let oracle = grid_oracle(&sample.dataset, &spec, &DVector::from_vec(vec![1.0, 1.0]));
    assert!((&fitted.theta_hat - oracle).amax() <= 1e-3);
}

#[test]
fn sandwich_bread_matches_finite_differences() {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let data = random_dataset(&mut rng, 40, 3);
    let spec = EstimatorSpec::new(0.4).unwrap();
    let theta = fit(&data, &spec).unwrap().theta_hat;

    let bread = -fd_jacobian(|t| moment_vector(t, &data, &spec).unwrap(), &theta);
    let mut meat = DMatrix::zeros(3, 3);
    for i in 0..data.n() {
        let x = data.x().row(i).transpose();
        let mu = x.dot(&theta).exp();
        let psi = &x * ((data.y()[i] - mu) * mu.powf(0.4));
        meat += &psi * psi.transpose();
    }
    meat /= data.n() as f64;
    let inv = bread.try_inverse().unwrap();
    let oracle = &inv * meat * &inv / data.n() as f64;
    let cov = sandwich_covariance(&data, &spec, &theta).unwrap();
    assert!(relative_error(&cov, &oracle) <= 1e-5);
}

#[test]
fn intercept_sandwich_closed_form() {
    let data = Dataset::from_rows(vec![1.0, 3.0], &[vec![1.0], vec![1.0]]).unwrap();
    let theta = DVector::from_vec(vec![2f64.ln()]);
    let cov = sandwich_covariance(&data, &EstimatorSpec::poisson(), &theta).unwrap();
    // Population variance 1 over n * mean^2 = 2 * 4.
    assert!((cov[(0, 0)] - 1.0 / 8.0).abs() <= 1e-14);
}

#[test]
fn bootstrap_matches_exact_enumeration() {
    let y = [1.0, 3.0];
    // All n^n equally likely resamples of the two rows.
    let logs: Vec<f64> = (0..4)
        .map(|code| ((y[code & 1] + y[(code >> 1) & 1]) / 2.0_f64).ln())
        .collect();
    let mean = logs.iter().sum::<f64>() / 4.0;
    let exact = (logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / 4.0).sqrt();

    let data = Dataset::from_rows(y.to_vec(), &[vec![1.0], vec![1.0]]).unwrap();
    let se = bootstrap_se(&data, &EstimatorSpec::poisson(), 1000, 42).unwrap();
    assert_eq!(se.dropped, 0);
    assert!(
        (se.std_errors[0] - exact).abs() <= 0.02,
        "bootstrap {} vs enumeration {exact}",
        se.std_errors[0]
    );
}
