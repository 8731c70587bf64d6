use gpml_core::asymptotics::{
    asymptotic_variance, bias_approximation, corollary_bias_1d, efficient_kappa, population_moments, pseudo_true,
    uncensored_variance, NamedEstimator, PopulationContext,
};
use gpml_core::dgp::{CensorSpec, DgpConfig};
use gpml_core::experiments::simulate_cell;
use gpml_core::EstimatorSpec;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn grid_01() -> Vec<f64> {
    (0..=20).map(|i| (i as f64 - 10.0) / 10.0).collect()
}

#[test]
fn trace_is_minimized_at_the_efficient_kappa() {
    let base = PopulationContext::standard(&[1.0, 1.0], 0.0, CensorSpec::none()).unwrap();
    for alpha in [0.0, 0.5, 1.0, 1.5, 2.0] {
        let ctx = base.with_alpha(alpha).unwrap();
        let grid = grid_01();
        let traces: Vec<f64> = grid
            .iter()
            .map(|&k| asymptotic_variance(k, &ctx).unwrap().trace())
            .collect();
        let best = (0..grid.len()).min_by(|&a, &b| traces[a].total_cmp(&traces[b])).unwrap();
        let target = efficient_kappa(alpha);
        let nearest = (0..grid.len())
            .min_by(|&a, &b| (grid[a] - target).abs().total_cmp(&(grid[b] - target).abs()))
            .unwrap();
        assert_eq!(best, nearest, "alpha {alpha}: traces {traces:?}");
    }
}

#[test]
fn equi_dispersion_favors_poisson() {
    let ctx = PopulationContext::standard(&[1.0, 1.0], 1.0, CensorSpec::none()).unwrap();
    let t = |k: f64| asymptotic_variance(k, &ctx).unwrap().trace();
    assert!(t(0.0) < t(-1.0) && t(0.0) < t(1.0));
}

#[test]
fn variance_is_positive_definite_under_censoring() {
    let ctx = PopulationContext::new(&[1.0, 1.0], 1.0, CensorSpec::logistic_power(1.0, 2.0), 20_000, 4).unwrap();
    for k in [-1.0, -0.5, 0.0, 0.5, 1.0] {
        let v = asymptotic_variance(k, &ctx).unwrap();
        assert_eq!(v, v.transpose());
        let eig = v.clone().symmetric_eigen().eigenvalues;
        assert!(eig.min() > 1e-10 * eig.max(), "kappa {k}: {eig}");
    }
}

#[test]
fn uncensored_reduction_is_exact() {
    let ctx = PopulationContext::standard(&[1.0, 1.0], 0.7, CensorSpec::none()).unwrap();
    for k in [-1.0, 0.0, 0.35, 1.0] {
        assert_eq!(asymptotic_variance(k, &ctx).unwrap(), uncensored_variance(k, &ctx).unwrap());
    }
}

#[test]
fn vanishing_threshold_is_uncensored() {
    let plain = PopulationContext::new(&[1.0, 1.0], 1.0, CensorSpec::none(), 20_000, 5).unwrap();
    let tiny = PopulationContext::new(&[1.0, 1.0], 1.0, CensorSpec::threshold(1e-300), 20_000, 5).unwrap();
    let theta = nalgebra::DVector::from_vec(vec![0.8, 1.3]);
    assert_eq!(
        population_moments(&theta, 0.0, &plain).unwrap(),
        population_moments(&theta, 0.0, &tiny).unwrap()
    );
}

fn uniform_draws(lo: f64, hi: f64, m: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    DMatrix::from_fn(m, 1, |_, _| rng.random_range(lo..hi))
}

#[test]
fn threshold_below_support_leaves_theta0() {
    // x in [0, 1] with theta0 = 1 gives mu0 >= 1.
    let ctx = PopulationContext::with_draws(&[1.0], 1.0, CensorSpec::threshold(0.9), uniform_draws(0.0, 1.0, 10_000, 6))
        .unwrap();
    assert!(ctx.censor_probabilities().iter().all(|&p| p == 0.0));
    for k in [-1.0, 0.0, 1.0] {
        assert_eq!(pseudo_true(k, &ctx).unwrap()[0], 1.0);
    }
}

#[test]
fn nls_is_less_biased_under_threshold_censoring() {
    for c in [0.3, 0.5, 0.8, 1.0] {
        let ctx = PopulationContext::with_draws(&[-1.0], 0.0, CensorSpec::threshold(c), uniform_draws(0.0, 2.0, 200_000, 7))
            .unwrap();
        let poisson = corollary_bias_1d(NamedEstimator::Poisson, &ctx).unwrap();
        let nls = corollary_bias_1d(NamedEstimator::Nls, &ctx).unwrap();
        assert!(poisson < 0.0, "c {c}: {poisson}");
        assert!(nls.abs() <= poisson.abs(), "c {c}: nls {nls} vs poisson {poisson}");

        let general = bias_approximation(0.0, &ctx).unwrap()[0];
        assert!((general - poisson).abs() <= 0.1 * poisson.abs(), "c {c}: {general} vs {poisson}");
    }
}

#[test]
fn corollary_vanishes_without_censoring() {
    let ctx = PopulationContext::with_draws(&[0.5], 1.0, CensorSpec::none(), uniform_draws(0.0, 1.0, 5_000, 8)).unwrap();
    assert_eq!(corollary_bias_1d(NamedEstimator::Poisson, &ctx).unwrap(), 0.0);
    assert_eq!(corollary_bias_1d(NamedEstimator::Nls, &ctx).unwrap(), 0.0);
}

#[test]
fn pseudo_true_matches_average_poisson_fit() {
    let censor = CensorSpec::logistic_power(2.0, 2.0);
    let dgp = DgpConfig {
        alpha: 1.0,
        censor,
        n: 3000,
        seed: 0,
        ..DgpConfig::default()
    };
    let reps = 500;
    let draws = simulate_cell(&dgp, &[0.0], reps, 31, &EstimatorSpec::poisson()).unwrap();
    assert_eq!(draws.converged(0), reps);
    let ctx = PopulationContext::standard(&[1.0, 1.0], 1.0, censor).unwrap();
    let target = pseudo_true(0.0, &ctx).unwrap();
    for coord in 0..2 {
        let s = draws.summary(0, coord);
        let mc_mean = 1.0 + s.bias;
        assert!(
            (mc_mean - target[coord]).abs() <= 3.0 * s.bias_se,
            "coord {coord}: Monte Carlo {mc_mean} +- {} vs pseudo-true {}",
            s.bias_se,
            target[coord]
        );
    }
}
