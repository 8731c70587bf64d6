//! Monte Carlo checks of the simulation design.

use gpml_core::dgp::{
    censor_probability, draw_covariates, draw_outcome, generate, CensorSpec, DgpConfig, UnitDraws,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

#[test]
fn covariate_law() {
    let x = draw_covariates(100_000, 7).unwrap();
    let c0: Vec<f64> = x.column(0).iter().copied().collect();
    let c1: Vec<f64> = x.column(1).iter().copied().collect();
    let (m0, v0) = mean_var(&c0);
    assert!(m0.abs() <= 0.02 && (v0 - 1.0).abs() <= 0.02, "normal column: {m0}, {v0}");
    let (m1, _) = mean_var(&c1);
    assert!((m1 - 0.5).abs() <= 0.01);
    assert!(c1.iter().all(|&u| (0.0..=1.0).contains(&u)));
}

/// Mean and variance of the noise factor at a fixed latent mean, drawn from an
/// independent generator.
fn noise_moments(mu0: f64, alpha: f64, draws: usize, seed: u64) -> (f64, f64, f64) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let ys: Vec<f64> = (0..draws)
        .map(|_| {
            let d = UnitDraws {
                uniform: rng.random(),
                normal: StandardNormal.sample(&mut rng),
            };
            draw_outcome(mu0, alpha, 0.0, d)
        })
        .collect();
    let (m, v) = mean_var(&ys);
    let fourth = ys.iter().map(|y| (y - m).powi(4)).sum::<f64>() / draws as f64;
    (m, v, fourth)
}

#[test]
fn noise_has_unit_mean_and_variance_at_alpha_two() {
    let (m, v, _) = noise_moments(1.0, 2.0, 1_000_000, 1);
    assert!((m - 1.0).abs() <= 0.01, "mean {m}");
    assert!((v - 1.0).abs() <= 0.05, "variance {v}");
}

#[test]
fn heteroskedasticity_law() {
    let draws = 1_000_000;
    for &alpha in &[0.0, 1.0, 2.0] {
        for &mu0 in &[0.25, 1.0, 4.0] {
            let (m, v, fourth) = noise_moments(mu0, alpha, draws, 3);
            let target = mu0.powf(alpha);
            let mean_se = (target / draws as f64).sqrt();
            let var_se = ((fourth - v * v) / draws as f64).sqrt();
            assert!((m - mu0).abs() <= 3.0 * mean_se, "alpha {alpha}, mu0 {mu0}: mean {m}");
            assert!((v - target).abs() <= 3.0 * var_se, "alpha {alpha}, mu0 {mu0}: var {v} vs {target}");
        }
    }
}

#[test]
fn uncensored_outcomes_scale_the_mean() {
    let config = DgpConfig {
        alpha: 2.0,
        n: 100_000,
        seed: 8,
        ..DgpConfig::default()
    };
    let s = generate(&config).unwrap();
    let ratio: Vec<f64> = (0..config.n).map(|i| s.dataset.y()[i] / s.latent_mean[i]).collect();
    let (m, _) = mean_var(&ratio);
    assert!((m - 1.0).abs() <= 0.01, "mean ratio {m}");
    assert!(s.dataset.y().iter().all(|&y| y > 0.0));
}

/// Average censoring probability over an independent covariate sample.
fn expected_zero_share(censor: &CensorSpec, draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..draws)
        .map(|_| {
            let x1: f64 = StandardNormal.sample(&mut rng);
            let x2: f64 = rng.random();
            censor_probability((x1 + x2).exp(), censor).unwrap()
        })
        .sum::<f64>()
        / draws as f64
}

#[test]
fn zero_share_matches_censoring_law() {
    let censor = CensorSpec::logistic_power(1.0, 2.0);
    let config = DgpConfig {
        alpha: 1.0,
        censor,
        n: 100_000,
        seed: 9,
        ..DgpConfig::default()
    };
    let s = generate(&config).unwrap();
    let zeros = s.dataset.y().iter().filter(|&&y| y == 0.0).count() as f64 / config.n as f64;
    let expected = expected_zero_share(&censor, 1_000_000, 10);
    assert!((zeros - expected).abs() <= 0.01, "{zeros} vs {expected}");
    for i in 0..config.n {
        assert_eq!(s.censored_mask[i], s.dataset.y()[i] == 0.0);
    }
}

#[test]
fn sparsity_falls_with_tau() {
    for beta in [1.0, 2.0] {
        let shares: Vec<f64> = [0.5, 1.0, 2.0, 4.0]
            .iter()
            .map(|&tau| expected_zero_share(&CensorSpec::logistic_power(tau, beta), 200_000, 11))
            .collect();
        assert!(shares.windows(2).all(|w| w[1] < w[0]), "beta {beta}: {shares:?}");
    }
}

#[test]
fn generation_is_pure() {
    let config = DgpConfig {
        censor: CensorSpec::double_exponential(1.0, 1.0),
        n: 500,
        seed: 99,
        ..DgpConfig::default()
    };
    assert_eq!(generate(&config).unwrap(), generate(&config).unwrap());
}
