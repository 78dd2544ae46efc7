//! IRLS oracle tests: closed-form equivalence under the identity mean
//! function, MAP stationarity checked by an independent gradient evaluation,
//! and ascent of the log-posterior.

use laplace_dps::bayes::{linear_posterior, History};
use laplace_dps::glm::{glm_log_posterior, irls, irls_with_trace, MeanFunction};
use laplace_dps::linalg::GaussianBelief;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

fn random_prior(dim: usize, rng: &mut ChaCha12Rng) -> GaussianBelief {
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-0.8..0.8));
    GaussianBelief::new(
        DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0)),
        &g * g.transpose() + DMatrix::identity(dim, dim) * 0.5,
    )
    .unwrap()
}

fn logistic_history(
    dim: usize,
    n: usize,
    truth: &DVector<f64>,
    rng: &mut ChaCha12Rng,
) -> History {
    let mut h = History::new(dim, 1.0).unwrap();
    for _ in 0..n {
        let phi = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let p = MeanFunction::Logistic.value(phi.dot(truth));
        let y = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
        h.push(phi, y).unwrap();
    }
    h
}

#[test]
fn identity_mean_function_reduces_to_conjugate_posterior() {
    let mut rng = ChaCha12Rng::seed_from_u64(300);
    for _ in 0..100 {
        let dim = rng.random_range(1..=5);
        let n = rng.random_range(0..=200);
        let prior = random_prior(dim, &mut rng);
        let mut h = History::new(dim, 1.0).unwrap();
        for _ in 0..n {
            let phi = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            h.push(phi, rng.random_range(-2.0..2.0)).unwrap();
        }
        let fit = irls(&prior.mean, &prior.cov, &h, MeanFunction::Identity).unwrap();
        let exact = linear_posterior(&prior, &h).unwrap();
        assert!(
            (&fit.mean - &exact.mean).amax() < 1e-8,
            "mode differs at n={n}, d={dim}"
        );
        assert!((&fit.cov - &exact.cov).amax() < 1e-8);
    }
}

#[test]
fn logistic_map_estimate_is_stationary() {
    let mut rng = ChaCha12Rng::seed_from_u64(301);
    let truth = DVector::from_vec(vec![0.8, -1.1]);
    let h = logistic_history(2, 200, &truth, &mut rng);
    let prior = GaussianBelief::standard(2);
    let fit = irls(&prior.mean, &prior.cov, &h, MeanFunction::Logistic).unwrap();

    // Stationarity: prior pull equals the likelihood score at the mode.
    let mut score = DVector::zeros(2);
    for (phi, y) in h.records() {
        let residual = y - MeanFunction::Logistic.value(phi.dot(&fit.mean));
        score.axpy(residual, phi, 1.0);
    }
    let prior_pull = &fit.mean - &prior.mean; // prior covariance is I
    assert!(
        (&prior_pull - &score).amax() < 1e-6,
        "stationarity residual {:?}",
        (&prior_pull - &score).amax()
    );
}

#[test]
fn stationarity_holds_across_random_instances() {
    let mut rng = ChaCha12Rng::seed_from_u64(302);
    for _ in 0..20 {
        let dim = rng.random_range(1..=4);
        let truth = DVector::from_fn(dim, |_, _| rng.random_range(-1.5..1.5));
        let h = logistic_history(dim, rng.random_range(20..150), &truth, &mut rng);
        let prior = random_prior(dim, &mut rng);
        let fit = irls(&prior.mean, &prior.cov, &h, MeanFunction::Logistic).unwrap();

        let prior_prec = prior.cov.clone().try_inverse().unwrap();
        let mut gradient = -&prior_prec * (&fit.mean - &prior.mean);
        for (phi, y) in h.records() {
            let residual = y - MeanFunction::Logistic.value(phi.dot(&fit.mean));
            gradient.axpy(residual, phi, 1.0);
        }
        assert!((gradient).amax() < 1e-6);
    }
}

#[test]
fn log_posterior_is_nondecreasing_after_first_sweep() {
    let mut rng = ChaCha12Rng::seed_from_u64(303);
    for mf in [MeanFunction::Logistic, MeanFunction::Identity] {
        for _ in 0..10 {
            let dim = rng.random_range(1..=3);
            let truth = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
            let h = match mf {
                MeanFunction::Logistic => logistic_history(dim, 80, &truth, &mut rng),
                MeanFunction::Identity => {
                    let mut h = History::new(dim, 1.0).unwrap();
                    for _ in 0..80 {
                        let phi =
                            DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
                        let noise: f64 = rng.sample(StandardNormal);
                        let y = phi.dot(&truth) + noise;
                        h.push(phi, y).unwrap();
                    }
                    h
                }
            };
            let prior = random_prior(dim, &mut rng);
            let (_, trace) = irls_with_trace(&prior.mean, &prior.cov, &h, mf).unwrap();
            let values: Vec<f64> = trace
                .iter()
                .map(|theta| glm_log_posterior(theta, &prior.mean, &prior.cov, &h, mf).unwrap())
                .collect();
            for w in values.windows(2) {
                assert!(
                    w[1] >= w[0] - 1e-9 * (1.0 + w[0].abs()),
                    "log-posterior decreased: {} -> {}",
                    w[0],
                    w[1]
                );
            }
        }
    }
}

#[test]
fn covariance_is_psd_at_convergence() {
    let mut rng = ChaCha12Rng::seed_from_u64(304);
    for _ in 0..10 {
        let dim = rng.random_range(1..=4);
        let truth = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
        let h = logistic_history(dim, 60, &truth, &mut rng);
        let prior = random_prior(dim, &mut rng);
        let fit = irls(&prior.mean, &prior.cov, &h, MeanFunction::Logistic).unwrap();
        let smallest = fit.cov.symmetric_eigen().eigenvalues.min();
        assert!(smallest > 0.0, "covariance eigenvalue {smallest}");
    }
}

#[test]
fn saturated_logits_do_not_overflow() {
    // Extreme separation pushes logits to saturation; the floored division
    // must keep the sweep finite.
    let mut h = History::new(1, 1.0).unwrap();
    for _ in 0..50 {
        h.push(DVector::from_vec(vec![40.0]), 1.0).unwrap();
        h.push(DVector::from_vec(vec![-40.0]), 0.0).unwrap();
    }
    let prior = GaussianBelief::standard(1);
    let fit = irls(&prior.mean, &prior.cov, &h, MeanFunction::Logistic).unwrap();
    assert!(fit.mean[0].is_finite());
    assert!(fit.cov[(0, 0)].is_finite());
}
