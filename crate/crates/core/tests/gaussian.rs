//! Oracle tests for the Gaussian algebra: density products and KL divergences
//! checked against grid integration, sampling checked against Monte Carlo
//! moments.

use laplace_dps::linalg::{cholesky, GaussianBelief};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let z = (x - mean) * (x - mean) / var;
    (-0.5 * z).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// Moments of the normalized pointwise product of two 1-d Gaussian densities,
/// by trapezoid integration on a fine grid.
fn grid_product_moments_1d(g1: &GaussianBelief, g2: &GaussianBelief) -> (f64, f64) {
    let (m1, v1) = (g1.mean[0], g1.cov[(0, 0)]);
    let (m2, v2) = (g2.mean[0], g2.cov[(0, 0)]);
    let spread = v1.max(v2).sqrt();
    let lo = m1.min(m2) - 10.0 * spread;
    let hi = m1.max(m2) + 10.0 * spread;
    let n = 200_001;
    let h = (hi - lo) / (n - 1) as f64;
    let mut mass = 0.0;
    let mut first = 0.0;
    let mut second = 0.0;
    for i in 0..n {
        let x = lo + h * i as f64;
        let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        let p = w * normal_pdf(x, m1, v1) * normal_pdf(x, m2, v2);
        mass += p;
        first += p * x;
        second += p * x * x;
    }
    let mean = first / mass;
    (mean, second / mass - mean * mean)
}

fn density_2d(g: &GaussianBelief, x: f64, y: f64) -> f64 {
    let det = g.cov[(0, 0)] * g.cov[(1, 1)] - g.cov[(0, 1)] * g.cov[(1, 0)];
    let dx = x - g.mean[0];
    let dy = y - g.mean[1];
    let quad = (g.cov[(1, 1)] * dx * dx - 2.0 * g.cov[(0, 1)] * dx * dy
        + g.cov[(0, 0)] * dy * dy)
        / det;
    (-0.5 * quad).exp() / (2.0 * std::f64::consts::PI * det.sqrt())
}

fn random_belief(dim: usize, rng: &mut ChaCha12Rng) -> GaussianBelief {
    let mean = DVector::from_fn(dim, |_, _| rng.random_range(-1.5..1.5));
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
    let cov = &g * g.transpose() + DMatrix::identity(dim, dim) * 0.3;
    GaussianBelief::new(mean, cov).unwrap()
}

#[test]
fn product_matches_grid_integration_1d() {
    // The fixed case first: N(0,1) x N(3, 0.5) has precision 3, mean 2.
    let g1 = GaussianBelief::isotropic(DVector::from_vec(vec![0.0]), 1.0);
    let g2 = GaussianBelief::isotropic(DVector::from_vec(vec![3.0]), 0.5);
    let p = g1.product(&g2).unwrap();
    assert!((p.mean[0] - 2.0).abs() < 1e-12);
    assert!((p.cov[(0, 0)] - 1.0 / 3.0).abs() < 1e-12);
    let (gm, gv) = grid_product_moments_1d(&g1, &g2);
    assert!((p.mean[0] - gm).abs() < 1e-3);
    assert!((p.cov[(0, 0)] - gv).abs() < 1e-3);

    let mut rng = ChaCha12Rng::seed_from_u64(100);
    for _ in 0..10 {
        let g1 = random_belief(1, &mut rng);
        let g2 = random_belief(1, &mut rng);
        let p = g1.product(&g2).unwrap();
        let (gm, gv) = grid_product_moments_1d(&g1, &g2);
        assert!((p.mean[0] - gm).abs() < 1e-3, "mean {} vs grid {gm}", p.mean[0]);
        assert!((p.cov[(0, 0)] - gv).abs() < 1e-3);
    }
}

#[test]
fn product_matches_grid_integration_2d() {
    let mut rng = ChaCha12Rng::seed_from_u64(101);
    for _ in 0..3 {
        let g1 = random_belief(2, &mut rng);
        let g2 = random_belief(2, &mut rng);
        let p = g1.product(&g2).unwrap();

        let lo = -9.0;
        let hi = 9.0;
        let n = 600;
        let h = (hi - lo) / (n - 1) as f64;
        let mut mass = 0.0;
        let mut mx = 0.0;
        let mut my = 0.0;
        let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let x = lo + h * i as f64;
            for j in 0..n {
                let y = lo + h * j as f64;
                let v = density_2d(&g1, x, y) * density_2d(&g2, x, y);
                mass += v;
                mx += v * x;
                my += v * y;
                sxx += v * x * x;
                sxy += v * x * y;
                syy += v * y * y;
            }
        }
        mx /= mass;
        my /= mass;
        let cxx = sxx / mass - mx * mx;
        let cxy = sxy / mass - mx * my;
        let cyy = syy / mass - my * my;

        assert!((p.mean[0] - mx).abs() < 1e-3);
        assert!((p.mean[1] - my).abs() < 1e-3);
        assert!((p.cov[(0, 0)] - cxx).abs() < 1e-3);
        assert!((p.cov[(0, 1)] - cxy).abs() < 1e-3);
        assert!((p.cov[(1, 1)] - cyy).abs() < 1e-3);
    }
}

#[test]
fn kl_matches_numeric_integration_1d() {
    let mut rng = ChaCha12Rng::seed_from_u64(102);
    for _ in 0..20 {
        let m1 = rng.random_range(-2.0..2.0);
        let m2 = rng.random_range(-2.0..2.0);
        let v1 = rng.random_range(0.3..3.0);
        let v2 = rng.random_range(0.3..3.0);
        let p = GaussianBelief::isotropic(DVector::from_vec(vec![m1]), v1);
        let q = GaussianBelief::isotropic(DVector::from_vec(vec![m2]), v2);
        let kl = p.kl(&q).unwrap();

        let lo = m1 - 14.0 * v1.sqrt();
        let hi = m1 + 14.0 * v1.sqrt();
        let n = 400_001;
        let h = (hi - lo) / (n - 1) as f64;
        let mut acc = 0.0;
        for i in 0..n {
            let x = lo + h * i as f64;
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            let pd = normal_pdf(x, m1, v1);
            if pd > 0.0 {
                acc += w * pd * (pd / normal_pdf(x, m2, v2)).ln();
            }
        }
        let numeric = acc * h;
        assert!(
            (kl - numeric).abs() < 1e-4,
            "kl {kl} vs numeric {numeric} for ({m1},{v1}) || ({m2},{v2})"
        );
    }
}

#[test]
fn product_is_commutative_and_precisions_add() {
    let mut rng = ChaCha12Rng::seed_from_u64(103);
    for _ in 0..25 {
        let dim = rng.random_range(1..=5);
        let g1 = random_belief(dim, &mut rng);
        let g2 = random_belief(dim, &mut rng);
        let a = g1.product(&g2).unwrap();
        let b = g2.product(&g1).unwrap();
        assert!((&a.mean - &b.mean).amax() < 1e-10);
        assert!((&a.cov - &b.cov).amax() < 1e-10);

        let prec = a.cov.clone().try_inverse().unwrap();
        let expected = g1.cov.clone().try_inverse().unwrap() + g2.cov.clone().try_inverse().unwrap();
        let scale = 1.0 + expected.amax();
        assert!((prec - expected).amax() < 1e-10 * scale);
    }
}

#[test]
fn product_with_flat_gaussian_returns_the_other_factor() {
    let mut rng = ChaCha12Rng::seed_from_u64(104);
    let g1 = random_belief(3, &mut rng);
    let flat = GaussianBelief::isotropic(DVector::from_vec(vec![5.0, -3.0, 1.0]), 1e8);
    let p = g1.product(&flat).unwrap();
    assert!((&p.mean - &g1.mean).amax() < 1e-6);
    assert!((&p.cov - &g1.cov).amax() < 1e-6);
}

#[test]
fn kl_is_nonnegative_on_random_pairs() {
    let mut rng = ChaCha12Rng::seed_from_u64(105);
    for _ in 0..1000 {
        let dim = rng.random_range(1..=5);
        let p = random_belief(dim, &mut rng);
        let q = random_belief(dim, &mut rng);
        let kl = p.kl(&q).unwrap();
        assert!(kl >= -1e-12, "kl must be nonnegative, got {kl}");
    }
}

#[test]
fn sample_mean_obeys_clt_bound() {
    let g = GaussianBelief::standard(2);
    let mut rng = ChaCha12Rng::seed_from_u64(106);
    let n = 100_000;
    let mut acc = DVector::zeros(2);
    for _ in 0..n {
        acc += g.sample(&mut rng).unwrap();
    }
    acc /= n as f64;
    assert!(acc.amax() < 0.02, "sample mean too far from zero: {acc}");
}

#[test]
fn sample_variances_match_diagonal_covariance() {
    let g = GaussianBelief::new(
        DVector::zeros(2),
        DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0])),
    )
    .unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(107);
    let n = 100_000;
    let mut sums = DVector::zeros(2);
    let mut squares = DVector::zeros(2);
    for _ in 0..n {
        let s = g.sample(&mut rng).unwrap();
        sums += &s;
        squares += s.component_mul(&s);
    }
    for (i, &target) in [4.0, 1.0].iter().enumerate() {
        let mean = sums[i] / n as f64;
        let var = squares[i] / n as f64 - mean * mean;
        assert!(
            (var - target).abs() < 0.05 * target,
            "variance {var} vs {target}"
        );
    }
}

#[test]
fn sample_covariance_converges_on_correlated_gaussian() {
    let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.8, 0.8, 1.0]);
    let g = GaussianBelief::new(DVector::from_vec(vec![1.0, -1.0]), cov.clone()).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(108);
    let n = 100_000;
    let mut mean = DVector::zeros(2);
    let mut second = DMatrix::zeros(2, 2);
    for _ in 0..n {
        let s = g.sample(&mut rng).unwrap();
        mean += &s;
        second.ger(1.0, &s, &s, 1.0);
    }
    mean /= n as f64;
    second /= n as f64;
    let empirical = second - &mean * mean.transpose();
    assert!((&mean - &g.mean).amax() < 0.03);
    assert!((empirical - cov).amax() < 0.1);
}

#[test]
fn jittered_factor_keeps_reconstruction_error_small() {
    let mut rng = ChaCha12Rng::seed_from_u64(109);
    for _ in 0..50 {
        let dim = rng.random_range(1..=6);
        let b = random_belief(dim, &mut rng);
        let l = cholesky(&b.cov).unwrap();
        let back = &l * l.transpose();
        let err = (&back - &b.cov).norm() / b.cov.norm();
        assert!(err < 1e-8, "relative reconstruction error {err}");
    }
}
