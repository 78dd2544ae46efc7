//! Dense small-dimension linear algebra and multivariate Gaussian algebra.
//!
//! Everything here is the currency of the posterior samplers: beliefs are
//! `(mean, covariance)` pairs, inversion always goes through Cholesky solves,
//! and factorization applies a small escalating diagonal jitter because the
//! stage covariances downstream are products of inverses and accumulate
//! round-off.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Draws a vector of independent standard normals.
pub fn standard_normal_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.sample(StandardNormal))
}

/// Lower-triangular Cholesky factor of a (nearly) PSD matrix.
///
/// The input is symmetrized first. On failure, a diagonal jitter of
/// `1e-12 * tr(M)/d` is added and escalated tenfold up to `1e-6 * tr(M)/d`
/// before giving up. The all-zero matrix factors to the zero matrix, so
/// degenerate (point-mass) Gaussians sample exactly at their mean.
pub fn cholesky(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = m.nrows();
    if d == 0 || m.ncols() != d {
        return Err(Error::BadParam(format!(
            "cholesky needs a square nonempty matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let sym = (m + m.transpose()) * 0.5;
    if sym.iter().all(|&x| x == 0.0) {
        return Ok(DMatrix::zeros(d, d));
    }
    if let Some(chol) = Cholesky::new(sym.clone()) {
        return Ok(chol.unpack());
    }
    let scale = sym.trace() / d as f64;
    let max_jitter = 1e-6 * scale;
    let mut jitter = 1e-12 * scale;
    while jitter > 0.0 && jitter <= max_jitter * (1.0 + 1e-12) {
        let mut bumped = sym.clone();
        for i in 0..d {
            bumped[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(bumped) {
            return Ok(chol.unpack());
        }
        jitter *= 10.0;
    }
    Err(Error::NotPsd(format!(
        "factorization failed after jitter up to {max_jitter:.3e}"
    )))
}

fn factor_invertible(cov: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    let sym = (cov + cov.transpose()) * 0.5;
    Cholesky::new(sym).ok_or_else(|| Error::Singular(what.to_string()))
}

/// A multivariate Gaussian belief: mean vector plus PSD covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::BadParam(format!(
                "mean has dimension {} but covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        Ok(Self { mean, cov })
    }

    /// The standard normal N(0, I_d).
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            cov: DMatrix::identity(dim, dim),
        }
    }

    /// N(mean, var * I).
    pub fn isotropic(mean: DVector<f64>, var: f64) -> Self {
        let d = mean.len();
        Self {
            mean,
            cov: DMatrix::identity(d, d) * var,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// One draw, as `mean + L z` with `L` the (jittered) Cholesky factor.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        let l = cholesky(&self.cov)?;
        let z = standard_normal_vector(self.dim(), rng);
        Ok(&self.mean + l * z)
    }

    /// Normalized density product of two Gaussians.
    ///
    /// Precision matrices add; the mean is the precision-weighted average.
    pub fn product(&self, other: &GaussianBelief) -> Result<GaussianBelief> {
        if self.dim() != other.dim() {
            return Err(Error::BadParam(format!(
                "dimension mismatch in product: {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        let c1 = factor_invertible(&self.cov, "first covariance in product")?;
        let c2 = factor_invertible(&other.cov, "second covariance in product")?;
        let precision = c1.inverse() + c2.inverse();
        let cp = Cholesky::new(precision)
            .ok_or_else(|| Error::Singular("combined precision in product".to_string()))?;
        let rhs = c1.solve(&self.mean) + c2.solve(&other.mean);
        let mean = cp.solve(&rhs);
        let cov = cp.inverse();
        Ok(GaussianBelief { mean, cov })
    }

    /// KL divergence KL(self || other), in nats.
    pub fn kl(&self, other: &GaussianBelief) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::BadParam(format!(
                "dimension mismatch in kl: {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        let d = self.dim() as f64;
        let c2 = factor_invertible(&other.cov, "second covariance in kl")?;
        let c1 = factor_invertible(&self.cov, "first covariance in kl")?;
        let diff = &other.mean - &self.mean;
        let quad = diff.dot(&c2.solve(&diff));
        let trace = c2.solve(&self.cov).trace();
        let log_det_1 = log_det_from_factor(&c1);
        let log_det_2 = log_det_from_factor(&c2);
        Ok(0.5 * (quad + trace - (log_det_1 - log_det_2) - d))
    }
}

fn log_det_from_factor(chol: &Cholesky<f64, nalgebra::Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>()
}
