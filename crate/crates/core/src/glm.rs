//! Generalized linear models: mean functions and the Laplace approximation
//! computed by iteratively reweighted least squares.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::bayes::History;
use crate::linalg::GaussianBelief;
use crate::{Error, Result};

/// Convergence threshold on the max-norm change of the mode estimate.
pub const IRLS_TOL: f64 = 1e-8;
/// Iteration budget; the objective is strictly convex with a Gaussian prior,
/// so this is ample at small dimension.
pub const IRLS_MAX_ITERS: usize = 100;
/// Floor applied to the mean-function derivative in the pseudo-observation
/// division only; the curvature weights use the unclamped value.
const DERIVATIVE_FLOOR: f64 = 1e-6;

/// A monotone observation mean function together with its derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeanFunction {
    Identity,
    Logistic,
}

impl MeanFunction {
    /// g(u).
    pub fn value(self, u: f64) -> f64 {
        match self {
            MeanFunction::Identity => u,
            // Branch on the sign so neither exp overflows.
            MeanFunction::Logistic => {
                if u >= 0.0 {
                    1.0 / (1.0 + (-u).exp())
                } else {
                    let e = u.exp();
                    e / (1.0 + e)
                }
            }
        }
    }

    /// dg/du.
    pub fn derivative(self, u: f64) -> f64 {
        match self {
            MeanFunction::Identity => 1.0,
            MeanFunction::Logistic => {
                let g = self.value(u);
                g * (1.0 - g)
            }
        }
    }

    /// The log-partition b(u) with db/du = g. Used by the log-posterior.
    pub fn log_partition(self, u: f64) -> f64 {
        match self {
            MeanFunction::Identity => 0.5 * u * u,
            // ln(1 + e^u), overflow-safe.
            MeanFunction::Logistic => u.max(0.0) + (-u.abs()).exp().ln_1p(),
        }
    }
}

/// Laplace approximation `(mode, inverse curvature)` of the GLM posterior
/// under a Gaussian prior, computed by IRLS.
///
/// Each sweep forms pseudo-observations
/// `z = u + (y - g(u)) / g'(u)` at the current mode and solves the weighted
/// least-squares system with curvature weights `g'(u)`. The iteration starts
/// at the prior mean and stops when the mode moves by less than
/// [`IRLS_TOL`] in max-norm. An empty history returns the prior arguments
/// unchanged, exactly.
///
/// Note the weights carry no observation-noise scale: with the identity mean
/// function this reproduces the conjugate linear posterior at unit noise.
pub fn irls(
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
    history: &History,
    mean_fn: MeanFunction,
) -> Result<GaussianBelief> {
    irls_with_trace(prior_mean, prior_cov, history, mean_fn).map(|(belief, _)| belief)
}

/// [`irls`] that also reports the mode after every sweep.
pub fn irls_with_trace(
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
    history: &History,
    mean_fn: MeanFunction,
) -> Result<(GaussianBelief, Vec<DVector<f64>>)> {
    let d = prior_mean.len();
    if history.dim() != d {
        return Err(Error::BadParam(format!(
            "history dimension {} does not match prior dimension {}",
            history.dim(),
            d
        )));
    }
    if history.is_empty() {
        let belief = GaussianBelief::new(prior_mean.clone(), prior_cov.clone())?;
        return Ok((belief, vec![prior_mean.clone()]));
    }

    let sym = (prior_cov + prior_cov.transpose()) * 0.5;
    let prior_chol =
        Cholesky::new(sym).ok_or_else(|| Error::Singular("prior covariance".to_string()))?;
    let prior_precision = prior_chol.inverse();
    let prior_pull = prior_chol.solve(prior_mean);

    let mut mode = prior_mean.clone();
    let mut trace = Vec::new();
    for _ in 0..IRLS_MAX_ITERS {
        let mut curvature = prior_precision.clone();
        let mut rhs = prior_pull.clone();
        for (phi, y) in history.records() {
            let u = phi.dot(&mode);
            let weight = mean_fn.derivative(u);
            let z = u + (y - mean_fn.value(u)) / weight.max(DERIVATIVE_FLOOR);
            curvature.ger(weight, phi, phi, 1.0);
            rhs.axpy(weight * z, phi, 1.0);
        }
        let chol = Cholesky::new(curvature)
            .ok_or_else(|| Error::Singular("IRLS curvature".to_string()))?;
        let next = chol.solve(&rhs);
        if next.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("IRLS mode update".to_string()));
        }
        let step = (&next - &mode).amax();
        mode = next;
        trace.push(mode.clone());
        if step <= IRLS_TOL {
            let cov = chol.inverse();
            return Ok((GaussianBelief::new(mode, cov)?, trace));
        }
    }
    Err(Error::NoConvergence(IRLS_MAX_ITERS))
}

/// Unnormalized GLM log-posterior under a Gaussian prior; used to check that
/// IRLS ascends and lands on a stationary point.
pub fn glm_log_posterior(
    theta: &DVector<f64>,
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
    history: &History,
    mean_fn: MeanFunction,
) -> Result<f64> {
    let sym = (prior_cov + prior_cov.transpose()) * 0.5;
    let chol = Cholesky::new(sym).ok_or_else(|| Error::Singular("prior covariance".to_string()))?;
    let diff = theta - prior_mean;
    let mut value = -0.5 * diff.dot(&chol.solve(&diff));
    for (phi, y) in history.records() {
        let u = phi.dot(theta);
        value += y * u - mean_fn.log_partition(u);
    }
    Ok(value)
}
