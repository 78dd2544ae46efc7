//! Exact Bayesian linear-model posteriors and evidence summaries.
//!
//! The evidence enters every downstream formula only through the pair
//! `(precision, weighted_sum)`, which is well defined even when the history
//! is shorter than the dimension; the evidence mean itself is never
//! materialized.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::linalg::GaussianBelief;
use crate::{Error, Result};

/// Ordered evidence records `(features, observation)` with a shared noise
/// scale.
#[derive(Debug, Clone)]
pub struct History {
    dim: usize,
    noise_scale: f64,
    records: Vec<(DVector<f64>, f64)>,
}

impl History {
    pub fn new(dim: usize, noise_scale: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::BadParam("history dimension must be >= 1".into()));
        }
        if !(noise_scale > 0.0) || !noise_scale.is_finite() {
            return Err(Error::BadParam(format!(
                "noise scale must be positive and finite, got {noise_scale}"
            )));
        }
        Ok(Self {
            dim,
            noise_scale,
            records: Vec::new(),
        })
    }

    pub fn push(&mut self, features: DVector<f64>, observation: f64) -> Result<()> {
        if features.len() != self.dim {
            return Err(Error::BadParam(format!(
                "feature dimension {} does not match history dimension {}",
                features.len(),
                self.dim
            )));
        }
        self.records.push((features, observation));
        Ok(())
    }

    pub fn records(&self) -> &[(DVector<f64>, f64)] {
        &self.records
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_scale(&self) -> f64 {
        self.noise_scale
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Least-squares statistics of a history: the evidence precision
/// `sigma^-2 sum phi phi^T` and the weighted observation sum
/// `sigma^-2 sum phi y`.
#[derive(Debug, Clone)]
pub struct EvidenceSummary {
    pub precision: DMatrix<f64>,
    pub weighted_sum: DVector<f64>,
}

impl EvidenceSummary {
    /// True when the summary carries no information (empty history, or one
    /// whose features are all zero). Posteriors then reduce to their priors
    /// exactly.
    pub fn is_vacuous(&self) -> bool {
        self.precision.iter().all(|&x| x == 0.0) && self.weighted_sum.iter().all(|&x| x == 0.0)
    }
}

/// Accumulates the evidence summary of a history.
pub fn summarize(history: &History) -> EvidenceSummary {
    let d = history.dim();
    let inv_var = 1.0 / (history.noise_scale() * history.noise_scale());
    let mut precision = DMatrix::zeros(d, d);
    let mut weighted_sum = DVector::zeros(d);
    for (phi, y) in history.records() {
        precision.ger(inv_var, phi, phi, 1.0);
        weighted_sum.axpy(inv_var * *y, phi, 1.0);
    }
    EvidenceSummary {
        precision,
        weighted_sum,
    }
}

/// Conjugate posterior of a Gaussian prior under linear-Gaussian evidence.
///
/// Posterior precision is the sum of prior and evidence precisions; the mean
/// solves `(prior_prec + evidence_prec) m = prior_prec * prior_mean + b`.
/// An empty history returns the prior unchanged.
pub fn linear_posterior(prior: &GaussianBelief, history: &History) -> Result<GaussianBelief> {
    if history.dim() != prior.dim() {
        return Err(Error::BadParam(format!(
            "history dimension {} does not match prior dimension {}",
            history.dim(),
            prior.dim()
        )));
    }
    if history.is_empty() {
        return Ok(prior.clone());
    }
    let summary = summarize(history);
    posterior_from_summary(prior, &summary)
}

/// Same as [`linear_posterior`] but from a precomputed evidence summary.
pub fn posterior_from_summary(
    prior: &GaussianBelief,
    summary: &EvidenceSummary,
) -> Result<GaussianBelief> {
    if summary.is_vacuous() {
        return Ok(prior.clone());
    }
    let sym = (&prior.cov + prior.cov.transpose()) * 0.5;
    let prior_chol =
        Cholesky::new(sym).ok_or_else(|| Error::Singular("prior covariance".to_string()))?;
    let prior_precision = prior_chol.inverse();
    let rhs = prior_chol.solve(&prior.mean) + &summary.weighted_sum;
    let posterior_precision = prior_precision + &summary.precision;
    let chol = Cholesky::new(posterior_precision)
        .ok_or_else(|| Error::Singular("posterior precision".to_string()))?;
    let mean = chol.solve(&rhs);
    let cov = chol.inverse();
    GaussianBelief::new(mean, cov)
}
