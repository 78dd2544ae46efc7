//! Posterior sampling with diffusion model priors.
//!
//! This crate implements:
//!
//! - dense small-dimension Gaussian algebra (products, KL, Cholesky sampling),
//! - exact Bayesian linear-model posteriors and evidence summaries,
//! - generalized linear models with a Laplace approximation computed by
//!   iteratively reweighted least squares,
//! - a minimal denoising diffusion model (constant-rate schedule, one noise
//!   regressor per stage) with training and unconditional sampling,
//! - conditional posterior samplers for diffusion priors: a closed-form
//!   Laplace chain for linear evidence, an IRLS-based chain for GLM evidence,
//!   and a score-guided baseline,
//! - a contextual bandit simulator with Thompson-sampling agents over all of
//!   the above priors and per-round regret accounting.
//!
//! All randomness flows through caller-supplied RNGs, so every operation is
//! deterministic given a seed. Dimensions are expected to be small (d <= 32);
//! storage is dense throughout.

pub mod bandit;
pub mod bayes;
pub mod diffusion;
mod error;
pub mod glm;
pub mod linalg;
pub mod mlp;
pub mod sampler;
pub mod seed;

pub use error::{Error, Result};
pub use linalg::GaussianBelief;
