//! Conditional sampling from the diffusion posterior.
//!
//! Three samplers share the reverse chain:
//!
//! - [`laplace_dps_linear`]: every stage conditional is the closed-form
//!   product of the stage prior and the evidence summary rescaled into the
//!   diffused space (precision scaled by the inverse cumulative rate, pull by
//!   its square root).
//! - [`laplace_dps_glm`]: the same chain where each stage conditional comes
//!   out of an IRLS Laplace fit against the raw history; with the identity
//!   mean function this reduces to the linear chain.
//! - [`dps_baseline`]: the score-guided baseline that steers the
//!   unconditional reverse step by the gradient of the squared observation
//!   residual, with an inverse-residual-norm step size. Its iterates may
//!   leave the finite range on long histories; that failure is surfaced as
//!   [`Error::NonFinite`], never masked.
//!
//! With no evidence all stage conditionals reduce exactly to the
//! unconditional stages, so the chains emit the same draws as
//! [`sample_prior`](crate::diffusion::sample_prior) under a paired RNG.
//! Stage 1 has zero conditional variance and is handled as its deterministic
//! limit: the chain output is the stage-1 mean, and no RNG is consumed there.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;

use crate::bayes::{summarize, EvidenceSummary, History};
use crate::diffusion::DiffusionModel;
use crate::glm::{irls, MeanFunction};
use crate::linalg::GaussianBelief;
use crate::{Error, Result};

/// Residual guard below which the baseline's gradient term is skipped; the
/// step size divides by the residual norm.
const RESIDUAL_GUARD: f64 = 1e-12;

/// One stage conditional of the reverse chain given evidence.
///
/// `stage` is `t` for the conditional of `S_{t-1}` given `s_t`, and `T + 1`
/// for the initial conditional of `S_T`. Stage 1 carries a zero covariance:
/// its draw is deterministic.
#[derive(Debug, Clone)]
pub struct ConditionalGaussianStage {
    pub stage: usize,
    pub law: GaussianBelief,
}

fn check_dims(model: &DiffusionModel, history: &History) -> Result<()> {
    if history.dim() != model.dim() {
        return Err(Error::BadParam(format!(
            "history dimension {} does not match model dimension {}",
            history.dim(),
            model.dim()
        )));
    }
    Ok(())
}

/// Conditional of `S_T` given linear evidence: the standard-normal prior
/// times the evidence summary diffused to stage `T`.
pub fn linear_initial_stage(
    model: &DiffusionModel,
    evidence: &EvidenceSummary,
) -> Result<ConditionalGaussianStage> {
    let d = model.dim();
    let stage = model.stages() + 1;
    if evidence.is_vacuous() {
        return Ok(ConditionalGaussianStage {
            stage,
            law: GaussianBelief::standard(d),
        });
    }
    let alpha_bar_last = model.schedule().alpha_bar(model.stages());
    let mut precision = &evidence.precision / alpha_bar_last;
    for i in 0..d {
        precision[(i, i)] += 1.0;
    }
    let chol = Cholesky::new(precision)
        .ok_or_else(|| Error::Singular("initial stage precision".to_string()))?;
    let pull = &evidence.weighted_sum / alpha_bar_last.sqrt();
    let mean = chol.solve(&pull);
    let cov = chol.inverse();
    Ok(ConditionalGaussianStage {
        stage,
        law: GaussianBelief::new(mean, cov)?,
    })
}

/// Conditional of `S_{t-1}` given `s_t` and linear evidence, for
/// `t in 1..=T`.
///
/// For `t > 1` the stage prior `N(mean_t(s_t), beta_tilde_t I)` is fused with
/// the evidence rescaled by the cumulative rate at `t - 1`. At `t = 1` the
/// stage variance is exactly zero and the conditional collapses onto the
/// stage mean regardless of evidence, which is the limit of the fusion
/// formula as the prior precision diverges.
pub fn linear_stage(
    model: &DiffusionModel,
    evidence: &EvidenceSummary,
    t: usize,
    s_t: &DVector<f64>,
) -> Result<ConditionalGaussianStage> {
    let d = model.dim();
    let (stage_mean, _) = model.reverse_mean(t, s_t)?;
    if t == 1 {
        return Ok(ConditionalGaussianStage {
            stage: t,
            law: GaussianBelief::new(stage_mean, DMatrix::zeros(d, d))?,
        });
    }
    let stage_var = model.schedule().beta_tilde(t);
    if evidence.is_vacuous() {
        return Ok(ConditionalGaussianStage {
            stage: t,
            law: GaussianBelief::isotropic(stage_mean, stage_var),
        });
    }
    let alpha_bar_prev = model.schedule().alpha_bar(t - 1);
    let mut precision = &evidence.precision / alpha_bar_prev;
    for i in 0..d {
        precision[(i, i)] += 1.0 / stage_var;
    }
    let chol = Cholesky::new(precision)
        .ok_or_else(|| Error::Singular(format!("stage {t} precision")))?;
    let pull = &stage_mean / stage_var + &evidence.weighted_sum / alpha_bar_prev.sqrt();
    let mean = chol.solve(&pull);
    let cov = chol.inverse();
    Ok(ConditionalGaussianStage {
        stage: t,
        law: GaussianBelief::new(mean, cov)?,
    })
}

/// One posterior draw under linear-Gaussian evidence.
pub fn laplace_dps_linear<R: Rng + ?Sized>(
    model: &DiffusionModel,
    history: &History,
    rng: &mut R,
) -> Result<DVector<f64>> {
    check_dims(model, history)?;
    let evidence = summarize(history);
    let init = linear_initial_stage(model, &evidence)?;
    let mut state = init.law.sample(rng)?;
    for t in (1..=model.stages()).rev() {
        let stage = linear_stage(model, &evidence, t, &state)?;
        state = if t > 1 {
            stage.law.sample(rng)?
        } else {
            stage.law.mean
        };
    }
    Ok(state)
}

/// Conditional of `S_T` under GLM evidence: an IRLS Laplace fit against the
/// rescaled standard-normal prior, mapped back to the diffused space.
pub fn glm_initial_stage(
    model: &DiffusionModel,
    history: &History,
    mean_fn: MeanFunction,
) -> Result<ConditionalGaussianStage> {
    check_dims(model, history)?;
    let d = model.dim();
    let stage = model.stages() + 1;
    if history.is_empty() {
        return Ok(ConditionalGaussianStage {
            stage,
            law: GaussianBelief::standard(d),
        });
    }
    let alpha_bar_last = model.schedule().alpha_bar(model.stages());
    let prior_mean = DVector::zeros(d);
    let prior_cov = DMatrix::identity(d, d) / alpha_bar_last;
    let fit = irls(&prior_mean, &prior_cov, history, mean_fn)?;
    Ok(ConditionalGaussianStage {
        stage,
        law: GaussianBelief::new(fit.mean * alpha_bar_last.sqrt(), fit.cov * alpha_bar_last)?,
    })
}

/// Conditional of `S_{t-1}` given `s_t` under GLM evidence, for `t in 1..=T`.
pub fn glm_stage(
    model: &DiffusionModel,
    history: &History,
    mean_fn: MeanFunction,
    t: usize,
    s_t: &DVector<f64>,
) -> Result<ConditionalGaussianStage> {
    check_dims(model, history)?;
    let d = model.dim();
    let (stage_mean, _) = model.reverse_mean(t, s_t)?;
    if t == 1 {
        // IRLS with a vanishing prior covariance returns its prior mean; the
        // stage draw is that limit, taken exactly.
        return Ok(ConditionalGaussianStage {
            stage: t,
            law: GaussianBelief::new(stage_mean, DMatrix::zeros(d, d))?,
        });
    }
    let stage_var = model.schedule().beta_tilde(t);
    if history.is_empty() {
        return Ok(ConditionalGaussianStage {
            stage: t,
            law: GaussianBelief::isotropic(stage_mean, stage_var),
        });
    }
    let alpha_bar_prev = model.schedule().alpha_bar(t - 1);
    let prior_mean = &stage_mean / alpha_bar_prev.sqrt();
    let prior_cov = DMatrix::identity(d, d) * (stage_var / alpha_bar_prev);
    let fit = irls(&prior_mean, &prior_cov, history, mean_fn)?;
    Ok(ConditionalGaussianStage {
        stage: t,
        law: GaussianBelief::new(fit.mean * alpha_bar_prev.sqrt(), fit.cov * alpha_bar_prev)?,
    })
}

/// One posterior draw under GLM evidence. With [`MeanFunction::Identity`]
/// this emits the same chain as [`laplace_dps_linear`] at unit noise scale.
pub fn laplace_dps_glm<R: Rng + ?Sized>(
    model: &DiffusionModel,
    history: &History,
    mean_fn: MeanFunction,
    rng: &mut R,
) -> Result<DVector<f64>> {
    check_dims(model, history)?;
    let init = glm_initial_stage(model, history, mean_fn)?;
    let mut state = init.law.sample(rng)?;
    for t in (1..=model.stages()).rev() {
        let stage = glm_stage(model, history, mean_fn, t, &state)?;
        state = if t > 1 {
            stage.law.sample(rng)?
        } else {
            stage.law.mean
        };
    }
    Ok(state)
}

/// Gradient of the squared-residual objective with respect to the stage
/// state, backpropagated exactly through the stage regressor.
pub fn residual_gradient(
    model: &DiffusionModel,
    history: &History,
    t: usize,
    s_t: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_dims(model, history)?;
    let (_, s0_hat) = model.reverse_mean(t, s_t)?;
    let mut cotangent = DVector::zeros(model.dim());
    for (phi, y) in history.records() {
        let residual = y - phi.dot(&s0_hat);
        cotangent.axpy(-2.0 * residual, phi, 1.0);
    }
    let alpha_bar_t = model.schedule().alpha_bar(t);
    let vjp = model.regressor(t).input_gradient(s_t, &cotangent);
    Ok((cotangent - vjp * (1.0 - alpha_bar_t).sqrt()) / alpha_bar_t.sqrt())
}

/// One draw from the score-guided baseline.
///
/// Each stage takes the unconditional reverse step and subtracts the
/// residual-objective gradient scaled by the inverse residual norm. The
/// gradient term is skipped when the residual sum is below the guard, so an
/// empty history reproduces the unconditional chain exactly.
pub fn dps_baseline<R: Rng + ?Sized>(
    model: &DiffusionModel,
    history: &History,
    rng: &mut R,
) -> Result<DVector<f64>> {
    check_dims(model, history)?;
    let mut state = GaussianBelief::standard(model.dim()).sample(rng)?;
    for t in (1..=model.stages()).rev() {
        let (mut mean, s0_hat) = model.reverse_mean(t, &state)?;
        if !history.is_empty() {
            let residual_sum: f64 = history
                .records()
                .iter()
                .map(|(phi, y)| {
                    let r = y - phi.dot(&s0_hat);
                    r * r
                })
                .sum();
            if residual_sum >= RESIDUAL_GUARD {
                let grad = residual_gradient(model, history, t, &state)?;
                let step_size = 1.0 / residual_sum.sqrt();
                mean -= grad * step_size;
            }
        }
        state = if t > 1 {
            GaussianBelief::isotropic(mean, model.schedule().beta_tilde(t)).sample(rng)?
        } else {
            mean
        };
        if state.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("baseline chain at stage {t}")));
        }
    }
    Ok(state)
}
