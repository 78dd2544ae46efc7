//! Forward diffusion, reverse-process construction, per-stage regressor
//! training, and unconditional prior sampling.
//!
//! The model is deliberately small: a constant-rate schedule, a fixed
//! isotropic stage covariance, and one independent noise regressor per stage
//! (no time embedding), each trained by least squares on freshly diffused
//! draws from the dataset. Stage 1 of the reverse chain is deterministic
//! because its conditional variance is exactly zero.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::{standard_normal_vector, GaussianBelief};
use crate::mlp::{AdamTrainer, Mlp, TrainConfig};
use crate::seed::stream_rng;
use crate::{Error, Result};

/// Hidden width of every stage regressor.
pub const REGRESSOR_HIDDEN: usize = 64;

/// Version written into model files.
pub const MODEL_FORMAT_VERSION: u32 = 1;

const STAGE_STREAM_TAG: u64 = 0x7374_6167;

/// Diffusion rates and the quantities derived from them.
///
/// Stage indices are 1-based: `alpha(t)` and `beta_tilde(t)` accept
/// `1..=stages`, `alpha_bar(t)` accepts `0..=stages` with `alpha_bar(0) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    alphas: Vec<f64>,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    beta_tildes: Vec<f64>,
}

impl DiffusionSchedule {
    /// Constant-rate schedule with `stages` stages.
    pub fn constant(stages: usize, alpha: f64) -> Result<Self> {
        Self::from_alphas(vec![alpha; stages])
    }

    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::BadParam("schedule needs at least one stage".into()));
        }
        if alphas.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
            return Err(Error::BadParam(
                "every diffusion rate must lie strictly inside (0, 1)".into(),
            ));
        }
        let stages = alphas.len();
        let betas: Vec<f64> = alphas.iter().map(|a| 1.0 - a).collect();
        let mut alpha_bars = Vec::with_capacity(stages + 1);
        alpha_bars.push(1.0);
        for &a in &alphas {
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * a);
        }
        let beta_tildes: Vec<f64> = (1..=stages)
            .map(|t| (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t]) * betas[t - 1])
            .collect();
        Ok(Self {
            alphas,
            betas,
            alpha_bars,
            beta_tildes,
        })
    }

    pub fn stages(&self) -> usize {
        self.alphas.len()
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Variance of the reverse-stage conditional; zero at `t = 1`.
    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tildes[t - 1]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }
}

/// One draw from the forward marginal `q(s_t | s_0)` together with the noise
/// that produced it (the regression target).
///
/// `t = 0` is allowed and returns `s_0` itself.
pub fn forward_marginal_sample<R: Rng + ?Sized>(
    s0: &DVector<f64>,
    t: usize,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if t > schedule.stages() {
        return Err(Error::BadParam(format!(
            "stage {t} out of range 0..={}",
            schedule.stages()
        )));
    }
    let alpha_bar = schedule.alpha_bar(t);
    let noise = standard_normal_vector(s0.len(), rng);
    let diffused = s0 * alpha_bar.sqrt() + &noise * (1.0 - alpha_bar).sqrt();
    Ok((diffused, noise))
}

/// A trained diffusion prior: schedule plus one noise regressor per stage.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    schedule: DiffusionSchedule,
    regressors: Vec<Mlp>,
    dim: usize,
}

impl DiffusionModel {
    pub fn new(schedule: DiffusionSchedule, regressors: Vec<Mlp>) -> Result<Self> {
        if regressors.len() != schedule.stages() {
            return Err(Error::BadParam(format!(
                "expected {} regressors, got {}",
                schedule.stages(),
                regressors.len()
            )));
        }
        let dim = regressors[0].dim();
        if regressors.iter().any(|m| m.dim() != dim) {
            return Err(Error::BadParam(
                "all stage regressors must share one dimension".into(),
            ));
        }
        Ok(Self {
            schedule,
            regressors,
            dim,
        })
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn stages(&self) -> usize {
        self.schedule.stages()
    }

    pub fn regressor(&self, t: usize) -> &Mlp {
        &self.regressors[t - 1]
    }

    /// Mean of the reverse conditional at stage `t` plus the clean-sample
    /// estimate it is built from.
    ///
    /// The regressor output is first turned into
    /// `s0_hat = (s_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)` and the mean
    /// mixes `s0_hat` with `s_t`; at `t = 1` the mixing coefficients are
    /// exactly `(1, 0)` so the mean equals `s0_hat`.
    pub fn reverse_mean(&self, t: usize, s_t: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        if t == 0 || t > self.stages() {
            return Err(Error::BadParam(format!(
                "stage {t} out of range 1..={}",
                self.stages()
            )));
        }
        if s_t.len() != self.dim {
            return Err(Error::BadParam(format!(
                "state dimension {} does not match model dimension {}",
                s_t.len(),
                self.dim
            )));
        }
        let sched = &self.schedule;
        let alpha_bar_t = sched.alpha_bar(t);
        let alpha_bar_prev = sched.alpha_bar(t - 1);
        let eps_hat = self.regressor(t).forward(s_t);
        let s0_hat = (s_t - eps_hat * (1.0 - alpha_bar_t).sqrt()) / alpha_bar_t.sqrt();
        let denom = 1.0 - alpha_bar_t;
        let coef_s0 = alpha_bar_prev.sqrt() * sched.beta(t) / denom;
        let coef_st = sched.alpha(t).sqrt() * (1.0 - alpha_bar_prev) / denom;
        let mean = &s0_hat * coef_s0 + s_t * coef_st;
        Ok((mean, s0_hat))
    }
}

/// Per-stage final training losses, for reporting.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub stage_loss: Vec<f64>,
}

/// Fits one noise regressor per stage by least squares.
///
/// Every gradient step draws a fresh batch: a clean sample picked uniformly
/// from the dataset and fresh forward noise, so the empirical objective
/// follows the marginal of the forward process rather than a frozen noisy
/// copy of the dataset. Stages are independent and train in parallel, each on
/// its own RNG stream, so the result does not depend on thread scheduling.
pub fn train_prior(
    dataset: &[DVector<f64>],
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
) -> Result<DiffusionModel> {
    train_prior_with_report(dataset, schedule, cfg).map(|(model, _)| model)
}

pub fn train_prior_with_report(
    dataset: &[DVector<f64>],
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
) -> Result<(DiffusionModel, TrainReport)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::BadParam("training dataset is empty".into()));
    }
    let dim = dataset[0].len();
    if dim == 0 || dataset.iter().any(|s| s.len() != dim) {
        return Err(Error::BadParam(
            "training samples must share one nonzero dimension".into(),
        ));
    }

    let outcomes: Result<Vec<(Mlp, f64)>> = (1..=schedule.stages())
        .into_par_iter()
        .map(|t| train_stage(dataset, schedule, cfg, t))
        .collect();
    let outcomes = outcomes?;
    let (regressors, stage_loss): (Vec<_>, Vec<_>) = outcomes.into_iter().unzip();
    let model = DiffusionModel::new(schedule.clone(), regressors)?;
    Ok((model, TrainReport { stage_loss }))
}

fn train_stage(
    dataset: &[DVector<f64>],
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    t: usize,
) -> Result<(Mlp, f64)> {
    let dim = dataset[0].len();
    let mut rng = stream_rng(cfg.seed, &[STAGE_STREAM_TAG, t as u64]);
    let mut mlp = Mlp::new(dim, REGRESSOR_HIDDEN, &mut rng)?;
    let mut trainer = AdamTrainer::new(&mlp, cfg.learning_rate);
    let mut inputs = DMatrix::zeros(dim, cfg.batch_size);
    let mut targets = DMatrix::zeros(dim, cfg.batch_size);
    let tail = cfg.epochs.min(10);
    let mut recent = std::collections::VecDeque::with_capacity(tail);
    for _ in 0..cfg.epochs {
        for b in 0..cfg.batch_size {
            let idx = rng.random_range(0..dataset.len());
            let (diffused, noise) = forward_marginal_sample(&dataset[idx], t, schedule, &mut rng)?;
            inputs.set_column(b, &diffused);
            targets.set_column(b, &noise);
        }
        let loss = trainer.grad_step(&mut mlp, &inputs, &targets);
        if recent.len() == tail {
            recent.pop_front();
        }
        recent.push_back(loss);
    }
    let final_loss = recent.iter().sum::<f64>() / recent.len() as f64;
    Ok((mlp, final_loss))
}

/// One unconditional draw from the reverse process.
///
/// Starts at `N(0, I)`, then walks stages `T..1`; the final stage adds no
/// noise. Intermediate stages sample through the same Gaussian machinery the
/// conditional samplers use, so an evidence-free conditional chain emits
/// identical draws from an identical RNG stream.
pub fn sample_prior<R: Rng + ?Sized>(model: &DiffusionModel, rng: &mut R) -> Result<DVector<f64>> {
    let mut state = GaussianBelief::standard(model.dim()).sample(rng)?;
    for t in (1..=model.stages()).rev() {
        let (mean, _) = model.reverse_mean(t, &state)?;
        state = if t > 1 {
            GaussianBelief::isotropic(mean, model.schedule.beta_tilde(t)).sample(rng)?
        } else {
            mean
        };
    }
    Ok(state)
}

#[derive(Serialize, Deserialize)]
struct RegressorFile {
    hidden: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    dim: usize,
    stages: usize,
    alphas: Vec<f64>,
    regressors: Vec<RegressorFile>,
}

fn matrix_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

fn matrix_from_row_major(rows: usize, cols: usize, data: &[f64]) -> Result<DMatrix<f64>> {
    if data.len() != rows * cols {
        return Err(Error::Format(format!(
            "weight array has {} entries, expected {}",
            data.len(),
            rows * cols
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

/// Serializes a model to its structured-text form.
pub fn model_to_string(model: &DiffusionModel) -> String {
    let file = ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        dim: model.dim(),
        stages: model.stages(),
        alphas: model.schedule.alphas().to_vec(),
        regressors: model
            .regressors
            .iter()
            .map(|m| RegressorFile {
                hidden: m.hidden(),
                w1: matrix_row_major(m.w1()),
                b1: m.b1().iter().copied().collect(),
                w2: matrix_row_major(m.w2()),
                b2: m.b2().iter().copied().collect(),
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&file).expect("model serialization cannot fail");
    text.push('\n');
    text
}

pub fn model_from_str(text: &str) -> Result<DiffusionModel> {
    let file: ModelFile =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("model file: {e}")))?;
    if file.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported model format version {}",
            file.format_version
        )));
    }
    if file.alphas.len() != file.stages {
        return Err(Error::Format(format!(
            "schedule lists {} rates for {} stages",
            file.alphas.len(),
            file.stages
        )));
    }
    let schedule = DiffusionSchedule::from_alphas(file.alphas)?;
    let regressors: Result<Vec<Mlp>> = file
        .regressors
        .iter()
        .map(|r| {
            Mlp::from_parts(
                matrix_from_row_major(r.hidden, file.dim, &r.w1)?,
                DVector::from_vec(r.b1.clone()),
                matrix_from_row_major(file.dim, r.hidden, &r.w2)?,
                DVector::from_vec(r.b2.clone()),
            )
        })
        .collect();
    DiffusionModel::new(schedule, regressors?)
}

pub fn save_model(model: &DiffusionModel, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(model_to_string(model).as_bytes())?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<DiffusionModel> {
    let text = std::fs::read_to_string(path)?;
    model_from_str(&text)
}

/// Writes samples as delimiter-separated values, one sample per line.
pub fn write_samples(samples: &[DVector<f64>], path: &Path) -> Result<()> {
    let mut out = String::new();
    for s in samples {
        let line: Vec<String> = s.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads delimiter-separated samples; every line must have the same number of
/// columns.
pub fn read_samples(path: &Path) -> Result<Vec<DVector<f64>>> {
    let text = std::fs::read_to_string(path)?;
    let mut samples = Vec::new();
    let mut dim = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let values: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|v| v.trim().parse::<f64>()).collect();
        let values =
            values.map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::Format(format!(
                    "line {}: expected {} columns, found {}",
                    lineno + 1,
                    d,
                    values.len()
                )));
            }
            _ => {}
        }
        samples.push(DVector::from_vec(values));
    }
    Ok(samples)
}
