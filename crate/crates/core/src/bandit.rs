//! Contextual bandit environments, Thompson-sampling agents over all prior
//! families, prior fitting for the baselines, and regret accounting.
//!
//! Regret increments are computed from true mean rewards, so they are
//! nonnegative exactly and the curves are low-variance at desk scale. A
//! non-finite draw from the score-guided agent truncates the episode and is
//! recorded on the trace instead of failing the run; all other sampler errors
//! propagate.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::bayes::{linear_posterior, posterior_from_summary, summarize, History};
use crate::diffusion::DiffusionModel;
use crate::glm::{irls, MeanFunction};
use crate::linalg::GaussianBelief;
use crate::sampler::{dps_baseline, laplace_dps_glm, laplace_dps_linear};
use crate::seed::stream_rng;
use crate::{Error, Result};

const LN_2PI: f64 = 1.837877066409345483560659472811;

/// Reward observation model of an environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardKind {
    /// `y = phi . theta + N(0, sigma^2)`.
    Linear,
    /// Bernoulli `y` in {0, 1} with mean `sigmoid(phi . theta)`.
    Logistic,
}

/// Whether action features are drawn once per problem or fresh every round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    FixedPerProblem,
    ResamplePerRound,
}

/// Where action features come from.
#[derive(Debug, Clone)]
pub enum FeatureSource {
    /// Uniform draws from the unit ball.
    UnitBall { dim: usize },
    /// Uniform draws from a fixed pool of rows (embedding environments).
    Pool(Arc<Vec<DVector<f64>>>),
}

impl FeatureSource {
    fn dim(&self) -> Result<usize> {
        match self {
            FeatureSource::UnitBall { dim } => Ok(*dim),
            FeatureSource::Pool(rows) => rows
                .first()
                .map(|r| r.len())
                .ok_or_else(|| Error::BadParam("feature pool is empty".into())),
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match self {
            FeatureSource::UnitBall { dim } => unit_ball_vector(*dim, rng),
            FeatureSource::Pool(rows) => rows[rng.random_range(0..rows.len())].clone(),
        }
    }
}

/// Uniform draw from the unit ball: normalized Gaussian direction scaled by
/// `u^(1/d)`.
pub fn unit_ball_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let z: DVector<f64> = DVector::from_fn(dim, |_, _| rng.sample(StandardNormal));
        let norm = z.norm();
        let radius: f64 = rng.random::<f64>().powf(1.0 / dim as f64);
        if norm > 0.0 {
            return z * (radius / norm);
        }
    }
}

/// A contextual bandit with per-round candidate actions.
#[derive(Debug, Clone)]
pub struct BanditEnv {
    dim: usize,
    actions: usize,
    kind: RewardKind,
    noise: f64,
    theta_star: DVector<f64>,
    fixed: Option<Vec<DVector<f64>>>,
    source: FeatureSource,
    rng: ChaCha12Rng,
}

impl BanditEnv {
    pub fn new(
        kind: RewardKind,
        noise: f64,
        theta_star: DVector<f64>,
        actions: usize,
        source: FeatureSource,
        mode: FeatureMode,
        seed: u64,
    ) -> Result<Self> {
        if actions == 0 {
            return Err(Error::BadParam("need at least one action".into()));
        }
        if !(noise > 0.0) || !noise.is_finite() {
            return Err(Error::BadParam(format!(
                "reward noise must be positive, got {noise}"
            )));
        }
        let dim = source.dim()?;
        if theta_star.len() != dim {
            return Err(Error::BadParam(format!(
                "parameter dimension {} does not match feature dimension {dim}",
                theta_star.len()
            )));
        }
        let mut rng = stream_rng(seed, &[]);
        let fixed = match mode {
            FeatureMode::FixedPerProblem => {
                Some((0..actions).map(|_| source.draw(&mut rng)).collect())
            }
            FeatureMode::ResamplePerRound => None,
        };
        Ok(Self {
            dim,
            actions,
            kind,
            noise,
            theta_star,
            fixed,
            source,
            rng,
        })
    }

    /// An environment with an explicit, fixed candidate set.
    pub fn with_fixed_features(
        kind: RewardKind,
        noise: f64,
        theta_star: DVector<f64>,
        features: Vec<DVector<f64>>,
        seed: u64,
    ) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::BadParam("need at least one action".into()));
        }
        let dim = features[0].len();
        if features.iter().any(|f| f.len() != dim) || theta_star.len() != dim {
            return Err(Error::BadParam("inconsistent feature dimensions".into()));
        }
        if !(noise > 0.0) || !noise.is_finite() {
            return Err(Error::BadParam(format!(
                "reward noise must be positive, got {noise}"
            )));
        }
        Ok(Self {
            dim,
            actions: features.len(),
            kind,
            noise,
            theta_star,
            fixed: Some(features),
            source: FeatureSource::UnitBall { dim },
            rng: stream_rng(seed, &[]),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> RewardKind {
        self.kind
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn theta_star(&self) -> &DVector<f64> {
        &self.theta_star
    }

    fn round_features(&mut self) -> Vec<DVector<f64>> {
        match &self.fixed {
            Some(feats) => feats.clone(),
            None => (0..self.actions)
                .map(|_| self.source.draw(&mut self.rng))
                .collect(),
        }
    }

    /// True mean reward of an action under the environment parameter.
    pub fn true_mean(&self, features: &DVector<f64>) -> f64 {
        let u = features.dot(&self.theta_star);
        match self.kind {
            RewardKind::Linear => u,
            RewardKind::Logistic => MeanFunction::Logistic.value(u),
        }
    }

    fn observe(&mut self, features: &DVector<f64>) -> f64 {
        match self.kind {
            RewardKind::Linear => {
                let noise: f64 = self.rng.sample(StandardNormal);
                features.dot(&self.theta_star) + self.noise * noise
            }
            RewardKind::Logistic => {
                let p = self.true_mean(features);
                if self.rng.random::<f64>() < p {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// A Thompson-sampling agent, identified by its posterior strategy.
#[derive(Debug, Clone)]
pub enum Agent {
    /// Samples the true parameter; the zero-regret sanity anchor.
    Oracle,
    /// Gaussian-prior Thompson sampling: exact conjugate posterior for linear
    /// rewards, an IRLS Laplace posterior for logistic rewards. Covers both
    /// the uninformative and the fitted-prior baselines.
    GaussianTs { prior: GaussianBelief },
    /// Gaussian-mixture prior with exact conjugate per-component updates;
    /// linear rewards only.
    MixtureTs { prior: GaussianMixture },
    /// Diffusion-prior Thompson sampling via the Laplace chains.
    DiffusionTs { model: Arc<DiffusionModel> },
    /// The score-guided baseline chain; linear rewards only.
    ScoreGuidedTs { model: Arc<DiffusionModel> },
}

impl Agent {
    /// Whether the strategy supports the reward model.
    pub fn supports(&self, kind: RewardKind) -> bool {
        match self {
            Agent::MixtureTs { .. } | Agent::ScoreGuidedTs { .. } => kind == RewardKind::Linear,
            _ => true,
        }
    }

    fn sample_parameter<R: Rng + ?Sized>(
        &self,
        history: &History,
        kind: RewardKind,
        theta_star: &DVector<f64>,
        rng: &mut R,
    ) -> Result<DVector<f64>> {
        match self {
            Agent::Oracle => Ok(theta_star.clone()),
            Agent::GaussianTs { prior } => match kind {
                RewardKind::Linear => linear_posterior(prior, history)?.sample(rng),
                RewardKind::Logistic => {
                    irls(&prior.mean, &prior.cov, history, MeanFunction::Logistic)?.sample(rng)
                }
            },
            Agent::MixtureTs { prior } => match kind {
                RewardKind::Linear => mixture_posterior_sample(prior, history, rng),
                RewardKind::Logistic => Err(Error::BadParam(
                    "mixture Thompson sampling has no logistic variant".into(),
                )),
            },
            Agent::DiffusionTs { model } => match kind {
                RewardKind::Linear => laplace_dps_linear(model, history, rng),
                RewardKind::Logistic => {
                    laplace_dps_glm(model, history, MeanFunction::Logistic, rng)
                }
            },
            Agent::ScoreGuidedTs { model } => match kind {
                RewardKind::Linear => dps_baseline(model, history, rng),
                RewardKind::Logistic => Err(Error::BadParam(
                    "the score-guided baseline supports linear rewards only".into(),
                )),
            },
        }
    }
}

/// Per-round expected regret increments for one episode.
#[derive(Debug, Clone)]
pub struct RegretTrace {
    increments: Vec<f64>,
    truncated_at: Option<usize>,
}

impl RegretTrace {
    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// Round at which the episode stopped on a non-finite draw, if any.
    pub fn truncated_at(&self) -> Option<usize> {
        self.truncated_at
    }

    /// Cumulative regret over `rounds` rounds; frozen after truncation.
    pub fn cumulative(&self, rounds: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(rounds);
        let mut acc = 0.0;
        for k in 0..rounds {
            if let Some(&inc) = self.increments.get(k) {
                acc += inc;
            }
            out.push(acc);
        }
        out
    }

    pub fn final_cumulative(&self, rounds: usize) -> f64 {
        self.cumulative(rounds).last().copied().unwrap_or(0.0)
    }
}

/// An episode's trace plus the wall-clock spent inside posterior draws.
#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub trace: RegretTrace,
    pub sample_seconds: f64,
}

/// Runs one Thompson-sampling episode.
///
/// Per round: draw a parameter from the agent's posterior given the history,
/// act greedily (ties to the lowest action index), observe the reward, append
/// it to the history, and record the true-mean regret increment.
pub fn run_episode<R: Rng + ?Sized>(
    env: &mut BanditEnv,
    agent: &Agent,
    rounds: usize,
    rng: &mut R,
) -> Result<EpisodeResult> {
    if !agent.supports(env.kind()) {
        return Err(Error::BadParam(
            "agent strategy does not support the environment's reward model".into(),
        ));
    }
    let history_noise = match env.kind() {
        RewardKind::Linear => env.noise(),
        RewardKind::Logistic => 1.0,
    };
    let mut history = History::new(env.dim(), history_noise)?;
    let mut increments = Vec::with_capacity(rounds);
    let mut truncated_at = None;
    let mut sample_seconds = 0.0;

    for round in 1..=rounds {
        let features = env.round_features();
        let start = Instant::now();
        let drawn = agent.sample_parameter(&history, env.kind(), env.theta_star(), rng);
        sample_seconds += start.elapsed().as_secs_f64();
        let theta = match drawn {
            Ok(theta) => theta,
            Err(Error::NonFinite(_)) => {
                truncated_at = Some(round);
                break;
            }
            Err(e) => return Err(e),
        };

        // The mean function is monotone, so the greedy action maximizes the
        // linear score for both reward kinds.
        let mut best_idx = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (i, phi) in features.iter().enumerate() {
            let score = phi.dot(&theta);
            if score > best_score {
                best_score = score;
                best_idx = i;
            }
        }
        let chosen = &features[best_idx];

        let best_true = features
            .iter()
            .map(|phi| env.true_mean(phi))
            .fold(f64::NEG_INFINITY, f64::max);
        increments.push(best_true - env.true_mean(chosen));

        let y = env.observe(chosen);
        history.push(chosen.clone(), y)?;
    }

    Ok(EpisodeResult {
        trace: RegretTrace {
            increments,
            truncated_at,
        },
        sample_seconds,
    })
}

/// A finite Gaussian mixture with normalized positive weights.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    components: Vec<(f64, GaussianBelief)>,
}

impl GaussianMixture {
    pub fn new(components: Vec<(f64, GaussianBelief)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::BadParam("mixture needs at least one component".into()));
        }
        let dim = components[0].1.dim();
        if components.iter().any(|(_, g)| g.dim() != dim) {
            return Err(Error::BadParam("mixture components must share one dimension".into()));
        }
        if components.iter().any(|(w, _)| !(w > &0.0) || !w.is_finite()) {
            return Err(Error::BadParam("mixture weights must be positive".into()));
        }
        let total: f64 = components.iter().map(|(w, _)| w).sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::BadParam(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        Ok(Self { components })
    }

    pub fn components(&self) -> &[(f64, GaussianBelief)] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components[0].1.dim()
    }

    /// Mixture log density at a point.
    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        let mut terms = Vec::with_capacity(self.components.len());
        for (w, g) in &self.components {
            terms.push(w.ln() + gaussian_log_density(g, x)?);
        }
        Ok(log_sum_exp(&terms))
    }
}

fn gaussian_log_density(g: &GaussianBelief, x: &DVector<f64>) -> Result<f64> {
    let sym = (&g.cov + g.cov.transpose()) * 0.5;
    let chol = Cholesky::new(sym)
        .ok_or_else(|| Error::Singular("covariance in log density".to_string()))?;
    let diff = x - &g.mean;
    let quad = diff.dot(&chol.solve(&diff));
    let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(-0.5 * (g.dim() as f64 * LN_2PI + log_det + quad))
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Maximum-likelihood Gaussian fit (1/N covariance normalization) with a tiny
/// PSD jitter so the result is always invertible.
pub fn fit_gaussian_mle(samples: &[DVector<f64>]) -> Result<GaussianBelief> {
    if samples.is_empty() {
        return Err(Error::BadParam("no samples".into()));
    }
    let d = samples[0].len();
    if samples.len() < d + 1 {
        return Err(Error::BadParam(format!(
            "need at least {} samples in dimension {d}, got {}",
            d + 1,
            samples.len()
        )));
    }
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::BadParam("samples must share one dimension".into()));
    }
    let n = samples.len() as f64;
    let mut mean = DVector::zeros(d);
    for s in samples {
        mean += s;
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for s in samples {
        let diff = s - &mean;
        cov.ger(1.0 / n, &diff, &diff, 1.0);
    }
    for i in 0..d {
        cov[(i, i)] += 1e-9;
    }
    GaussianBelief::new(mean, cov)
}

const EM_RESTARTS: usize = 5;
const EM_MAX_ITERS: usize = 300;
const EM_COV_FLOOR: f64 = 1e-6;

/// Expectation-maximization fit of a `k`-component Gaussian mixture; returns
/// the best of five random restarts by log-likelihood. Component covariance
/// eigenvalues are floored at `1e-6`.
pub fn fit_gmm_em<R: Rng + ?Sized>(
    samples: &[DVector<f64>],
    k: usize,
    rng: &mut R,
) -> Result<GaussianMixture> {
    if k == 0 {
        return Err(Error::BadParam("need at least one component".into()));
    }
    if samples.is_empty() {
        return Err(Error::BadParam("no samples".into()));
    }
    let d = samples[0].len();
    if samples.len() < k * (d + 1) {
        return Err(Error::BadParam(format!(
            "need at least {} samples for {k} components in dimension {d}, got {}",
            k * (d + 1),
            samples.len()
        )));
    }
    let mut best: Option<(f64, GaussianMixture)> = None;
    for _ in 0..EM_RESTARTS {
        let (mix, ll) = em_single_run(samples, k, rng)?;
        if best.as_ref().map_or(true, |(b, _)| ll > *b) {
            best = Some((ll, mix));
        }
    }
    Ok(best.expect("at least one restart ran").1)
}

fn em_single_run<R: Rng + ?Sized>(
    samples: &[DVector<f64>],
    k: usize,
    rng: &mut R,
) -> Result<(GaussianMixture, f64)> {
    let (mix, ll_trace) = em_single_run_traced(samples, k, rng)?;
    Ok((mix, *ll_trace.last().expect("EM runs at least one sweep")))
}

fn em_single_run_traced<R: Rng + ?Sized>(
    samples: &[DVector<f64>],
    k: usize,
    rng: &mut R,
) -> Result<(GaussianMixture, Vec<f64>)> {
    let n = samples.len();
    let d = samples[0].len();
    let base = fit_gaussian_mle(samples)?;
    let base_cov = floor_covariance(&base.cov);

    let picks = rand::seq::index::sample(rng, n, k);
    let mut weights = vec![1.0 / k as f64; k];
    let mut means: Vec<DVector<f64>> = picks.iter().map(|i| samples[i].clone()).collect();
    let mut covs: Vec<DMatrix<f64>> = vec![base_cov; k];

    let mut ll_trace = Vec::new();
    let mut resp = DMatrix::zeros(n, k);
    for _ in 0..EM_MAX_ITERS {
        // E-step in the log domain.
        let mut ll = 0.0;
        for (i, s) in samples.iter().enumerate() {
            let mut terms = Vec::with_capacity(k);
            for j in 0..k {
                let g = GaussianBelief::new(means[j].clone(), covs[j].clone())?;
                terms.push(weights[j].ln() + gaussian_log_density(&g, s)?);
            }
            let norm = log_sum_exp(&terms);
            ll += norm;
            for j in 0..k {
                resp[(i, j)] = (terms[j] - norm).exp();
            }
        }

        let converged = ll_trace
            .last()
            .is_some_and(|prev: &f64| (ll - prev).abs() <= 1e-8 * (1.0 + ll.abs()));
        ll_trace.push(ll);
        if converged {
            break;
        }

        // M-step.
        for j in 0..k {
            let mass: f64 = (0..n).map(|i| resp[(i, j)]).sum::<f64>().max(1e-10);
            let mut mean = DVector::zeros(d);
            for (i, s) in samples.iter().enumerate() {
                mean.axpy(resp[(i, j)], s, 1.0);
            }
            mean /= mass;
            let mut cov = DMatrix::zeros(d, d);
            for (i, s) in samples.iter().enumerate() {
                let diff = s - &mean;
                cov.ger(resp[(i, j)] / mass, &diff, &diff, 1.0);
            }
            weights[j] = mass / n as f64;
            means[j] = mean;
            covs[j] = floor_covariance(&cov);
        }
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
    }

    let components: Result<Vec<(f64, GaussianBelief)>> = (0..k)
        .map(|j| Ok((weights[j], GaussianBelief::new(means[j].clone(), covs[j].clone())?)))
        .collect();
    Ok((GaussianMixture::new(components?)?, ll_trace))
}

fn floor_covariance(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let clamped = eig.eigenvalues.map(|v| v.max(EM_COV_FLOOR));
    let scaled = &eig.eigenvectors * DMatrix::from_diagonal(&clamped);
    let out = scaled * eig.eigenvectors.transpose();
    (&out + out.transpose()) * 0.5
}

/// Exact conjugate mixture posterior under linear-Gaussian evidence: the
/// per-component posteriors plus the responsibilities given by each
/// component's marginal evidence.
pub fn mixture_posterior(
    mixture: &GaussianMixture,
    history: &History,
) -> Result<(Vec<f64>, Vec<GaussianBelief>)> {
    if history.dim() != mixture.dim() {
        return Err(Error::BadParam(format!(
            "history dimension {} does not match mixture dimension {}",
            history.dim(),
            mixture.dim()
        )));
    }
    let summary = summarize(history);
    let inv_var = 1.0 / (history.noise_scale() * history.noise_scale());
    let obs_sq: f64 = history.records().iter().map(|(_, y)| y * y).sum();
    let n = history.len() as f64;
    let noise_const = -0.5 * n * (LN_2PI + 2.0 * history.noise_scale().ln());

    let mut log_marginals = Vec::with_capacity(mixture.components().len());
    let mut posteriors = Vec::with_capacity(mixture.components().len());
    for (weight, prior) in mixture.components() {
        let sym = (&prior.cov + prior.cov.transpose()) * 0.5;
        let chol0 = Cholesky::new(sym)
            .ok_or_else(|| Error::Singular("mixture component covariance".to_string()))?;
        let prior_pull = chol0.solve(&prior.mean);
        let posterior = posterior_from_summary(prior, &summary)?;

        // log of the component's evidence: Gaussian integral of
        // likelihood x prior, computed in d dimensions.
        let rhs = &prior_pull + &summary.weighted_sum;
        let posterior_precision = chol0.inverse() + &summary.precision;
        let chol_a = Cholesky::new(posterior_precision)
            .ok_or_else(|| Error::Singular("mixture posterior precision".to_string()))?;
        let m = chol_a.solve(&rhs);
        let log_det_prior =
            2.0 * chol0.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let log_det_a =
            2.0 * chol_a.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let constant = prior.mean.dot(&prior_pull) + inv_var * obs_sq;
        let log_marginal =
            noise_const - 0.5 * log_det_prior - 0.5 * log_det_a - 0.5 * (constant - m.dot(&rhs));
        log_marginals.push(weight.ln() + log_marginal);
        posteriors.push(posterior);
    }

    let norm = log_sum_exp(&log_marginals);
    let responsibilities: Vec<f64> = log_marginals.iter().map(|l| (l - norm).exp()).collect();
    Ok((responsibilities, posteriors))
}

/// One draw from the exact mixture posterior: pick a component by its
/// evidence responsibility, then sample its conjugate posterior. With a
/// single component no selection randomness is consumed, so the draw pairs
/// exactly with Gaussian-prior Thompson sampling.
pub fn mixture_posterior_sample<R: Rng + ?Sized>(
    mixture: &GaussianMixture,
    history: &History,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let (responsibilities, posteriors) = mixture_posterior(mixture, history)?;
    let pick = if posteriors.len() == 1 {
        0
    } else {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut idx = posteriors.len() - 1;
        for (j, r) in responsibilities.iter().enumerate() {
            acc += r;
            if u < acc {
                idx = j;
                break;
            }
        }
        idx
    };
    posteriors[pick].sample(rng)
}
