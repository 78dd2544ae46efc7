//! Minimal feed-forward regressor with explicit gradients and Adam updates.
//!
//! One hidden ReLU layer, linear output, equal input and output dimension.
//! Batches are packed column-wise into matrices so training runs through a
//! handful of gemms. Everything is deterministic given the init RNG and the
//! batch stream.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::{Error, Result};

/// Training hyperparameters. `epochs` counts optimizer steps; each step
/// consumes one freshly drawn batch.
#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::BadParam(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::BadParam("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::BadParam("batch size must be positive".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 2000,
            batch_size: 256,
            seed: 0,
        }
    }
}

/// Two-layer perceptron `x -> W2 relu(W1 x + b1) + b2` with input and output
/// dimension `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    w1: DMatrix<f64>, // hidden x dim
    b1: DVector<f64>,
    w2: DMatrix<f64>, // dim x hidden
    b2: DVector<f64>,
}

impl Mlp {
    /// Symmetric uniform init with limit `sqrt(6 / (fan_in + fan_out))`;
    /// biases start at zero.
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(Error::BadParam("layer sizes must be positive".into()));
        }
        let lim1 = (6.0 / (dim + hidden) as f64).sqrt();
        let lim2 = (6.0 / (hidden + dim) as f64).sqrt();
        let w1 = DMatrix::from_fn(hidden, dim, |_, _| rng.random_range(-lim1..lim1));
        let w2 = DMatrix::from_fn(dim, hidden, |_, _| rng.random_range(-lim2..lim2));
        Ok(Self {
            w1,
            b1: DVector::zeros(hidden),
            w2,
            b2: DVector::zeros(dim),
        })
    }

    pub fn from_parts(
        w1: DMatrix<f64>,
        b1: DVector<f64>,
        w2: DMatrix<f64>,
        b2: DVector<f64>,
    ) -> Result<Self> {
        let hidden = w1.nrows();
        let dim = w1.ncols();
        if hidden == 0 || dim == 0 {
            return Err(Error::BadParam("layer sizes must be positive".into()));
        }
        if b1.len() != hidden || w2.nrows() != dim || w2.ncols() != hidden || b2.len() != dim {
            return Err(Error::BadParam("inconsistent layer shapes".into()));
        }
        Ok(Self { w1, b1, w2, b2 })
    }

    pub fn dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn w1(&self) -> &DMatrix<f64> {
        &self.w1
    }

    pub fn b1(&self) -> &DVector<f64> {
        &self.b1
    }

    pub fn w2(&self) -> &DMatrix<f64> {
        &self.w2
    }

    pub fn b2(&self) -> &DVector<f64> {
        &self.b2
    }

    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut pre = &self.w1 * x + &self.b1;
        pre.apply(|v| *v = v.max(0.0));
        &self.w2 * pre + &self.b2
    }

    /// Forward pass over a batch packed as columns; returns pre-activations,
    /// hidden activations, and outputs.
    fn forward_batch(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let batch = x.ncols();
        let mut pre = &self.w1 * x;
        for mut col in pre.column_iter_mut() {
            col += &self.b1;
        }
        let mut hidden = pre.clone();
        hidden.apply(|v| *v = v.max(0.0));
        let mut out = &self.w2 * &hidden;
        for mut col in out.column_iter_mut() {
            col += &self.b2;
        }
        debug_assert_eq!(out.ncols(), batch);
        (pre, hidden, out)
    }

    /// Mean per-sample squared error over a column batch.
    pub fn batch_loss(&self, x: &DMatrix<f64>, targets: &DMatrix<f64>) -> f64 {
        let (_, _, out) = self.forward_batch(x);
        let residual = out - targets;
        residual.norm_squared() / x.ncols() as f64
    }

    /// Loss and parameter gradients of the batch mean squared error.
    pub fn gradients(&self, x: &DMatrix<f64>, targets: &DMatrix<f64>) -> (MlpGradients, f64) {
        let batch = x.ncols() as f64;
        let (pre, hidden, out) = self.forward_batch(x);
        let residual = out - targets;
        let loss = residual.norm_squared() / batch;

        let delta2 = residual * (2.0 / batch);
        let dw2 = &delta2 * hidden.transpose();
        let db2 = row_sums(&delta2);
        let mut delta1 = self.w2.transpose() * delta2;
        delta1.zip_apply(&pre, |d, p| {
            if p <= 0.0 {
                *d = 0.0;
            }
        });
        let dw1 = &delta1 * x.transpose();
        let db1 = row_sums(&delta1);
        (
            MlpGradients {
                w1: dw1,
                b1: db1,
                w2: dw2,
                b2: db2,
            },
            loss,
        )
    }

    /// All parameters flattened as `[w1 row-major, b1, w2 row-major, b2]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        push_row_major(&mut out, &self.w1);
        out.extend(self.b1.iter());
        push_row_major(&mut out, &self.w2);
        out.extend(self.b2.iter());
        out
    }

    /// Rebuilds a network from [`Mlp::to_flat`] output.
    pub fn from_flat(dim: usize, hidden: usize, flat: &[f64]) -> Result<Self> {
        let expected = hidden * dim + hidden + dim * hidden + dim;
        if flat.len() != expected {
            return Err(Error::BadParam(format!(
                "expected {expected} parameters, got {}",
                flat.len()
            )));
        }
        let mut cursor = 0;
        let w1 = DMatrix::from_row_slice(hidden, dim, &flat[cursor..cursor + hidden * dim]);
        cursor += hidden * dim;
        let b1 = DVector::from_row_slice(&flat[cursor..cursor + hidden]);
        cursor += hidden;
        let w2 = DMatrix::from_row_slice(dim, hidden, &flat[cursor..cursor + dim * hidden]);
        cursor += dim * hidden;
        let b2 = DVector::from_row_slice(&flat[cursor..]);
        Self::from_parts(w1, b1, w2, b2)
    }

    pub fn parameter_count(&self) -> usize {
        let (h, d) = (self.hidden(), self.dim());
        h * d + h + d * h + d
    }

    /// Vector-Jacobian product through the network: `J(x)^T cotangent`.
    pub fn input_gradient(&self, x: &DVector<f64>, cotangent: &DVector<f64>) -> DVector<f64> {
        let pre = &self.w1 * x + &self.b1;
        let mut back = self.w2.transpose() * cotangent;
        back.zip_apply(&pre, |b, p| {
            if p <= 0.0 {
                *b = 0.0;
            }
        });
        self.w1.transpose() * back
    }
}

fn push_row_major(out: &mut Vec<f64>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
}

fn row_sums(m: &DMatrix<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(m.nrows());
    for col in m.column_iter() {
        out += col;
    }
    out
}

/// Parameter gradients matching the [`Mlp`] layout.
#[derive(Debug, Clone)]
pub struct MlpGradients {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

impl MlpGradients {
    /// Same flattening order as [`Mlp::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        push_row_major(&mut out, &self.w1);
        out.extend(self.b1.iter());
        push_row_major(&mut out, &self.w2);
        out.extend(self.b2.iter());
        out
    }
}

/// Adaptive moment estimation with bias correction. One trainer per network.
#[derive(Debug, Clone)]
pub struct AdamTrainer {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: MlpGradients,
    v: MlpGradients,
}

impl AdamTrainer {
    pub fn new(mlp: &Mlp, learning_rate: f64) -> Self {
        let zeros = MlpGradients {
            w1: DMatrix::zeros(mlp.hidden(), mlp.dim()),
            b1: DVector::zeros(mlp.hidden()),
            w2: DMatrix::zeros(mlp.dim(), mlp.hidden()),
            b2: DVector::zeros(mlp.dim()),
        };
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One optimizer update on the batch; returns the pre-update loss.
    pub fn grad_step(&mut self, mlp: &mut Mlp, x: &DMatrix<f64>, targets: &DMatrix<f64>) -> f64 {
        let (grads, loss) = mlp.gradients(x, targets);
        self.step += 1;
        let correction1 = 1.0 - self.beta1.powi(self.step as i32);
        let correction2 = 1.0 - self.beta2.powi(self.step as i32);
        let scale = self.learning_rate / correction1;
        update_block(
            mlp.w1.as_mut_slice(),
            grads.w1.as_slice(),
            self.m.w1.as_mut_slice(),
            self.v.w1.as_mut_slice(),
            self.beta1,
            self.beta2,
            scale,
            correction2,
            self.eps,
        );
        update_block(
            mlp.b1.as_mut_slice(),
            grads.b1.as_slice(),
            self.m.b1.as_mut_slice(),
            self.v.b1.as_mut_slice(),
            self.beta1,
            self.beta2,
            scale,
            correction2,
            self.eps,
        );
        update_block(
            mlp.w2.as_mut_slice(),
            grads.w2.as_slice(),
            self.m.w2.as_mut_slice(),
            self.v.w2.as_mut_slice(),
            self.beta1,
            self.beta2,
            scale,
            correction2,
            self.eps,
        );
        update_block(
            mlp.b2.as_mut_slice(),
            grads.b2.as_slice(),
            self.m.b2.as_mut_slice(),
            self.v.b2.as_mut_slice(),
            self.beta1,
            self.beta2,
            scale,
            correction2,
            self.eps,
        );
        loss
    }
}

#[allow(clippy::too_many_arguments)]
fn update_block(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    beta1: f64,
    beta2: f64,
    scale: f64,
    correction2: f64,
    eps: f64,
) {
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let denom = (v[i] / correction2).sqrt() + eps;
        params[i] -= scale * m[i] / denom;
    }
}

/// Packs a slice of `(input, target)` pairs into column batches.
pub fn pack_batch(batch: &[(DVector<f64>, DVector<f64>)]) -> (DMatrix<f64>, DMatrix<f64>) {
    assert!(!batch.is_empty(), "batch must be nonempty");
    let dim = batch[0].0.len();
    let x = DMatrix::from_fn(dim, batch.len(), |i, j| batch[j].0[i]);
    let t = DMatrix::from_fn(batch[0].1.len(), batch.len(), |i, j| batch[j].1[i]);
    (x, t)
}
