//! Mini-batch training: Adam or plain SGD on the squared loss with an optional
//! lasso subgradient, validation-based early stopping and an epoch budget.
//!
//! Batches are contiguous slices of the rows in the order given; nothing is
//! shuffled, so time-ordered inputs stay time-ordered within each batch.

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array1, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{NetworkParams, NetworkSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lasso_lambda: f64,
    /// Epochs without validation improvement tolerated before stopping.
    pub early_stop_patience: usize,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Seeds the dropout stream.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 14,
            max_epochs: 5000,
            lasso_lambda: 0.0,
            early_stop_patience: 50,
            optimizer: OptimizerKind::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.early_stop_patience == 0 {
            return Err(Error::InvalidSpec(
                "batch size, epoch budget and patience must be positive".into(),
            ));
        }
        if !(self.lasso_lambda >= 0.0) {
            return Err(Error::InvalidSpec(format!(
                "lasso penalty {} must be nonnegative",
                self.lasso_lambda
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopReason {
    Patience,
    Budget,
}

/// Per-epoch penalized objectives `MSE + λ‖θ‖₁` (plain MSE when λ = 0) on
/// the training and validation sets. Index 0 holds the initial parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainTrace {
    pub fn epochs_run(&self) -> usize {
        self.train_loss.len() - 1
    }

    pub fn best_val_loss(&self) -> f64 {
        self.val_loss[self.best_epoch]
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "train_loss", "val_loss"])?;
        for (e, (t, v)) in self.train_loss.iter().zip(&self.val_loss).enumerate() {
            out.write_record([e.to_string(), t.to_string(), v.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Mean squared error of the eval-mode network on `(x, y)`.
pub fn mse_loss(params: &NetworkParams, x: ArrayView2<f64>, y: ArrayView1<f64>) -> Result<f64> {
    if x.nrows() == 0 {
        return Err(Error::EmptySample("loss evaluation"));
    }
    if x.nrows() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "{} input rows but {} targets",
            x.nrows(),
            y.len()
        )));
    }
    let pred = params.forward(x)?;
    Ok(mse(pred.view(), y))
}

pub(crate) fn mse(pred: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
    pred.iter().zip(y).map(|(p, t)| (t - p) * (t - p)).sum::<f64>() / y.len() as f64
}

/// `mse_loss + λ‖θ‖₁` over all weights and biases.
pub fn penalized_loss(
    params: &NetworkParams,
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    lambda: f64,
) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lasso penalty {lambda} must be nonnegative"
        )));
    }
    let base = mse_loss(params, x, y)?;
    Ok(if lambda == 0.0 {
        base
    } else {
        base + lambda * params.l1_norm()
    })
}

/// Patience-based stopping on a loss that should decrease.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Records the loss of `epoch`; stops once more than `patience`
    /// consecutive epochs fail to improve strictly on the best so far.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> Verdict {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            Verdict::Improved
        } else {
            self.since_best += 1;
            if self.since_best > self.patience {
                Verdict::Stop
            } else {
                Verdict::Continue
            }
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// First- and second-moment state of Adam.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(dim: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for k in 0..theta.len() {
            let g = grad[k];
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[k] / c1;
            let v_hat = self.v[k] / c2;
            theta[k] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

pub fn sgd_step(theta: &mut [f64], grad: &[f64], lr: f64) {
    for (t, g) in theta.iter_mut().zip(grad) {
        *t -= lr * g;
    }
}

fn add_lasso_subgradient(grad: &mut [f64], theta: &[f64], lambda: f64) {
    if lambda == 0.0 {
        return;
    }
    for (g, t) in grad.iter_mut().zip(theta) {
        if *t > 0.0 {
            *g += lambda;
        } else if *t < 0.0 {
            *g -= lambda;
        }
    }
}

/// Contiguous batch bounds. A trailing single-row batch is merged into its
/// predecessor when batch statistics need two rows.
fn batch_bounds(n: usize, size: usize, min_rows: usize) -> Vec<(usize, usize)> {
    let mut bounds: Vec<(usize, usize)> = (0..n)
        .step_by(size)
        .map(|a| (a, (a + size).min(n)))
        .collect();
    if bounds.len() > 1 {
        let (a, b) = *bounds.last().expect("non-empty");
        if b - a < min_rows {
            bounds.pop();
            bounds.last_mut().expect("non-empty").1 = b;
        }
    }
    bounds
}

/// Trains a freshly initialized network.
pub fn fit(
    spec: &NetworkSpec,
    x_train: ArrayView2<f64>,
    y_train: ArrayView1<f64>,
    x_val: ArrayView2<f64>,
    y_val: ArrayView1<f64>,
    cfg: &TrainConfig,
) -> Result<(NetworkParams, TrainTrace)> {
    fit_from(NetworkParams::init(spec)?, x_train, y_train, x_val, y_val, cfg)
}

/// Trains starting from `params`. Returns the parameters with the lowest
/// penalized validation objective seen, the starting point included.
pub fn fit_from(
    mut params: NetworkParams,
    x_train: ArrayView2<f64>,
    y_train: ArrayView1<f64>,
    x_val: ArrayView2<f64>,
    y_val: ArrayView1<f64>,
    cfg: &TrainConfig,
) -> Result<(NetworkParams, TrainTrace)> {
    cfg.validate()?;
    if x_train.nrows() == 0 {
        return Err(Error::EmptySample("training set"));
    }
    if x_val.nrows() == 0 {
        return Err(Error::EmptySample("validation set"));
    }
    let uses_bn = (0..params.spec().depth()).any(|l| params.spec().uses_batch_norm(l));
    if uses_bn && x_train.nrows() < 2 {
        return Err(Error::DegenerateBatch {
            rows: x_train.nrows(),
        });
    }

    let bounds = batch_bounds(x_train.nrows(), cfg.batch_size, if uses_bn { 2 } else { 1 });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = params.flatten();
    let mut adam = Adam::new(theta.len(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);

    // Stopping monitors the penalized validation objective, so a heavy
    // penalty is not undone by selecting an early, barely shrunk epoch.
    let lambda = cfg.lasso_lambda;
    let evaluate = |p: &NetworkParams, epoch: usize| -> Result<(f64, f64)> {
        let tr = penalized_loss(p, x_train, y_train, lambda)?;
        let va = penalized_loss(p, x_val, y_val, lambda)?;
        if !tr.is_finite() || !va.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        Ok((tr, va))
    };

    let (tr0, va0) = evaluate(&params, 0)?;
    let mut trace = TrainTrace {
        train_loss: vec![tr0],
        val_loss: vec![va0],
        best_epoch: 0,
        stop_reason: StopReason::Budget,
    };
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    stopper.observe(0, va0);
    let mut best = params.clone();

    for epoch in 1..=cfg.max_epochs {
        for &(a, b) in &bounds {
            let xb = x_train.slice(s![a..b, ..]);
            let yb = y_train.slice(s![a..b]);
            let (out, cache) = params.forward_train(xb, &mut rng)?;
            let scale = 2.0 / (b - a) as f64;
            let w: Array1<f64> = (&out - &yb) * scale;
            let (mut grad, _) = params.backward(&cache, w.view())?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch });
            }
            add_lasso_subgradient(&mut grad, &theta, cfg.lasso_lambda);
            match cfg.optimizer {
                OptimizerKind::Adam => adam.step(&mut theta, &grad, cfg.learning_rate),
                OptimizerKind::Sgd => sgd_step(&mut theta, &grad, cfg.learning_rate),
            }
            params.set_flat(&theta)?;
        }
        let (tr, va) = evaluate(&params, epoch)?;
        trace.train_loss.push(tr);
        trace.val_loss.push(va);
        match stopper.observe(epoch, va) {
            Verdict::Improved => best = params.clone(),
            Verdict::Continue => {}
            Verdict::Stop => {
                trace.stop_reason = StopReason::Patience;
                break;
            }
        }
    }
    trace.best_epoch = stopper.best_epoch();
    Ok((best, trace))
}
