//! Dense feed-forward networks: ReLU hidden layers, scalar linear output.
//!
//! A network with hidden widths `[M1, …, M_{L-1}]` computes
//! `g_l = relu(bn(g_{l-1} W_lᵀ + b_lᵀ))` for hidden layers and a linear output
//! `g_L = g_{L-1} W_Lᵀ + b_L`. Batch normalization (optional, per hidden layer)
//! sits between the affine map and the ReLU; dropout (inverted) is applied to
//! hidden activations in train mode only.
//!
//! The flat parameter vector stacks every layer's weights (row-major, i.e.
//! `vec(Wᵀ)`) followed by every layer's biases.
//!
//! ReLU derivative at exactly zero is taken to be 0.

mod batch_norm;
mod checkpoint;

pub use batch_norm::{batch_norm_layer, BatchNormState, BnMode, BN_EPS, BN_MOMENTUM};
pub use checkpoint::NetworkCheckpoint;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest admissible dropout probability.
pub const MAX_DROPOUT: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
    pub dropout_rate: f64,
    /// One flag per hidden layer; empty means no batch normalization anywhere.
    pub batch_norm: Vec<bool>,
    pub seed: u64,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>) -> Self {
        Self {
            input_dim,
            hidden_widths,
            output_dim: 1,
            dropout_rate: 0.0,
            batch_norm: Vec::new(),
            seed: 0,
        }
    }

    /// A linear model `wᵀx + b`.
    pub fn linear(input_dim: usize) -> Self {
        Self::new(input_dim, Vec::new())
    }

    /// `depth` hidden layers of equal `width`.
    pub fn deep(input_dim: usize, depth: usize, width: usize) -> Self {
        Self::new(input_dim, vec![width; depth])
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    /// Enables (or disables) batch normalization on every hidden layer.
    pub fn with_batch_norm(mut self, on: bool) -> Self {
        self.batch_norm = if on {
            vec![true; self.hidden_widths.len()]
        } else {
            Vec::new()
        };
        self
    }

    pub fn depth(&self) -> usize {
        self.hidden_widths.len()
    }

    pub fn uses_batch_norm(&self, hidden_layer: usize) -> bool {
        self.batch_norm.get(hidden_layer).copied().unwrap_or(false)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidSpec("input_dim must be positive".into()));
        }
        if self.output_dim != 1 {
            return Err(Error::InvalidSpec(format!(
                "output layer is scalar, got output_dim {}",
                self.output_dim
            )));
        }
        if let Some(i) = self.hidden_widths.iter().position(|&w| w == 0) {
            return Err(Error::InvalidSpec(format!("hidden layer {} has width 0", i + 1)));
        }
        if !(0.0..=MAX_DROPOUT).contains(&self.dropout_rate) {
            return Err(Error::InvalidSpec(format!(
                "dropout rate {} outside [0, {MAX_DROPOUT}]",
                self.dropout_rate
            )));
        }
        if !self.batch_norm.is_empty() && self.batch_norm.len() != self.hidden_widths.len() {
            return Err(Error::InvalidSpec(format!(
                "{} batch-norm flags for {} hidden layers",
                self.batch_norm.len(),
                self.hidden_widths.len()
            )));
        }
        Ok(())
    }

    /// `(fan_out, fan_in)` of every layer, output layer last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden_widths.len() + 1);
        let mut fan_in = self.input_dim;
        for &w in &self.hidden_widths {
            shapes.push((w, fan_in));
            fan_in = w;
        }
        shapes.push((self.output_dim, fan_in));
        shapes
    }

    /// Number of trainable parameters `d`.
    pub fn num_params(&self) -> usize {
        self.layer_shapes().iter().map(|(o, i)| o * i + o).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `fan_out × fan_in`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    spec: NetworkSpec,
    layers: Vec<Layer>,
    bn: Vec<Option<BatchNormState>>,
}

/// Per-layer intermediates kept for the backward pass.
#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    /// Post-normalization pre-activation (equals the affine output without BN).
    pre: Array2<f64>,
    bn: Option<BnCache>,
    dropout_scale: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    batch_stats: bool,
}

/// Forward intermediates of one batch.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    hidden: Vec<LayerCache>,
    last_input: Array2<f64>,
}

impl NetworkParams {
    /// Scaled-uniform initialization, `U(±√(6/(fan_in+fan_out)))`, zero biases.
    pub fn init(spec: &NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(fan_out, fan_in)| {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights =
                    Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-a..a));
                Layer {
                    weights,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self {
            bn: Self::fresh_bn(spec),
            spec: spec.clone(),
            layers,
        })
    }

    /// All-zero parameters (the constant-zero function).
    pub fn zeros(spec: &NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(o, i)| Layer {
                weights: Array2::zeros((o, i)),
                bias: Array1::zeros(o),
            })
            .collect();
        Ok(Self {
            bn: Self::fresh_bn(spec),
            spec: spec.clone(),
            layers,
        })
    }

    /// Builds parameters from explicit layers (weights `fan_out × fan_in`).
    pub fn from_layers(spec: &NetworkSpec, layers: Vec<Layer>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(Error::InvalidSpec(format!(
                "spec has {} layers, got {}",
                shapes.len(),
                layers.len()
            )));
        }
        for (l, ((o, i), layer)) in shapes.iter().zip(&layers).enumerate() {
            if layer.weights.dim() != (*o, *i) || layer.bias.len() != *o {
                return Err(Error::Shape {
                    layer: l + 1,
                    detail: format!(
                        "expected weights {o}×{i} and bias {o}, got {:?} and {}",
                        layer.weights.dim(),
                        layer.bias.len()
                    ),
                });
            }
        }
        Ok(Self {
            bn: Self::fresh_bn(spec),
            spec: spec.clone(),
            layers,
        })
    }

    /// Rebuilds parameters from a flat vector.
    pub fn from_flat(spec: &NetworkSpec, theta: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(spec)?;
        p.set_flat(theta)?;
        Ok(p)
    }

    fn fresh_bn(spec: &NetworkSpec) -> Vec<Option<BatchNormState>> {
        spec.hidden_widths
            .iter()
            .enumerate()
            .map(|(l, &w)| spec.uses_batch_norm(l).then(|| BatchNormState::new(w)))
            .collect()
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn batch_norm_states(&self) -> &[Option<BatchNormState>] {
        &self.bn
    }

    pub(crate) fn batch_norm_states_mut(&mut self) -> &mut [Option<BatchNormState>] {
        &mut self.bn
    }

    pub fn num_params(&self) -> usize {
        self.spec.num_params()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            theta.extend(layer.weights.iter());
        }
        for layer in &self.layers {
            theta.extend(layer.bias.iter());
        }
        theta
    }

    pub fn set_flat(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.num_params() {
            return Err(Error::InvalidArgument(format!(
                "parameter vector has length {}, network needs {}",
                theta.len(),
                self.num_params()
            )));
        }
        let mut pos = 0;
        for layer in &mut self.layers {
            for w in layer.weights.iter_mut() {
                *w = theta[pos];
                pos += 1;
            }
        }
        for layer in &mut self.layers {
            for b in layer.bias.iter_mut() {
                *b = theta[pos];
                pos += 1;
            }
        }
        Ok(())
    }

    /// Sum of absolute parameter values, `‖θ‖₁`.
    pub fn l1_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| {
                l.weights.iter().map(|v| v.abs()).sum::<f64>()
                    + l.bias.iter().map(|v| v.abs()).sum::<f64>()
            })
            .sum()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.spec.input_dim {
            return Err(Error::Shape {
                layer: 1,
                detail: format!(
                    "input has {} columns, layer expects {}",
                    x.ncols(),
                    self.spec.input_dim
                ),
            });
        }
        Ok(())
    }

    /// Eval-mode forward pass: no dropout, running batch-norm statistics.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.check_input(&x)?;
        let mut a = x.to_owned();
        for (l, layer) in self.layers[..self.layers.len() - 1].iter().enumerate() {
            let mut z = affine(&a, layer);
            if let Some(state) = &self.bn[l] {
                state.normalize_eval(&mut z);
            }
            z.mapv_inplace(relu);
            a = z;
        }
        Ok(affine(&a, self.layers.last().expect("output layer")).column(0).to_owned())
    }

    /// Eval-mode output for a single row.
    pub fn forward_row(&self, x: ArrayView1<f64>) -> Result<f64> {
        let x2 = x.insert_axis(Axis(0));
        Ok(self.forward(x2)?[0])
    }

    /// Activations of the last hidden layer (the inputs themselves for a
    /// linear network), eval mode.
    pub fn hidden_features(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut a = x.to_owned();
        for (l, layer) in self.layers[..self.layers.len() - 1].iter().enumerate() {
            let mut z = affine(&a, layer);
            if let Some(state) = &self.bn[l] {
                state.normalize_eval(&mut z);
            }
            z.mapv_inplace(relu);
            a = z;
        }
        Ok(a)
    }

    /// Train-mode forward pass. Samples dropout masks from `rng`, normalizes
    /// with batch statistics and updates the running batch-norm statistics.
    pub fn forward_train(
        &mut self,
        x: ArrayView2<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Array1<f64>, ForwardCache)> {
        self.check_input(&x)?;
        let n = x.nrows();
        let rate = self.spec.dropout_rate;
        let n_hidden = self.layers.len() - 1;
        let mut hidden = Vec::with_capacity(n_hidden);
        let mut a = x.to_owned();
        for l in 0..n_hidden {
            let mut z = affine(&a, &self.layers[l]);
            let bn = match &mut self.bn[l] {
                Some(state) => {
                    if n < 2 {
                        return Err(Error::DegenerateBatch { rows: n });
                    }
                    let (xhat, inv_std) = state.normalize_train(&z);
                    z = xhat.clone();
                    Some(BnCache {
                        xhat,
                        inv_std,
                        batch_stats: true,
                    })
                }
                None => None,
            };
            let pre = z.clone();
            z.mapv_inplace(relu);
            let dropout_scale = (rate > 0.0).then(|| {
                let keep = 1.0 / (1.0 - rate);
                Array2::from_shape_fn(z.dim(), |_| {
                    if rng.random::<f64>() < rate {
                        0.0
                    } else {
                        keep
                    }
                })
            });
            if let Some(mask) = &dropout_scale {
                z *= mask;
            }
            hidden.push(LayerCache {
                input: std::mem::replace(&mut a, z),
                pre,
                bn,
                dropout_scale,
            });
        }
        let out = affine(&a, &self.layers[n_hidden]).column(0).to_owned();
        Ok((
            out,
            ForwardCache {
                hidden,
                last_input: a,
            },
        ))
    }

    /// Eval-mode forward pass that keeps intermediates for differentiation.
    fn forward_cached(&self, x: ArrayView2<f64>) -> Result<(Array1<f64>, ForwardCache)> {
        self.check_input(&x)?;
        let n_hidden = self.layers.len() - 1;
        let mut hidden = Vec::with_capacity(n_hidden);
        let mut a = x.to_owned();
        for l in 0..n_hidden {
            let mut z = affine(&a, &self.layers[l]);
            let bn = self.bn[l].as_ref().map(|state| {
                state.normalize_eval(&mut z);
                BnCache {
                    xhat: Array2::zeros((0, 0)),
                    inv_std: state.eval_inv_std(),
                    batch_stats: false,
                }
            });
            let pre = z.clone();
            z.mapv_inplace(relu);
            hidden.push(LayerCache {
                input: std::mem::replace(&mut a, z),
                pre,
                bn,
                dropout_scale: None,
            });
        }
        let out = affine(&a, &self.layers[n_hidden]).column(0).to_owned();
        Ok((
            out,
            ForwardCache {
                hidden,
                last_input: a,
            },
        ))
    }

    /// Reverse pass. `output_weights[n]` is `∂loss/∂output_n`; returns the
    /// flat gradient (same layout as [`flatten`](Self::flatten)) and the
    /// gradient with respect to the input rows.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_weights: ArrayView1<f64>,
    ) -> Result<(Vec<f64>, Array2<f64>)> {
        let n = cache.last_input.nrows();
        if output_weights.len() != n {
            return Err(Error::Shape {
                layer: self.layers.len(),
                detail: format!(
                    "{} output weights for a batch of {n} rows",
                    output_weights.len()
                ),
            });
        }
        let n_layers = self.layers.len();
        let mut w_grads: Vec<Array2<f64>> = Vec::with_capacity(n_layers);
        let mut b_grads: Vec<Array1<f64>> = Vec::with_capacity(n_layers);

        // Output layer: dZ is n×1.
        let dz = output_weights.to_owned().insert_axis(Axis(1));
        w_grads.push(dz.t().dot(&cache.last_input));
        b_grads.push(dz.sum_axis(Axis(0)));
        let mut da = dz.dot(&self.layers[n_layers - 1].weights);

        for l in (0..n_layers - 1).rev() {
            let lc = &cache.hidden[l];
            if let Some(mask) = &lc.dropout_scale {
                da *= mask;
            }
            // ReLU derivative: 1 for strictly positive pre-activation, else 0.
            ndarray::Zip::from(&mut da)
                .and(&lc.pre)
                .for_each(|g, &z| {
                    if z <= 0.0 {
                        *g = 0.0
                    }
                });
            let dz = match &lc.bn {
                None => da,
                Some(bn) if !bn.batch_stats => da * &bn.inv_std,
                Some(bn) => {
                    let m = n as f64;
                    let sum_d = da.sum_axis(Axis(0));
                    let sum_dx = (&da * &bn.xhat).sum_axis(Axis(0));
                    let mut dz = da * m;
                    dz -= &sum_d;
                    dz -= &(&bn.xhat * &sum_dx);
                    dz *= &(&bn.inv_std / m);
                    dz
                }
            };
            w_grads.push(dz.t().dot(&lc.input));
            b_grads.push(dz.sum_axis(Axis(0)));
            da = dz.dot(&self.layers[l].weights);
        }
        w_grads.reverse();
        b_grads.reverse();

        let mut grad = Vec::with_capacity(self.num_params());
        for g in &w_grads {
            grad.extend(g.iter());
        }
        for g in &b_grads {
            grad.extend(g.iter());
        }
        Ok((grad, da))
    }

    /// Gradient of `Σₙ wₙ · g(xₙ; θ)` with respect to θ, eval mode.
    pub fn grad_params(&self, x: ArrayView2<f64>, output_weights: ArrayView1<f64>) -> Result<Vec<f64>> {
        if output_weights.len() != x.nrows() {
            return Err(Error::Shape {
                layer: self.layers.len(),
                detail: format!(
                    "{} output weights for {} rows",
                    output_weights.len(),
                    x.nrows()
                ),
            });
        }
        let (_, cache) = self.forward_cached(x)?;
        Ok(self.backward(&cache, output_weights)?.0)
    }

    /// `∂g(x; θ)/∂x` for a single input row, eval mode.
    pub fn grad_input(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let x2 = x.insert_axis(Axis(0));
        let (_, cache) = self.forward_cached(x2)?;
        let ones = Array1::ones(1);
        let (_, dx) = self.backward(&cache, ones.view())?;
        Ok(dx.row(0).to_owned())
    }

    /// Input gradients for every row of `x`.
    pub fn grad_input_rows(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        // Rows are independent in eval mode, so one batched reverse pass with
        // unit output weights yields every row's input gradient.
        let (_, cache) = self.forward_cached(x)?;
        let ones = Array1::ones(x.nrows());
        Ok(self.backward(&cache, ones.view())?.1)
    }
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn affine(a: &Array2<f64>, layer: &Layer) -> Array2<f64> {
    let mut z = a.dot(&layer.weights.t());
    z += &layer.bias;
    z
}
