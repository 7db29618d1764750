use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
/// Weight on the previous running statistic when folding in a new batch.
pub const BN_MOMENTUM: f64 = 0.9;

/// Running statistics of one batch-normalized layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

impl BatchNormState {
    pub fn new(width: usize) -> Self {
        Self {
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
        }
    }

    pub(crate) fn eval_inv_std(&self) -> Array1<f64> {
        self.running_var.mapv(|v| 1.0 / (v + BN_EPS).sqrt())
    }

    pub(crate) fn normalize_eval(&self, z: &mut Array2<f64>) {
        let inv = self.eval_inv_std();
        *z -= &self.running_mean;
        *z *= &inv;
    }

    /// Standardizes with batch statistics and folds them into the running
    /// statistics. Returns `(x̂, 1/√(σ²+ε))`.
    pub(crate) fn normalize_train(&mut self, z: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
        let n = z.nrows() as f64;
        let mean = z.sum_axis(Axis(0)) / n;
        let centered = z - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let xhat = &centered * &inv_std;
        self.running_mean = &self.running_mean * BN_MOMENTUM + &mean * (1.0 - BN_MOMENTUM);
        self.running_var = &self.running_var * BN_MOMENTUM + &var * (1.0 - BN_MOMENTUM);
        (xhat, inv_std)
    }
}

/// Standalone batch normalization of an `n × m` block.
///
/// Train mode standardizes each column with batch mean and variance and
/// updates `state`; eval mode uses the running statistics.
pub fn batch_norm_layer(z: &Array2<f64>, state: &mut BatchNormState, mode: BnMode) -> Result<Array2<f64>> {
    if z.ncols() != state.running_mean.len() {
        return Err(Error::Shape {
            layer: 0,
            detail: format!(
                "batch-norm over {} columns given {} columns",
                state.running_mean.len(),
                z.ncols()
            ),
        });
    }
    match mode {
        BnMode::Train => {
            if z.nrows() < 2 {
                return Err(Error::DegenerateBatch { rows: z.nrows() });
            }
            Ok(state.normalize_train(z).0)
        }
        BnMode::Eval => {
            let mut out = z.clone();
            state.normalize_eval(&mut out);
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn constant_column_maps_to_zero() {
        let z = array![[3.0, 1.0], [3.0, 2.0], [3.0, 3.0]];
        let mut s = BatchNormState::new(2);
        let out = batch_norm_layer(&z, &mut s, BnMode::Train).unwrap();
        assert!(out.column(0).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_row_batch_is_already_standard() {
        let z = array![[-1.0], [1.0]];
        let mut s = BatchNormState::new(1);
        let out = batch_norm_layer(&z, &mut s, BnMode::Train).unwrap();
        let scale = 1.0 / (1.0 + BN_EPS).sqrt();
        assert!((out[[0, 0]] + scale).abs() < 1e-15);
        assert!((out[[1, 0]] - scale).abs() < 1e-15);
    }

    #[test]
    fn single_row_train_batch_is_rejected() {
        let mut s = BatchNormState::new(1);
        assert!(matches!(
            batch_norm_layer(&array![[1.0]], &mut s, BnMode::Train),
            Err(Error::DegenerateBatch { rows: 1 })
        ));
        assert!(batch_norm_layer(&array![[1.0]], &mut s, BnMode::Eval).is_ok());
    }

    #[test]
    fn eval_after_training_on_standard_normal_is_near_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut s = BatchNormState::new(3);
        let z = Array2::from_shape_fn((10_000, 3), |_| StandardNormal.sample(&mut rng));
        for chunk in z.axis_chunks_iter(Axis(0), 100) {
            batch_norm_layer(&chunk.to_owned(), &mut s, BnMode::Train).unwrap();
        }
        let probe = Array2::from_shape_fn((200, 3), |_| StandardNormal.sample(&mut rng));
        let out = batch_norm_layer(&probe, &mut s, BnMode::Eval).unwrap();
        let max_dev = (&out - &probe).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!(max_dev < 0.1, "max deviation {max_dev}");
    }
}
