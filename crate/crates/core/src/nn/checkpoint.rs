//! JSON checkpoints: spec fields in clear, parameters as base64-encoded
//! little-endian `f64` so round trips are bit-exact.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::{BatchNormState, NetworkParams, NetworkSpec};
use crate::error::{Error, Result};

pub const FORMAT: &str = "deep-panel/network/v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkCheckpoint {
    pub format: String,
    pub spec: NetworkSpec,
    pub num_params: usize,
    /// Flat θ, little-endian f64, base64.
    pub theta_le: String,
    /// Running (mean, var) per hidden layer, same encoding; `None` without BN.
    pub batch_norm: Vec<Option<(String, String)>>,
}

pub(crate) fn encode_f64s(values: impl IntoIterator<Item = f64>) -> String {
    let bytes: Vec<u8> = values.into_iter().flat_map(f64::to_le_bytes).collect();
    STANDARD.encode(bytes)
}

pub(crate) fn decode_f64s(s: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(s)
        .map_err(|e| Error::Checkpoint(format!("bad base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!(
            "payload of {} bytes is not a whole number of f64",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

impl NetworkCheckpoint {
    pub fn from_params(params: &NetworkParams) -> Self {
        Self {
            format: FORMAT.to_string(),
            spec: params.spec().clone(),
            num_params: params.num_params(),
            theta_le: encode_f64s(params.flatten()),
            batch_norm: params
                .batch_norm_states()
                .iter()
                .map(|s| {
                    s.as_ref().map(|s| {
                        (
                            encode_f64s(s.running_mean.iter().copied()),
                            encode_f64s(s.running_var.iter().copied()),
                        )
                    })
                })
                .collect(),
        }
    }

    pub fn into_params(self) -> Result<NetworkParams> {
        if self.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", self.format)));
        }
        let theta = decode_f64s(&self.theta_le)?;
        if theta.len() != self.num_params {
            return Err(Error::Checkpoint(format!(
                "header says {} parameters, payload has {}",
                self.num_params,
                theta.len()
            )));
        }
        let mut params = NetworkParams::from_flat(&self.spec, &theta)?;
        let states = params.batch_norm_states_mut();
        if self.batch_norm.len() != states.len() {
            return Err(Error::Checkpoint("batch-norm layer count mismatch".into()));
        }
        for (slot, saved) in states.iter_mut().zip(self.batch_norm) {
            match (slot.as_mut(), saved) {
                (Some(state), Some((mean, var))) => {
                    let mean = decode_f64s(&mean)?;
                    let var = decode_f64s(&var)?;
                    if mean.len() != state.running_mean.len() || var.len() != mean.len() {
                        return Err(Error::Checkpoint("batch-norm width mismatch".into()));
                    }
                    *state = BatchNormState {
                        running_mean: Array1::from(mean),
                        running_var: Array1::from(var),
                    };
                }
                (None, None) => {}
                _ => return Err(Error::Checkpoint("batch-norm flags disagree with spec".into())),
            }
        }
        Ok(params)
    }
}

impl NetworkParams {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&NetworkCheckpoint::from_params(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str::<NetworkCheckpoint>(s)?.into_params()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
