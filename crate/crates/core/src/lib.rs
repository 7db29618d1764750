//! Deep panel-data estimation: a pooled network shared by every unit plus
//! unit-wise networks fitted on the pooled residuals.

pub mod benchmarks;
pub mod data_io;
pub mod error;
pub mod estimator;
pub mod evaluation;
pub mod interpret;
pub mod linalg;
pub mod nn;
pub mod optim;
pub mod panel;
pub mod par;
pub mod pipeline;
pub mod selection;
pub mod synth;

pub use error::{Error, Result};

/// Lowercase hexadecimal rendering of a digest.
pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of `data`, hex encoded.
pub fn sha256_hex(data: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex(&Sha256::digest(data))
}
