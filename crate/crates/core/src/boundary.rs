//! The residual-stream states between consecutive decoder layers.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::TensorF;

/// `L + 1` hidden-state tensors of shape `[B, S, D]`: entry 0 is the
/// embedding output, entry `i + 1` the output of layer `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySet {
    boundaries: Vec<TensorF>,
    pub model_fingerprint: String,
    pub calib_fingerprint: String,
}

impl BoundarySet {
    pub fn new(
        boundaries: Vec<TensorF>,
        model_fingerprint: impl Into<String>,
        calib_fingerprint: impl Into<String>,
    ) -> Result<Self> {
        if boundaries.len() < 2 {
            return Err(Error::Format(format!(
                "need at least 2 boundaries (L >= 1), got {}",
                boundaries.len()
            )));
        }
        let first = boundaries[0].dims().to_vec();
        if first.len() != 3 {
            return Err(Error::Shape(format!(
                "boundary 0 has dims {first:?}, expected [B, S, D]"
            )));
        }
        for (i, b) in boundaries.iter().enumerate().skip(1) {
            if b.dims() != first.as_slice() {
                return Err(Error::Shape(format!(
                    "boundary {i} has dims {:?}, boundary 0 has {first:?}",
                    b.dims()
                )));
            }
        }
        Ok(Self {
            boundaries,
            model_fingerprint: model_fingerprint.into(),
            calib_fingerprint: calib_fingerprint.into(),
        })
    }

    /// Number of layers `L` (one less than the boundary count).
    pub fn layer_count(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn boundaries(&self) -> &[TensorF] {
        &self.boundaries
    }

    pub fn get(&self, i: usize) -> Option<&TensorF> {
        self.boundaries.get(i)
    }

    /// `(B, S, D)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        let d = self.boundaries[0].dims();
        (d[0], d[1], d[2])
    }

    /// SHA-256 over the dims and the exact `f64` bit patterns of every boundary.
    pub fn content_fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.boundaries.len() as u64).to_le_bytes());
        for b in &self.boundaries {
            for d in b.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in b.data() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}
