//! Key extraction: every receptive-field patch of a layer's input features is
//! one key column, reading the layer as a linear associative memory.

use sha2::{Digest, Sha256};

use crate::error::{RectError, Result};
use crate::layers::{im2col, LayerKind};
use crate::model::Model;
use crate::tensor::Tensor;

/// A bundle of key columns for one layer: an `n x d` matrix stored
/// column-major (each key contiguous), n = flattened receptive-field size.
#[derive(Debug, Clone)]
pub struct KeySet {
    data: Vec<f64>,
    n: usize,
    d: usize,
    layer: usize,
    source_digest: String,
}

impl KeySet {
    pub fn new(n: usize, layer: usize, source_digest: String) -> Self {
        KeySet {
            data: Vec::new(),
            n,
            d: 0,
            layer,
            source_digest,
        }
    }

    pub fn push_column(&mut self, key: &[f64]) {
        debug_assert_eq!(key.len(), self.n);
        self.data.extend_from_slice(key);
        self.d += 1;
    }

    pub fn key_dim(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.d
    }

    pub fn is_empty(&self) -> bool {
        self.d == 0
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn source_digest(&self) -> &str {
        &self.source_digest
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.n..(j + 1) * self.n]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.n)
    }

    /// Sum of squared entries; `trace(K Kᵀ)`.
    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

fn digest_samples(samples: &[Tensor]) -> String {
    let mut hasher = Sha256::new();
    for s in samples {
        for v in s.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    format!("{:x}", hasher.finalize())
}

/// Extract the key columns layer `l` sees for each sample: im2col patches of
/// the layer input for conv layers, the whole input vector for the dense
/// layer. Rejected for layers without the key/value structure.
pub fn collect_keys(model: &Model, l: usize, samples: &[Tensor]) -> Result<KeySet> {
    Ok(collect_key_values(model, l, samples)?.0)
}

/// Keys plus their present values `v = W k` (the layer output minus bias at
/// the matching position).
pub fn collect_key_values(
    model: &Model,
    l: usize,
    samples: &[Tensor],
) -> Result<(KeySet, Vec<Vec<f64>>)> {
    model.ensure_editable(l)?;
    if samples.is_empty() {
        return Err(RectError::EmptyInput("collect_keys needs samples".into()));
    }
    let layer = model.layer(l)?;
    let n = layer.key_dim().ok_or_else(|| RectError::NotEditable {
        layer: l,
        kind: layer.kind.name().into(),
    })?;
    let bias = layer.bias.as_ref().unwrap().data();

    let mut keys = KeySet::new(n, l, digest_samples(samples));
    let mut values: Vec<Vec<f64>> = Vec::new();
    for sample in samples {
        let (input, output) = model.capture(sample, l)?;
        match &layer.kind {
            LayerKind::Dense { .. } => {
                keys.push_column(input.data());
                values.push(output.data().iter().zip(bias).map(|(o, b)| o - b).collect());
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let (h, w) = (input.shape()[1], input.shape()[2]);
                let (oh, ow) = (output.shape()[1], output.shape()[2]);
                let patches = im2col(
                    input.data(),
                    *in_channels,
                    h,
                    w,
                    *kernel,
                    *stride,
                    *padding,
                    oh,
                    ow,
                );
                let cols = oh * ow;
                let out = output.data();
                for j in 0..cols {
                    let mut key = vec![0.0; n];
                    for r in 0..n {
                        key[r] = patches[r * cols + j];
                    }
                    keys.push_column(&key);
                    values.push(
                        (0..*out_channels)
                            .map(|o| out[o * cols + j] - bias[o])
                            .collect(),
                    );
                }
            }
            _ => unreachable!("editable layers always have a key dimension"),
        }
    }
    Ok((keys, values))
}
