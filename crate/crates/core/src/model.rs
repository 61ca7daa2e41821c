//! Model assembly: an ordered layer chain with a designated list of editable
//! (parameterized) layers, prediction, and per-layer activation capture.

use rand::Rng;

use crate::autograd::{Tape, ValId};
use crate::error::{RectError, Result};
use crate::layers::{Layer, LayerKind};
use crate::rng;
use crate::tensor::Tensor;

/// An ordered feed-forward chain. Shapes are validated end to end at
/// construction; models are immutable afterwards (editing clones first).
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    class_count: usize,
    editable: Vec<usize>,
}

impl Model {
    /// Build a model, checking that layer shapes chain consistently and that
    /// the final output is `[class_count]`. Every parameterized layer starts
    /// out editable.
    pub fn new(layers: Vec<Layer>, input_shape: Vec<usize>, class_count: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(RectError::EmptyInput("model has no layers".into()));
        }
        let mut shape = input_shape.clone();
        for layer in &layers {
            shape = layer.kind.output_shape(&shape)?;
        }
        if shape != [class_count] {
            return Err(RectError::ShapeMismatch {
                context: "model output".into(),
                expected: vec![class_count],
                actual: shape,
            });
        }
        let editable = layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind.has_params())
            .map(|(i, _)| i)
            .collect();
        Ok(Model {
            layers,
            input_shape,
            class_count,
            editable,
        })
    }

    /// Restrict the editable-layer list. Must be a strictly increasing subset
    /// of the parameterized layers.
    pub fn with_editable(mut self, editable: Vec<usize>) -> Result<Self> {
        for pair in editable.windows(2) {
            if pair[0] >= pair[1] {
                return Err(RectError::InvalidArgument(
                    "editable-layer list must be strictly increasing".into(),
                ));
            }
        }
        for &idx in &editable {
            let layer = self
                .layers
                .get(idx)
                .ok_or(RectError::LayerOutOfRange {
                    layer: idx,
                    count: self.layers.len(),
                })?;
            if !layer.kind.has_params() {
                return Err(RectError::NotEditable {
                    layer: idx,
                    kind: layer.kind.name().into(),
                });
            }
        }
        self.editable = editable;
        Ok(self)
    }

    /// The reference desk-scale architecture:
    /// conv3x3(1->8) / relu / conv3x3(8->16) / relu / maxpool2 /
    /// conv3x3(16->16) / relu / flatten / dense(->classes).
    /// All convolutions are stride 1, padding 1.
    pub fn small_cnn(height: usize, width: usize, classes: usize) -> Result<Self> {
        let flat = 16 * (height / 2) * (width / 2);
        let layers = vec![
            Layer::conv2d(1, 8, 3, 1, 1),
            Layer::relu(),
            Layer::conv2d(8, 16, 3, 1, 1),
            Layer::relu(),
            Layer::maxpool2d(2, 2),
            Layer::conv2d(16, 16, 3, 1, 1),
            Layer::relu(),
            Layer::flatten(),
            Layer::dense(flat, classes),
        ];
        Model::new(layers, vec![1, height, width], classes)
    }

    /// He-normal initialization of all weights (biases stay zero).
    pub fn init_params<R: Rng>(&mut self, rng: &mut R) {
        for layer in &mut self.layers {
            if let Some(w) = &mut layer.weight {
                let fan_in = w.shape()[1];
                let std = (2.0 / fan_in as f64).sqrt();
                for v in w.data_mut() {
                    *v = std * rng::normal(rng);
                }
            }
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, idx: usize) -> Result<&Layer> {
        self.layers.get(idx).ok_or(RectError::LayerOutOfRange {
            layer: idx,
            count: self.layers.len(),
        })
    }

    pub fn layer_mut(&mut self, idx: usize) -> Result<&mut Layer> {
        let count = self.layers.len();
        self.layers
            .get_mut(idx)
            .ok_or(RectError::LayerOutOfRange { layer: idx, count })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn editable_layers(&self) -> &[usize] {
        &self.editable
    }

    pub fn last_editable_layer(&self) -> usize {
        *self.editable.last().expect("model has editable layers")
    }

    /// Last convolutional layer index (the fine-tuning baseline's target).
    pub fn last_conv_layer(&self) -> Option<usize> {
        self.layers
            .iter()
            .rposition(|l| matches!(l.kind, LayerKind::Conv2d { .. }))
    }

    pub fn ensure_editable(&self, l: usize) -> Result<()> {
        if self.editable.contains(&l) {
            Ok(())
        } else {
            let kind = self
                .layers
                .get(l)
                .map(|layer| layer.kind.name().to_string())
                .unwrap_or_else(|| "missing".into());
            Err(RectError::NotEditable { layer: l, kind })
        }
    }

    /// Forward pass without bookkeeping; returns the logits.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for layer in &self.layers {
            let (out, _) = layer.forward(&cur)?;
            cur = out;
        }
        Ok(cur)
    }

    /// Logits plus argmax class.
    pub fn predict(&self, x: &Tensor) -> Result<(Tensor, usize)> {
        let logits = self.forward(x)?;
        let class = logits.argmax();
        Ok((logits, class))
    }

    pub fn predict_class(&self, x: &Tensor) -> Result<usize> {
        Ok(self.predict(x)?.1)
    }

    /// Softmax probabilities of the logits.
    pub fn predict_probs(&self, x: &Tensor) -> Result<Vec<f64>> {
        let logits = self.forward(x)?;
        Ok(softmax(logits.data()))
    }

    /// All activations: index 0 is the input, index l+1 is layer l's output.
    pub fn activations(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for layer in &self.layers {
            let (out, _) = layer.forward(acts.last().unwrap())?;
            acts.push(out);
        }
        Ok(acts)
    }

    /// Input and output features of editable layer `l`, exactly as a forward
    /// pass computes them.
    pub fn capture(&self, x: &Tensor, l: usize) -> Result<(Tensor, Tensor)> {
        self.ensure_editable(l)?;
        let mut acts = self.activations(x)?;
        let output = acts.remove(l + 1);
        let input = acts.remove(l);
        Ok((input, output))
    }

    /// Taped forward pass. Returns the tape plus value ids: `ids[0]` is the
    /// input, `ids[l + 1]` is layer l's output (the logits are the last id).
    pub fn forward_traced<'m>(&'m self, x: &Tensor) -> Result<(Tape<'m>, Vec<ValId>)> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let mut ids = Vec::with_capacity(self.layers.len() + 1);
        ids.push(tape.input(x.clone()));
        for (slot, layer) in self.layers.iter().enumerate() {
            let out = tape.forward_layer(layer, slot, *ids.last().unwrap())?;
            ids.push(out);
        }
        Ok((tape, ids))
    }

    /// Gradient of the scalar head `sum_i head_weights[i] * logits[i]` with
    /// respect to layer l's output features.
    pub fn grad_wrt_layer(&self, l: usize, head_weights: &[f64], x: &Tensor) -> Result<Tensor> {
        if l >= self.layers.len() {
            return Err(RectError::LayerOutOfRange {
                layer: l,
                count: self.layers.len(),
            });
        }
        let (mut tape, ids) = self.forward_traced(x)?;
        let head = tape.weighted_sum(*ids.last().unwrap(), head_weights.to_vec())?;
        let grads = tape.backward(head)?;
        let act_shape = tape.value(ids[l + 1]).shape().to_vec();
        let g = grads
            .wrt_value(ids[l + 1])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; act_shape.iter().product()]);
        Tensor::new(act_shape, g)
    }

    /// Hex digest of all parameters (little-endian f64 bytes in layer order).
    pub fn param_digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for layer in &self.layers {
            for t in [&layer.weight, &layer.bias].into_iter().flatten() {
                for v in t.data() {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        format!("{:x}", hasher.finalize())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(RectError::ShapeMismatch {
                context: "model input".into(),
                expected: self.input_shape.clone(),
                actual: x.shape().to_vec(),
            });
        }
        Ok(())
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn const_class_model() -> Model {
        // Final dense layer has zero weights and bias [0, 1, 0]: always class 1.
        let mut dense = Layer::dense(4, 3);
        dense.bias = Some(Tensor::from_vec(vec![0.0, 1.0, 0.0]));
        Model::new(
            vec![Layer::flatten(), dense],
            vec![1, 2, 2],
            3,
        )
        .unwrap()
    }

    #[test]
    fn zero_dense_with_bias_predicts_fixed_class() {
        let m = const_class_model();
        let x = Tensor::new(vec![1, 2, 2], vec![0.3, 0.7, 0.1, 0.9]).unwrap();
        let (logits, class) = m.predict(&x).unwrap();
        assert_eq!(class, 1);
        assert_eq!(logits.data(), &[0.0, 1.0, 0.0]);
        // Determinism: identical input, identical logits.
        let (logits2, _) = m.predict(&x).unwrap();
        assert_eq!(logits.data(), logits2.data());
    }

    #[test]
    fn small_cnn_shapes_chain() {
        let m = Model::small_cnn(16, 16, 4).unwrap();
        assert_eq!(m.editable_layers(), &[0, 2, 5, 8]);
        let x = Tensor::zeros(vec![1, 16, 16]);
        let (logits, _) = m.predict(&x).unwrap();
        assert_eq!(logits.shape(), &[4]);
    }

    #[test]
    fn capture_first_layer_input_is_x() {
        let mut m = Model::small_cnn(16, 16, 4).unwrap();
        let mut rng = crate::rng::rng_for(3, "init");
        m.init_params(&mut rng);
        let x = Tensor::new(
            vec![1, 16, 16],
            (0..256).map(|i| (i % 7) as f64 / 7.0).collect(),
        )
        .unwrap();
        let (input, _) = m.capture(&x, 0).unwrap();
        assert_eq!(input.data(), x.data());
    }

    #[test]
    fn capture_matches_forward_chain_bit_exactly() {
        let mut m = Model::small_cnn(16, 16, 4).unwrap();
        let mut rng = crate::rng::rng_for(11, "init");
        m.init_params(&mut rng);
        let x = Tensor::new(
            vec![1, 16, 16],
            (0..256).map(|i| ((i * 13) % 10) as f64 / 10.0).collect(),
        )
        .unwrap();
        let acts = m.activations(&x).unwrap();
        for &l in m.editable_layers() {
            let (input, output) = m.capture(&x, l).unwrap();
            assert_eq!(input.data(), acts[l].data());
            assert_eq!(output.data(), acts[l + 1].data());
        }
    }

    #[test]
    fn capture_rejects_non_editable() {
        let m = Model::small_cnn(16, 16, 4).unwrap();
        let x = Tensor::zeros(vec![1, 16, 16]);
        assert!(matches!(
            m.capture(&x, 1),
            Err(RectError::NotEditable { layer: 1, .. })
        ));
    }

    #[test]
    fn identity_dense_capture_input_equals_output() {
        let mut dense = Layer::dense(3, 3);
        dense.weight = Some(
            Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let m = Model::new(vec![dense], vec![3], 3).unwrap();
        let x = Tensor::from_vec(vec![0.5, -0.25, 2.0]);
        let (input, output) = m.capture(&x, 0).unwrap();
        assert_eq!(input.data(), output.data());
    }

    #[test]
    fn grad_wrt_layer_for_linear_head_is_weight_row() {
        // Model: identity-ish first layer (flatten) then dense; head = first logit.
        let mut dense = Layer::dense(2, 2);
        dense.weight = Some(Tensor::new(vec![2, 2], vec![3.0, -2.0, 1.0, 4.0]).unwrap());
        let m = Model::new(vec![Layer::flatten(), dense], vec![1, 1, 2], 2).unwrap();
        let x = Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap();
        // Gradient of logit 0 wrt the flatten output equals row 0 of W.
        let g = m.grad_wrt_layer(0, &[1.0, 0.0], &x).unwrap();
        assert_eq!(g.data(), &[3.0, -2.0]);
    }

    #[test]
    fn grad_wrt_layer_out_of_range_rejected() {
        let m = const_class_model();
        let x = Tensor::zeros(vec![1, 2, 2]);
        assert!(m.grad_wrt_layer(5, &[1.0, 0.0, 0.0], &x).is_err());
    }
}
