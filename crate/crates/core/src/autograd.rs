//! Reverse-mode differentiation over a recorded forward pass.
//!
//! The tape records layer applications plus the scalar reductions used as
//! optimization and attribution heads. Replaying it in reverse yields
//! gradients for every parameter and every intermediate activation, which is
//! what both training and layer-wise attribution consume.
//!
//! A tape is single-threaded; independent tapes can run on separate threads.

use std::collections::BTreeMap;

use crate::error::{RectError, Result};
use crate::layers::{Layer, LayerTrace, ParamGrad};
use crate::tensor::Tensor;

pub type ValId = usize;

enum OpRecord<'m> {
    /// Input or constant; no upstream.
    Leaf,
    /// Application of a model layer. `slot` identifies the layer for
    /// parameter-gradient bookkeeping (the model's layer index).
    Layer {
        layer: &'m Layer,
        slot: usize,
        input: ValId,
        trace: LayerTrace,
    },
    /// Scalar head: dot product of a value with fixed weights.
    WeightedSum { input: ValId, weights: Vec<f64> },
    /// Scalar head: -log softmax(logits)[target].
    SoftmaxCrossEntropy {
        logits: ValId,
        target: usize,
        probs: Vec<f64>,
    },
    /// Linear combination of scalar heads.
    LinComb { terms: Vec<(f64, ValId)> },
}

struct Node<'m> {
    value: Tensor,
    op: OpRecord<'m>,
}

/// Wengert-style tape: appended during forward, replayed in reverse.
/// Nodes only reference earlier nodes, so the graph is acyclic and one
/// reverse sweep visits each node exactly once.
pub struct Tape<'m> {
    nodes: Vec<Node<'m>>,
}

impl<'m> Default for Tape<'m> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'m> Tape<'m> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Tensor) -> ValId {
        self.nodes.push(Node {
            value,
            op: OpRecord::Leaf,
        });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: ValId) -> &Tensor {
        &self.nodes[id].value
    }

    fn check_id(&self, id: ValId) -> Result<()> {
        if id >= self.nodes.len() {
            Err(RectError::UntapedValue(id))
        } else {
            Ok(())
        }
    }

    /// Run one layer forward, recording the step.
    pub fn forward_layer(&mut self, layer: &'m Layer, slot: usize, input: ValId) -> Result<ValId> {
        self.check_id(input)?;
        let (out, trace) = layer.forward(&self.nodes[input].value)?;
        self.nodes.push(Node {
            value: out,
            op: OpRecord::Layer {
                layer,
                slot,
                input,
                trace,
            },
        });
        Ok(self.nodes.len() - 1)
    }

    /// Scalar head h = sum_i weights[i] * value[i].
    pub fn weighted_sum(&mut self, input: ValId, weights: Vec<f64>) -> Result<ValId> {
        self.check_id(input)?;
        let v = &self.nodes[input].value;
        if v.numel() != weights.len() {
            return Err(RectError::ShapeMismatch {
                context: "weighted_sum".into(),
                expected: vec![v.numel()],
                actual: vec![weights.len()],
            });
        }
        let h: f64 = v.data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        self.nodes.push(Node {
            value: Tensor::scalar(h),
            op: OpRecord::WeightedSum { input, weights },
        });
        Ok(self.nodes.len() - 1)
    }

    /// Scalar head h = -log softmax(logits)[target].
    pub fn softmax_cross_entropy(&mut self, logits: ValId, target: usize) -> Result<ValId> {
        self.check_id(logits)?;
        let z = self.nodes[logits].value.data();
        if target >= z.len() {
            return Err(RectError::InvalidArgument(format!(
                "cross-entropy target {target} out of range for {} logits",
                z.len()
            )));
        }
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        let loss = -(probs[target].max(f64::MIN_POSITIVE)).ln();
        self.nodes.push(Node {
            value: Tensor::scalar(loss),
            op: OpRecord::SoftmaxCrossEntropy {
                logits,
                target,
                probs,
            },
        });
        Ok(self.nodes.len() - 1)
    }

    /// h = sum_i coeff_i * head_i over scalar heads.
    pub fn lin_comb(&mut self, terms: &[(f64, ValId)]) -> Result<ValId> {
        let mut h = 0.0;
        for (coeff, id) in terms {
            self.check_id(*id)?;
            let v = &self.nodes[*id].value;
            if !v.is_scalar() {
                return Err(RectError::NonScalarHead(v.shape().to_vec()));
            }
            h += coeff * v.item();
        }
        self.nodes.push(Node {
            value: Tensor::scalar(h),
            op: OpRecord::LinComb {
                terms: terms.to_vec(),
            },
        });
        Ok(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar head. Every parameter of every recorded
    /// layer and every intermediate value reachable from the head receives a
    /// gradient.
    pub fn backward(&self, head: ValId) -> Result<GradientMap> {
        self.check_id(head)?;
        let head_val = &self.nodes[head].value;
        if !head_val.is_scalar() {
            return Err(RectError::NonScalarHead(head_val.shape().to_vec()));
        }

        let mut val_grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        val_grads[head] = Some(vec![1.0]);
        let mut param_grads: BTreeMap<usize, ParamGrad> = BTreeMap::new();

        for id in (0..=head).rev() {
            let Some(g) = val_grads[id].take() else {
                continue;
            };
            match &self.nodes[id].op {
                OpRecord::Leaf => {
                    val_grads[id] = Some(g);
                }
                OpRecord::Layer {
                    layer,
                    slot,
                    input,
                    trace,
                } => {
                    let (d_in, pgrad) = layer.backward(trace, &g);
                    accumulate(&mut val_grads[*input], d_in);
                    if let Some(pg) = pgrad {
                        match param_grads.get_mut(slot) {
                            Some(acc) => {
                                add_assign(&mut acc.weight, &pg.weight);
                                add_assign(&mut acc.bias, &pg.bias);
                            }
                            None => {
                                param_grads.insert(*slot, pg);
                            }
                        }
                    }
                    val_grads[id] = Some(g);
                }
                OpRecord::WeightedSum { input, weights } => {
                    let scale = g[0];
                    let d_in: Vec<f64> = weights.iter().map(|w| w * scale).collect();
                    accumulate(&mut val_grads[*input], d_in);
                    val_grads[id] = Some(g);
                }
                OpRecord::SoftmaxCrossEntropy {
                    logits,
                    target,
                    probs,
                } => {
                    let scale = g[0];
                    let mut d_logits: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    d_logits[*target] -= scale;
                    accumulate(&mut val_grads[*logits], d_logits);
                    val_grads[id] = Some(g);
                }
                OpRecord::LinComb { terms } => {
                    let scale = g[0];
                    for (coeff, term) in terms {
                        accumulate(&mut val_grads[*term], vec![coeff * scale]);
                    }
                    val_grads[id] = Some(g);
                }
            }
        }

        Ok(GradientMap {
            val_grads,
            param_grads,
        })
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, grad: Vec<f64>) {
    match slot {
        Some(acc) => add_assign(acc, &grad),
        None => *slot = Some(grad),
    }
}

fn add_assign(acc: &mut [f64], g: &[f64]) {
    debug_assert_eq!(acc.len(), g.len());
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

/// Result of a backward sweep: gradients for tape values and for the
/// parameters of each layer slot that was applied.
pub struct GradientMap {
    val_grads: Vec<Option<Vec<f64>>>,
    param_grads: BTreeMap<usize, ParamGrad>,
}

impl GradientMap {
    /// Gradient with respect to a recorded value. `None` when no gradient
    /// flowed to it (disconnected from the head).
    pub fn wrt_value(&self, id: ValId) -> Option<&[f64]> {
        self.val_grads.get(id).and_then(|g| g.as_deref())
    }

    pub fn wrt_params(&self, slot: usize) -> Option<&ParamGrad> {
        self.param_grads.get(&slot)
    }

    pub fn param_grads(&self) -> &BTreeMap<usize, ParamGrad> {
        &self.param_grads
    }

    pub fn into_param_grads(self) -> BTreeMap<usize, ParamGrad> {
        self.param_grads
    }
}
