//! The constrained rank-one edit: gradient descent on a layer's weight
//! matrix over (corrupted key, clean value) pairs, periodically projected
//! onto the rank-one set spanned by the decorrelated edit direction.

use super::stats::KeyStatistics;
use crate::data::SamplePair;
use crate::error::{RectError, Result};
use crate::layers::{im2col, LayerKind};
use crate::model::Model;
use crate::tensor::Tensor;

/// How the per-position corrupted keys collapse into the single key that
/// defines the edit direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionAggregation {
    /// Average the corrupted keys at positions whose key difference exceeds
    /// the 75th percentile of per-position differences.
    MeanKey,
    /// Use the single position with the largest key difference.
    TopDifference,
}

/// How the aggregated key maps to the edit direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionMode {
    /// d = C^{-1} k* (the constrained least-squares direction).
    CInverse,
    /// d = Z k* (the ZCA-whitened variant).
    Zca,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct EditConfig {
    /// Edit learning rate.
    pub lr: f64,
    /// Weight projection frequency P: project onto the rank-one set every P
    /// descent steps.
    pub projection_freq: usize,
    /// Inner epochs T: descent steps per edit.
    pub inner_epochs: usize,
    /// Ridge factor for key statistics (lambda = factor * trace(C)/n).
    pub ridge_factor: f64,
    pub aggregation: DirectionAggregation,
    pub direction_mode: DirectionMode,
}

impl Default for EditConfig {
    fn default() -> Self {
        EditConfig {
            lr: 1e-4,
            projection_freq: 10,
            inner_epochs: 200,
            ridge_factor: super::stats::EDIT_RIDGE_FACTOR,
            aggregation: DirectionAggregation::MeanKey,
            direction_mode: DirectionMode::CInverse,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        if self.projection_freq == 0 || self.inner_epochs == 0 {
            return Err(RectError::InvalidArgument(
                "projection frequency and inner epochs must be >= 1".into(),
            ));
        }
        if self.lr <= 0.0 || self.ridge_factor <= 0.0 {
            return Err(RectError::InvalidArgument(
                "edit learning rate and ridge must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Diagnostics from one edit.
#[derive(Debug, Clone)]
pub struct EditTrace {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Value loss at each accepted projection checkpoint (non-increasing).
    pub checkpoint_losses: Vec<f64>,
    /// Number of (key, value) target positions the edit optimized over.
    pub selected_positions: usize,
    /// The unnormalized edit direction d.
    pub direction: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub model: Model,
    pub trace: EditTrace,
}

/// Keys of a sample at layer l as columns, plus how many positions there are.
fn layer_keys(model: &Model, l: usize, x: &Tensor) -> Result<Vec<Vec<f64>>> {
    let layer = model.layer(l)?;
    let (input, _) = model.capture(x, l)?;
    match &layer.kind {
        LayerKind::Dense { .. } => Ok(vec![input.data().to_vec()]),
        LayerKind::Conv2d {
            in_channels,
            kernel,
            stride,
            padding,
            ..
        } => {
            let (h, w) = (input.shape()[1], input.shape()[2]);
            let out_shape = layer.kind.output_shape(input.shape())?;
            let (oh, ow) = (out_shape[1], out_shape[2]);
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
            let n = in_channels * kernel * kernel;
            let cols = oh * ow;
            Ok((0..cols)
                .map(|j| (0..n).map(|r| patches[r * cols + j]).collect())
                .collect())
        }
        _ => Err(RectError::NotEditable {
            layer: l,
            kind: layer.kind.name().into(),
        }),
    }
}

/// Clean-sample values (layer output minus bias) per position.
fn layer_values(model: &Model, l: usize, x: &Tensor) -> Result<Vec<Vec<f64>>> {
    let layer = model.layer(l)?;
    let bias = layer.bias.as_ref().unwrap().data();
    let (_, output) = model.capture(x, l)?;
    match &layer.kind {
        LayerKind::Dense { .. } => {
            Ok(vec![output.data().iter().zip(bias).map(|(o, b)| o - b).collect()])
        }
        LayerKind::Conv2d { out_channels, .. } => {
            let cols = output.shape()[1] * output.shape()[2];
            Ok((0..cols)
                .map(|j| (0..*out_channels).map(|o| output.data()[o * cols + j] - bias[o]).collect())
                .collect())
        }
        _ => unreachable!("checked by layer_keys"),
    }
}

/// The (corrupted key, clean value) targets of one pair, restricted to the
/// positions the aggregation rule selects, plus those corrupted keys for the
/// direction aggregate.
struct PairTargets {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    diffs: Vec<f64>,
}

fn pair_targets(
    model: &Model,
    l: usize,
    pair: &SamplePair,
    aggregation: DirectionAggregation,
) -> Result<PairTargets> {
    let keys_corrupt = layer_keys(model, l, &pair.corrupted)?;
    let keys_clean = layer_keys(model, l, &pair.clean)?;
    let values_clean = layer_values(model, l, &pair.clean)?;
    let diffs: Vec<f64> = keys_corrupt
        .iter()
        .zip(&keys_clean)
        .map(|(kc, kl)| {
            kc.iter()
                .zip(kl)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();

    let selected: Vec<usize> = match aggregation {
        DirectionAggregation::MeanKey => {
            let mut sorted = diffs.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let threshold = sorted[(sorted.len() - 1) * 3 / 4];
            let over: Vec<usize> = (0..diffs.len())
                .filter(|&j| diffs[j] > threshold)
                .collect();
            if over.is_empty() {
                (0..diffs.len()).collect()
            } else {
                over
            }
        }
        DirectionAggregation::TopDifference => {
            let best = (0..diffs.len())
                .max_by(|&a, &b| diffs[a].partial_cmp(&diffs[b]).unwrap())
                .unwrap();
            vec![best]
        }
    };

    Ok(PairTargets {
        keys: selected.iter().map(|&j| keys_corrupt[j].clone()).collect(),
        values: selected.iter().map(|&j| values_clean[j].clone()).collect(),
        diffs: selected.iter().map(|&j| diffs[j]).collect(),
    })
}

/// The key that defines the edit direction: corrupted-sample keys collapsed
/// across pairs under the aggregation rule.
pub fn aggregated_key(
    model: &Model,
    l: usize,
    pairs: &[SamplePair],
    aggregation: DirectionAggregation,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(RectError::EmptyInput("aggregated_key needs pairs".into()));
    }
    let mut keys: Vec<Vec<f64>> = Vec::new();
    let mut diffs: Vec<f64> = Vec::new();
    for pair in pairs {
        let t = pair_targets(model, l, pair, aggregation)?;
        keys.extend(t.keys);
        diffs.extend(t.diffs);
    }
    if aggregation == DirectionAggregation::TopDifference && keys.len() > 1 {
        let best = (0..diffs.len())
            .max_by(|&a, &b| diffs[a].partial_cmp(&diffs[b]).unwrap())
            .unwrap();
        return Ok(keys[best].clone());
    }
    let q = keys.len() as f64;
    let n = keys[0].len();
    let mut k_bar = vec![0.0; n];
    for k in &keys {
        for (acc, v) in k_bar.iter_mut().zip(k) {
            *acc += v / q;
        }
    }
    Ok(k_bar)
}

/// Value loss (mean squared residual over target positions) of a weight
/// matrix against (key, value) targets.
fn value_loss(w: &[f64], m: usize, n: usize, keys: &[Vec<f64>], values: &[Vec<f64>]) -> f64 {
    let q = keys.len();
    let mut loss = 0.0;
    for (k, v) in keys.iter().zip(values) {
        for o in 0..m {
            let row = &w[o * n..(o + 1) * n];
            let wk: f64 = row.iter().zip(k).map(|(a, b)| a * b).sum();
            let r = wk - v[o];
            loss += r * r;
        }
    }
    loss / q as f64
}

/// Rank-one edit of layer `l`: align the corrupted-sample keys of each pair
/// with the clean-sample values, constrained so the total weight change is a
/// rank-one matrix along `d` (built from `stats` and the aggregated key).
///
/// Fails (original model untouched) when the value loss does not decrease
/// within the configured epochs.
pub fn rank_one_edit(
    model: &Model,
    l: usize,
    pairs: &[SamplePair],
    stats: &KeyStatistics,
    cfg: &EditConfig,
) -> Result<EditOutcome> {
    cfg.validate()?;
    model.ensure_editable(l)?;
    if pairs.is_empty() {
        return Err(RectError::EmptyInput("rank_one_edit needs pairs".into()));
    }

    // Gather targets across pairs.
    let mut keys: Vec<Vec<f64>> = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    let mut diffs: Vec<f64> = Vec::new();
    for pair in pairs {
        let t = pair_targets(model, l, pair, cfg.aggregation)?;
        keys.extend(t.keys);
        values.extend(t.values);
        diffs.extend(t.diffs);
    }
    if cfg.aggregation == DirectionAggregation::TopDifference && keys.len() > 1 {
        // Across pairs, keep the single globally maximal position.
        let best = (0..diffs.len())
            .max_by(|&a, &b| diffs[a].partial_cmp(&diffs[b]).unwrap())
            .unwrap();
        keys = vec![keys[best].clone()];
        values = vec![values[best].clone()];
    }

    let layer = model.layer(l)?;
    let n = layer.key_dim().unwrap();
    let m = layer.value_dim().unwrap();
    if stats.key_dim() != n {
        return Err(RectError::ShapeMismatch {
            context: "rank_one_edit statistics".into(),
            expected: vec![n],
            actual: vec![stats.key_dim()],
        });
    }

    // Aggregated key and edit direction.
    let q = keys.len();
    let mut k_bar = vec![0.0; n];
    for k in &keys {
        for (acc, v) in k_bar.iter_mut().zip(k) {
            *acc += v / q as f64;
        }
    }
    let direction = match cfg.direction_mode {
        DirectionMode::CInverse => stats.edit_direction(&k_bar)?,
        DirectionMode::Zca => stats
            .whiten(&Tensor::from_vec(k_bar.clone()))?
            .into_data(),
    };
    let d_norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    if d_norm == 0.0 || !d_norm.is_finite() {
        return Err(RectError::InvalidArgument(
            "edit direction has zero or non-finite norm".into(),
        ));
    }
    let d_hat: Vec<f64> = direction.iter().map(|v| v / d_norm).collect();

    let w0 = layer.weight.as_ref().unwrap().data().to_vec();
    let initial_loss = value_loss(&w0, m, n, &keys, &values);

    // Already-satisfied targets (e.g. corrupted == clean): the zero update is
    // the fixed point.
    let v_scale = values
        .iter()
        .flat_map(|v| v.iter())
        .map(|v| v * v)
        .sum::<f64>()
        / q as f64;
    if initial_loss <= 1e-26 * (1.0 + v_scale) {
        return Ok(EditOutcome {
            model: model.clone(),
            trace: EditTrace {
                initial_loss,
                final_loss: initial_loss,
                checkpoint_losses: vec![initial_loss],
                selected_positions: q,
                direction,
            },
        });
    }

    // Projected gradient descent. Projection collapses the accumulated update
    // onto the rank-one set {v d_hat^T}; a checkpoint that raises the loss is
    // rolled back with a halved step size, so accepted checkpoints are
    // non-increasing.
    let mut w = w0.clone();
    let mut lr = cfg.lr;
    let mut ckpt_w = w0.clone();
    let mut ckpt_loss = initial_loss;
    let mut checkpoint_losses = vec![initial_loss];

    let project = |w: &mut [f64]| {
        for o in 0..m {
            let row = &mut w[o * n..(o + 1) * n];
            let coef: f64 = row
                .iter()
                .zip(&w0[o * n..(o + 1) * n])
                .zip(&d_hat)
                .map(|((wi, w0i), di)| (wi - w0i) * di)
                .sum();
            for (i, slot) in row.iter_mut().enumerate() {
                *slot = w0[o * n + i] + coef * d_hat[i];
            }
        }
    };

    for t in 1..=cfg.inner_epochs {
        // Gradient of the mean squared value loss.
        let mut grad = vec![0.0; m * n];
        for (k, v) in keys.iter().zip(&values) {
            for o in 0..m {
                let row = &w[o * n..(o + 1) * n];
                let wk: f64 = row.iter().zip(k).map(|(a, b)| a * b).sum();
                let r = 2.0 * (wk - v[o]) / q as f64;
                if r == 0.0 {
                    continue;
                }
                let g_row = &mut grad[o * n..(o + 1) * n];
                for (gi, ki) in g_row.iter_mut().zip(k) {
                    *gi += r * ki;
                }
            }
        }
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= lr * gi;
        }

        if t % cfg.projection_freq == 0 || t == cfg.inner_epochs {
            project(&mut w);
            let loss = value_loss(&w, m, n, &keys, &values);
            if loss.is_finite() && loss <= ckpt_loss {
                ckpt_w.copy_from_slice(&w);
                ckpt_loss = loss;
                checkpoint_losses.push(loss);
            } else {
                w.copy_from_slice(&ckpt_w);
                lr *= 0.5;
            }
        }
    }

    if ckpt_loss >= initial_loss {
        return Err(RectError::EditFailed {
            epochs: cfg.inner_epochs,
            before: initial_loss,
            after: ckpt_loss,
        });
    }

    let mut edited = model.clone();
    let weight = edited.layer_mut(l)?.weight.as_mut().unwrap();
    weight.data_mut().copy_from_slice(&ckpt_w);
    weight.check_finite("rank_one_edit weights")?;

    Ok(EditOutcome {
        model: edited,
        trace: EditTrace {
            initial_loss,
            final_loss: ckpt_loss,
            checkpoint_losses,
            selected_positions: q,
            direction,
        },
    })
}
