//! SGD training of susceptible models and the last-conv-layer fine-tuning
//! baseline.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::data::{Dataset, SamplePair};
use crate::error::{RectError, Result};
use crate::layers::ParamGrad;
use crate::metrics;
use crate::model::Model;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs at which the learning rate is multiplied by `decay`.
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            epochs: 40,
            batch_size: 32,
            milestones: vec![20, 30],
            decay: 0.1,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(RectError::InvalidArgument(
                "learning rate must be positive".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(RectError::InvalidArgument("batch size must be >= 1".into()));
        }
        for pair in self.milestones.windows(2) {
            if pair[0] >= pair[1] {
                return Err(RectError::InvalidArgument(
                    "lr milestones must be strictly increasing".into(),
                ));
            }
        }
        if let Some(&last) = self.milestones.last() {
            if last >= self.epochs {
                return Err(RectError::InvalidArgument(format!(
                    "lr milestone {last} must be below epoch count {}",
                    self.epochs
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub clean_acc: Option<f64>,
    pub asr: Option<f64>,
}

/// Optional per-epoch evaluations recorded into the history.
#[derive(Default, Clone, Copy)]
pub struct EvalHooks<'a> {
    pub clean: Option<&'a Dataset>,
    pub triggered: Option<(&'a [Tensor], usize)>,
}

/// History rows as CSV (`epoch,loss,clean_acc,asr`; absent columns empty).
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,loss,clean_acc,asr\n");
    for row in history {
        let _ = writeln!(
            out,
            "{},{:.6},{},{}",
            row.epoch,
            row.loss,
            row.clean_acc.map(|v| format!("{v:.6}")).unwrap_or_default(),
            row.asr.map(|v| format!("{v:.6}")).unwrap_or_default(),
        );
    }
    out
}

/// Mini-batch SGD with momentum and stepwise lr decay. Deterministic given
/// the config seed: batch order is seeded and batch gradients are reduced in
/// index order regardless of thread scheduling.
pub fn train(model: &Model, ds: &Dataset, cfg: &TrainConfig) -> Result<(Model, Vec<EpochStats>)> {
    train_with_eval(model, ds, cfg, EvalHooks::default())
}

pub fn train_with_eval(
    model: &Model,
    ds: &Dataset,
    cfg: &TrainConfig,
    hooks: EvalHooks<'_>,
) -> Result<(Model, Vec<EpochStats>)> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(RectError::EmptyInput("training dataset is empty".into()));
    }
    let mut trained = model.clone();
    run_sgd(&mut trained, ds, cfg, hooks, None)
        .map(|history| (trained, history))
}

/// Retrain only the last convolutional layer on the cleansed samples (the
/// clean side of each pair, with its true label). Every other parameter is
/// left bit-identical.
pub fn fine_tune_last(model: &Model, cleansed: &[SamplePair], cfg: &TrainConfig) -> Result<Model> {
    cfg.validate()?;
    if cleansed.is_empty() {
        return Err(RectError::EmptyInput("fine_tune_last needs samples".into()));
    }
    let target_layer = model.last_conv_layer().ok_or_else(|| {
        RectError::InvalidArgument("model has no convolutional layer to fine-tune".into())
    })?;
    let ds = Dataset {
        images: cleansed.iter().map(|p| p.clean.clone()).collect(),
        labels: cleansed.iter().map(|p| p.label).collect(),
        classes: model.class_count(),
        split: crate::data::Split::Train,
        seed: cfg.seed,
    };
    let mut tuned = model.clone();
    run_sgd(&mut tuned, &ds, cfg, EvalHooks::default(), Some(target_layer))?;
    Ok(tuned)
}

/// The shared loop. `only_layer` restricts parameter updates to one layer.
fn run_sgd(
    model: &mut Model,
    ds: &Dataset,
    cfg: &TrainConfig,
    hooks: EvalHooks<'_>,
    only_layer: Option<usize>,
) -> Result<Vec<EpochStats>> {
    let mut rng = rng::rng_for(cfg.seed, "train");
    let mut velocity: BTreeMap<usize, ParamGrad> = BTreeMap::new();
    for (slot, layer) in model.layers().iter().enumerate() {
        if layer.kind.has_params() && only_layer.map_or(true, |l| l == slot) {
            velocity.insert(
                slot,
                ParamGrad {
                    weight: vec![0.0; layer.weight.as_ref().unwrap().numel()],
                    bias: vec![0.0; layer.bias.as_ref().unwrap().numel()],
                },
            );
        }
    }

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut last_finite_loss = f64::NAN;
    let mut indices: Vec<usize> = (0..ds.len()).collect();

    for epoch in 0..cfg.epochs {
        let decay_steps = cfg.milestones.iter().filter(|&&m| m <= epoch).count();
        let lr = cfg.lr * cfg.decay.powi(decay_steps as i32);
        indices.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for batch in indices.chunks(cfg.batch_size) {
            // Per-sample losses and gradients, reduced in index order.
            let results: Result<Vec<(f64, BTreeMap<usize, ParamGrad>)>> = batch
                .par_iter()
                .map(|&i| {
                    let (mut tape, ids) = model.forward_traced(&ds.images[i])?;
                    let loss = tape.softmax_cross_entropy(*ids.last().unwrap(), ds.labels[i])?;
                    let loss_val = tape.value(loss).item();
                    let grads = tape.backward(loss)?;
                    Ok((loss_val, grads.into_param_grads()))
                })
                .collect();
            let results = results?;

            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            let mut batch_grads: BTreeMap<usize, ParamGrad> = BTreeMap::new();
            for (loss_val, grads) in results {
                batch_loss += loss_val * scale;
                for (slot, g) in grads {
                    match batch_grads.get_mut(&slot) {
                        Some(acc) => {
                            for (a, b) in acc.weight.iter_mut().zip(&g.weight) {
                                *a += b * scale;
                            }
                            for (a, b) in acc.bias.iter_mut().zip(&g.bias) {
                                *a += b * scale;
                            }
                        }
                        None => {
                            let mut g = g;
                            for v in g.weight.iter_mut().chain(g.bias.iter_mut()) {
                                *v *= scale;
                            }
                            batch_grads.insert(slot, g);
                        }
                    }
                }
            }

            if !batch_loss.is_finite() {
                return Err(RectError::TrainDiverged {
                    epoch,
                    last_loss: last_finite_loss,
                });
            }
            last_finite_loss = batch_loss;
            epoch_loss += batch_loss * batch.len() as f64;

            for (slot, v) in velocity.iter_mut() {
                let Some(g) = batch_grads.get(slot) else {
                    continue;
                };
                let layer = model.layer_mut(*slot)?;
                let w = layer.weight.as_mut().unwrap().data_mut();
                for ((vi, gi), wi) in v.weight.iter_mut().zip(&g.weight).zip(w) {
                    *vi = cfg.momentum * *vi + gi;
                    *wi -= lr * *vi;
                }
                let b = layer.bias.as_mut().unwrap().data_mut();
                for ((vi, gi), bi) in v.bias.iter_mut().zip(&g.bias).zip(b) {
                    *vi = cfg.momentum * *vi + gi;
                    *bi -= lr * *vi;
                }
            }
        }

        let clean_acc = match hooks.clean {
            Some(eval) => Some(metrics::overall_accuracy(model, eval)?),
            None => None,
        };
        let asr = match hooks.triggered {
            Some((set, target)) => Some(metrics::attack_success_rate(model, set, target)?),
            None => None,
        };
        history.push(EpochStats {
            epoch,
            loss: epoch_loss / ds.len() as f64,
            clean_acc,
            asr,
        });
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, Split};
    use crate::layers::Layer;

    fn toy_linear_dataset() -> Dataset {
        // Two linearly separable blobs in pixel space.
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let hot = 0.8 + (i % 5) as f64 * 0.04;
            let cold = 0.1 + (i % 5) as f64 * 0.02;
            let (a, b, label) = if i % 2 == 0 { (hot, cold, 0) } else { (cold, hot, 1) };
            images.push(Tensor::new(vec![1, 2, 2], vec![a, a, b, b]).unwrap());
            labels.push(label);
        }
        Dataset {
            images,
            labels,
            classes: 2,
            split: Split::Train,
            seed: 0,
        }
    }

    fn toy_model() -> Model {
        let mut m = Model::new(
            vec![Layer::flatten(), Layer::dense(4, 2)],
            vec![1, 2, 2],
            2,
        )
        .unwrap();
        let mut rng = rng::rng_for(1, "toy-init");
        m.init_params(&mut rng);
        m
    }

    #[test]
    fn zero_epochs_leaves_parameters_unchanged() {
        let model = toy_model();
        let ds = toy_linear_dataset();
        let cfg = TrainConfig {
            epochs: 0,
            milestones: vec![],
            ..TrainConfig::default()
        };
        let (trained, history) = train(&model, &ds, &cfg).unwrap();
        assert!(history.is_empty());
        assert_eq!(trained, model);
    }

    #[test]
    fn separable_toy_set_is_learned() {
        let model = toy_model();
        let ds = toy_linear_dataset();
        let cfg = TrainConfig {
            lr: 0.5,
            epochs: 20,
            batch_size: 8,
            milestones: vec![],
            ..TrainConfig::default()
        };
        let (trained, history) = train(&model, &ds, &cfg).unwrap();
        let acc = metrics::overall_accuracy(&trained, &ds).unwrap();
        assert!(acc >= 0.99, "train accuracy {acc}");
        assert!(history.iter().all(|h| h.loss.is_finite()));
        assert!(history.last().unwrap().loss < history[0].loss);
    }

    #[test]
    fn training_is_reproducible() {
        let model = toy_model();
        let ds = toy_linear_dataset();
        let cfg = TrainConfig {
            lr: 0.2,
            epochs: 5,
            batch_size: 4,
            milestones: vec![2, 4],
            ..TrainConfig::default()
        };
        let (a, ha) = train(&model, &ds, &cfg).unwrap();
        let (b, hb) = train(&model, &ds, &cfg).unwrap();
        assert_eq!(a, b, "identical config must give identical parameters");
        for (x, y) in ha.iter().zip(&hb) {
            assert_eq!(x.loss, y.loss);
        }
    }

    #[test]
    fn milestone_validation() {
        let cfg = TrainConfig {
            milestones: vec![3, 3],
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            epochs: 5,
            milestones: vec![7],
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fine_tune_touches_only_last_conv() {
        let ds = generate(3, 4, 4, 16, 16, Split::Train).unwrap();
        let mut model = Model::small_cnn(16, 16, 4).unwrap();
        let mut rng = rng::rng_for(2, "ft-init");
        model.init_params(&mut rng);
        let pairs: Vec<SamplePair> = ds
            .images
            .iter()
            .zip(&ds.labels)
            .take(4)
            .map(|(img, &label)| SamplePair {
                clean: img.clone(),
                corrupted: img.clone(),
                label,
                target_label: None,
                region: Tensor::zeros(img.shape().to_vec()),
            })
            .collect();
        let cfg = TrainConfig {
            lr: 0.01,
            epochs: 2,
            batch_size: 2,
            milestones: vec![],
            ..TrainConfig::default()
        };
        let tuned = fine_tune_last(&model, &pairs, &cfg).unwrap();
        let last_conv = model.last_conv_layer().unwrap();
        for (slot, (orig, new)) in model.layers().iter().zip(tuned.layers()).enumerate() {
            if slot == last_conv {
                assert_ne!(orig.weight, new.weight, "fine-tuned layer should change");
            } else {
                assert_eq!(orig, new, "layer {slot} must stay bit-identical");
            }
        }

        // Zero epochs: unchanged model.
        let cfg0 = TrainConfig {
            epochs: 0,
            milestones: vec![],
            ..cfg
        };
        let same = fine_tune_last(&model, &pairs, &cfg0).unwrap();
        assert_eq!(same, model);
    }
}
