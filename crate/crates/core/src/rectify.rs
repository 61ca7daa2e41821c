//! The dynamic budgeted rectification loop: locate a suspect layer, edit it,
//! evaluate the candidate against the accuracy budget, accept or roll back,
//! repeat until the prediction gap closes.

use std::fmt::Write as _;

use crate::attrib::{HeadSpec, RemapMode};
use crate::data::SamplePair;
use crate::editor::{rank_one_edit, EditConfig};
use crate::error::{RectError, Result};
use crate::locate::{locate, per_layer_stats, score_layers};
use crate::metrics;
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct RectifyBudget {
    /// Maximum tolerated drop of the evaluation metric (accuracy fraction),
    /// measured cumulatively against the original model.
    pub epsilon: f64,
    /// Target prediction gap.
    pub delta: f64,
    /// Inner edit epochs per round.
    pub inner_epochs: usize,
    /// Hard cap on rounds.
    pub max_rounds: usize,
}

impl Default for RectifyBudget {
    fn default() -> Self {
        RectifyBudget {
            epsilon: 0.03,
            delta: 0.1,
            inner_epochs: 200,
            max_rounds: 8,
        }
    }
}

impl RectifyBudget {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 || self.delta < 0.0 {
            return Err(RectError::InvalidArgument(
                "rectify budget and gap must be non-negative".into(),
            ));
        }
        if self.inner_epochs == 0 || self.max_rounds == 0 {
            return Err(RectError::InvalidArgument(
                "inner epochs and max rounds must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Which layer each round edits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelection {
    /// Re-localize the suspect layer every round.
    Dynamic,
    /// Always edit the last editable layer.
    Static,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    GapMet,
    BudgetExceeded,
    RoundsExhausted,
    /// A round's edit failed to decrease its value loss.
    EditFailed,
    /// The candidate fit the budget but no longer improved the gap.
    Stalled,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub layer: usize,
    /// Prediction gap of the candidate model.
    pub delta_star: f64,
    /// Accuracy drop of the candidate vs. the original model.
    pub epsilon_star: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct RectifyReport {
    pub mode: LayerSelection,
    pub rounds: Vec<RoundRecord>,
    pub termination: Termination,
    pub initial_delta: f64,
    pub final_delta: f64,
    /// Accuracy drop of the returned model vs. the original.
    pub final_epsilon: f64,
    pub model_digest: String,
}

impl RectifyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn rounds_csv(&self) -> String {
        let mut out = String::from("round,layer,delta_star,epsilon_star,accepted\n");
        for r in &self.rounds {
            let _ = writeln!(
                out,
                "{},{},{:.9},{:.9},{}",
                r.round, r.layer, r.delta_star, r.epsilon_star, r.accepted
            );
        }
        out
    }
}

/// Which of the pairs' own samples join the reference population when the
/// loop builds per-layer key statistics. Including them realizes the
/// rectifiability property (the new key lies in the span of C).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsAugment {
    ReferenceOnly,
    Corrupted,
    CleanAndCorrupted,
}

/// Everything the loop needs besides the model and budget.
pub struct RectifyContext<'a> {
    /// Clean/corrupted pairs driving the edit.
    pub pairs: &'a [SamplePair],
    /// Clean labeled evaluation set for the accuracy budget.
    pub eval_images: &'a [Tensor],
    pub eval_labels: &'a [usize],
    /// Clean reference samples for per-layer key statistics.
    pub reference: &'a [Tensor],
    pub edit_cfg: EditConfig,
    /// IG steps used for localization.
    pub score_steps: usize,
    pub remap_mode: RemapMode,
    pub stats_augment: StatsAugment,
}

/// Mean absolute head gap between corrupted and clean predictions under
/// per-pair heads frozen at loop start.
fn prediction_gap(model: &Model, pairs: &[SamplePair], heads: &[HeadSpec]) -> Result<f64> {
    let mut total = 0.0;
    for (pair, head) in pairs.iter().zip(heads) {
        let h_clean = head.eval(model.forward(&pair.clean)?.data());
        let h_corr = head.eval(model.forward(&pair.corrupted)?.data());
        total += (h_corr - h_clean).abs();
    }
    Ok(total / pairs.len() as f64)
}

/// Dynamic rectification (Algorithm: locate, edit, evaluate, accept or roll
/// back). The returned model never degrades accuracy by more than the budget.
pub fn rectify(
    model: &Model,
    ctx: &RectifyContext<'_>,
    budget: &RectifyBudget,
) -> Result<(Model, RectifyReport)> {
    rectify_with_selection(model, ctx, budget, LayerSelection::Dynamic)
}

/// Static rectification: the last editable layer is edited every round.
pub fn static_rectify(
    model: &Model,
    ctx: &RectifyContext<'_>,
    budget: &RectifyBudget,
) -> Result<(Model, RectifyReport)> {
    rectify_with_selection(model, ctx, budget, LayerSelection::Static)
}

pub fn rectify_with_selection(
    model: &Model,
    ctx: &RectifyContext<'_>,
    budget: &RectifyBudget,
    mode: LayerSelection,
) -> Result<(Model, RectifyReport)> {
    budget.validate()?;
    if ctx.pairs.is_empty() {
        return Err(RectError::EmptyInput("rectify needs pairs".into()));
    }
    if ctx.eval_images.is_empty() {
        return Err(RectError::EmptyInput("rectify needs an evaluation set".into()));
    }

    // Heads are frozen against the starting model so the gap is comparable
    // across rounds.
    let heads: Vec<HeadSpec> = ctx
        .pairs
        .iter()
        .map(|p| HeadSpec::for_pair(model, p))
        .collect::<Result<_>>()?;

    let zeta_original = metrics::set_accuracy(model, ctx.eval_images, ctx.eval_labels)?;
    let initial_delta = prediction_gap(model, ctx.pairs, &heads)?;

    // Key statistics cover the reference population, optionally plus the
    // pairs' own samples, so the new keys lie in the span of C and the edit
    // direction decorrelates from the pair's clean pathway (the
    // rectifiability property of the susceptible-model setting).
    let mut stat_samples: Vec<Tensor> = ctx.reference.to_vec();
    for p in ctx.pairs {
        match ctx.stats_augment {
            StatsAugment::ReferenceOnly => {}
            StatsAugment::Corrupted => stat_samples.push(p.corrupted.clone()),
            StatsAugment::CleanAndCorrupted => {
                stat_samples.push(p.clean.clone());
                stat_samples.push(p.corrupted.clone());
            }
        }
    }

    let mut current = model.clone();
    let mut current_delta = initial_delta;
    let mut current_epsilon = 0.0;
    let mut rounds: Vec<RoundRecord> = Vec::new();
    let mut termination = None;

    let edit_cfg = EditConfig {
        inner_epochs: budget.inner_epochs,
        ..ctx.edit_cfg
    };

    while current_delta > budget.delta {
        if rounds.len() >= budget.max_rounds {
            termination = Some(Termination::RoundsExhausted);
            break;
        }
        let round_no = rounds.len() + 1;

        // Locate the layer to edit on the *current* model (the dynamic
        // setting recomputes statistics every round since edits shift
        // upstream features).
        let stats = match mode {
            LayerSelection::Dynamic => {
                per_layer_stats(&current, &stat_samples, edit_cfg.ridge_factor)?
            }
            LayerSelection::Static => {
                let last = current.last_editable_layer();
                let mut only = std::collections::BTreeMap::new();
                let keys = crate::editor::collect_keys(&current, last, &stat_samples)?;
                let lambda = (edit_cfg.ridge_factor * keys.sum_squares()
                    / keys.key_dim() as f64)
                    .max(1e-12);
                only.insert(last, crate::editor::key_stats(&keys, lambda)?);
                only
            }
        };
        let layer = match mode {
            LayerSelection::Dynamic => {
                let scores =
                    score_layers(&current, ctx.pairs, &stats, ctx.remap_mode, ctx.score_steps)?;
                locate(&scores)?
            }
            LayerSelection::Static => current.last_editable_layer(),
        };

        let candidate = match rank_one_edit(&current, layer, ctx.pairs, &stats[&layer], &edit_cfg)
        {
            Ok(outcome) => outcome.model,
            Err(RectError::EditFailed { .. }) => {
                termination = Some(Termination::EditFailed);
                break;
            }
            Err(other) => return Err(other),
        };

        let zeta_candidate = metrics::set_accuracy(&candidate, ctx.eval_images, ctx.eval_labels)?;
        let epsilon_star = zeta_original - zeta_candidate;
        let delta_star = prediction_gap(&candidate, ctx.pairs, &heads)?;

        if epsilon_star > budget.epsilon {
            // Candidate rejected: the pre-round model is returned.
            rounds.push(RoundRecord {
                round: round_no,
                layer,
                delta_star,
                epsilon_star,
                accepted: false,
            });
            termination = Some(Termination::BudgetExceeded);
            break;
        }
        if delta_star > current_delta {
            // Within budget but no longer closing the gap; a repeat round
            // would recompute the identical candidate.
            rounds.push(RoundRecord {
                round: round_no,
                layer,
                delta_star,
                epsilon_star,
                accepted: false,
            });
            termination = Some(Termination::Stalled);
            break;
        }

        rounds.push(RoundRecord {
            round: round_no,
            layer,
            delta_star,
            epsilon_star,
            accepted: true,
        });
        current = candidate;
        current_delta = delta_star;
        current_epsilon = epsilon_star;
    }

    let termination = termination.unwrap_or(Termination::GapMet);

    // Hard budget invariant: the returned model is either the original or an
    // accepted candidate, so its measured drop never exceeds epsilon.
    debug_assert!(current_epsilon <= budget.epsilon + 1e-12);

    let report = RectifyReport {
        mode,
        rounds,
        termination,
        initial_delta,
        final_delta: current_delta,
        final_epsilon: current_epsilon,
        model_digest: current.param_digest(),
    };
    Ok((current, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Layer;
    use crate::rng::rng_for;
    use rand::Rng;

    fn tiny_model(seed: u64) -> Model {
        let mut m = Model::new(
            vec![
                Layer::conv2d(1, 4, 3, 1, 1),
                Layer::relu(),
                Layer::flatten(),
                Layer::dense(4 * 16 * 16, 4),
            ],
            vec![1, 16, 16],
            4,
        )
        .unwrap();
        let mut rng = rng_for(seed, "rect-test");
        m.init_params(&mut rng);
        m
    }

    fn random_images(count: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = rng_for(seed, "rect-imgs");
        (0..count)
            .map(|_| {
                Tensor::new(
                    vec![1, 16, 16],
                    (0..256).map(|_| rng.gen_range(0.0..1.0)).collect(),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn compliant_model_returns_unchanged_with_zero_rounds() {
        let model = tiny_model(1);
        let imgs = random_images(8, 2);
        let labels = vec![0usize, 1, 2, 3, 0, 1, 2, 3];
        let x = imgs[0].clone();
        // Identical pair: the gap is exactly zero.
        let pair = SamplePair {
            clean: x.clone(),
            corrupted: x.clone(),
            label: 0,
            target_label: None,
            region: Tensor::zeros(x.shape().to_vec()),
        };
        let ctx = RectifyContext {
            pairs: &[pair],
            eval_images: &imgs,
            eval_labels: &labels,
            reference: &imgs,
            edit_cfg: EditConfig::default(),
            score_steps: 2,
            remap_mode: RemapMode::DirectionOuter,
            stats_augment: StatsAugment::CleanAndCorrupted,
        };
        let (out, report) = rectify(&model, &ctx, &RectifyBudget::default()).unwrap();
        assert_eq!(out, model, "compliant model must come back bit-identical");
        assert!(report.rounds.is_empty());
        assert!(matches!(report.termination, Termination::GapMet));
        assert_eq!(report.final_epsilon, 0.0);
    }

    #[test]
    fn zero_budget_rejects_any_lossy_candidate() {
        let model = tiny_model(3);
        let imgs = random_images(12, 4);
        // Labels chosen as the model's own predictions so accuracy starts at
        // 1.0 and any change can only lower it.
        let labels: Vec<usize> = imgs
            .iter()
            .map(|x| model.predict_class(x).unwrap())
            .collect();
        let clean = imgs[0].clone();
        let mut corrupted = clean.clone();
        for v in corrupted.data_mut().iter_mut().take(64) {
            *v = 1.0 - *v;
        }
        let label = model.predict_class(&clean).unwrap();
        let pair = SamplePair {
            region: Tensor::zeros(clean.shape().to_vec()),
            clean,
            corrupted,
            label,
            target_label: None,
        };
        let ctx = RectifyContext {
            pairs: &[pair],
            eval_images: &imgs,
            eval_labels: &labels,
            reference: &imgs,
            edit_cfg: EditConfig {
                lr: 0.05,
                ..EditConfig::default()
            },
            score_steps: 2,
            remap_mode: RemapMode::DirectionOuter,
            stats_augment: StatsAugment::CleanAndCorrupted,
        };
        let budget = RectifyBudget {
            epsilon: 0.0,
            delta: 1e-9,
            inner_epochs: 300,
            max_rounds: 3,
        };
        let (out, report) = rectify(&model, &ctx, &budget).unwrap();
        // Either the first candidate broke accuracy (budget-exceeded, model
        // returned unchanged) or every accepted round kept accuracy intact.
        if matches!(report.termination, Termination::BudgetExceeded) {
            let accepted = report.rounds.iter().filter(|r| r.accepted).count();
            if accepted == 0 {
                assert_eq!(out, model);
            }
        }
        let acc_out =
            metrics::set_accuracy(&out, &ctx.eval_images, &ctx.eval_labels).unwrap();
        assert!(acc_out >= 1.0 - 1e-12, "budget epsilon=0 violated: {acc_out}");
    }

    #[test]
    fn accepted_delta_sequence_is_monotone() {
        // Run a real (small) rectification and check the acceptance record.
        let model = tiny_model(5);
        let imgs = random_images(10, 6);
        let labels: Vec<usize> = imgs
            .iter()
            .map(|x| model.predict_class(x).unwrap())
            .collect();
        let clean = imgs[1].clone();
        let mut corrupted = clean.clone();
        for v in corrupted.data_mut().iter_mut().skip(128).take(64) {
            *v = (*v + 0.8).min(1.0);
        }
        let label = model.predict_class(&clean).unwrap();
        let pair = SamplePair {
            region: Tensor::zeros(clean.shape().to_vec()),
            clean,
            corrupted,
            label,
            target_label: None,
        };
        let ctx = RectifyContext {
            pairs: &[pair],
            eval_images: &imgs,
            eval_labels: &labels,
            reference: &imgs,
            edit_cfg: EditConfig {
                lr: 0.02,
                ..EditConfig::default()
            },
            score_steps: 2,
            remap_mode: RemapMode::DirectionOuter,
            stats_augment: StatsAugment::CleanAndCorrupted,
        };
        let budget = RectifyBudget {
            epsilon: 0.5,
            delta: 0.01,
            inner_epochs: 200,
            max_rounds: 5,
        };
        let (_, report) = rectify(&model, &ctx, &budget).unwrap();
        let accepted: Vec<f64> = report
            .rounds
            .iter()
            .filter(|r| r.accepted)
            .map(|r| r.delta_star)
            .collect();
        for w in accepted.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "accepted deltas increased: {accepted:?}");
        }
        assert!(report.rounds.len() <= budget.max_rounds);
    }

    #[test]
    fn static_selection_edits_last_layer_every_round() {
        let model = tiny_model(7);
        let imgs = random_images(8, 8);
        let labels: Vec<usize> = imgs
            .iter()
            .map(|x| model.predict_class(x).unwrap())
            .collect();
        let clean = imgs[2].clone();
        let mut corrupted = clean.clone();
        for v in corrupted.data_mut().iter_mut().take(32) {
            *v = 1.0;
        }
        let label = model.predict_class(&clean).unwrap();
        let pair = SamplePair {
            region: Tensor::zeros(clean.shape().to_vec()),
            clean,
            corrupted,
            label,
            target_label: None,
        };
        let ctx = RectifyContext {
            pairs: &[pair],
            eval_images: &imgs,
            eval_labels: &labels,
            reference: &imgs,
            edit_cfg: EditConfig {
                lr: 0.02,
                ..EditConfig::default()
            },
            score_steps: 2,
            remap_mode: RemapMode::DirectionOuter,
            stats_augment: StatsAugment::CleanAndCorrupted,
        };
        let budget = RectifyBudget {
            epsilon: 0.5,
            delta: 0.001,
            inner_epochs: 100,
            max_rounds: 4,
        };
        let (_, report) = static_rectify(&model, &ctx, &budget).unwrap();
        let last = model.last_editable_layer();
        for r in &report.rounds {
            assert_eq!(r.layer, last, "static mode must always pick the last layer");
        }
    }
}
