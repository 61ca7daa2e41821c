//! Layer editability scoring, suspect-layer selection, and the brute-force
//! per-layer-edit oracle used to validate the scores.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::attrib::{self, HeadSpec, RemapMode};
use crate::data::SamplePair;
use crate::editor::{
    aggregated_key, collect_keys, key_stats, rank_one_edit, DirectionAggregation, EditConfig,
    KeyStatistics,
};
use crate::error::{RectError, Result};
use crate::metrics;
use crate::model::Model;
use crate::tensor::Tensor;

/// Editability scores, one per editable layer.
#[derive(Debug, Clone)]
pub struct LayerScores {
    /// `(layer index, score)` in editable-layer order. Scores are finite and
    /// non-negative.
    pub scores: Vec<(usize, f64)>,
    pub pair_digest: String,
    pub mode: RemapMode,
}

impl LayerScores {
    pub fn score_of(&self, layer: usize) -> Option<f64> {
        self.scores.iter().find(|(l, _)| *l == layer).map(|(_, s)| *s)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,score\n");
        for (l, s) in &self.scores {
            let _ = writeln!(out, "{l},{s:.9}");
        }
        out
    }
}

/// Per-editable-layer key statistics on a reference sample set.
pub fn per_layer_stats(
    model: &Model,
    reference: &[Tensor],
    ridge_factor: f64,
) -> Result<BTreeMap<usize, KeyStatistics>> {
    let layers = model.editable_layers().to_vec();
    let stats: Result<Vec<(usize, KeyStatistics)>> = layers
        .par_iter()
        .map(|&l| {
            let keys = collect_keys(model, l, reference)?;
            let lambda = (ridge_factor * keys.sum_squares() / keys.key_dim() as f64).max(1e-12);
            Ok((l, key_stats(&keys, lambda)?))
        })
        .collect();
    Ok(stats?.into_iter().collect())
}

fn digest_pairs(pairs: &[SamplePair]) -> String {
    let mut hasher = Sha256::new();
    for p in pairs {
        for v in p.clean.data().iter().chain(p.corrupted.data()) {
            hasher.update(v.to_le_bytes());
        }
    }
    format!("{:x}", hasher.finalize())
}

/// Editability score of every editable layer: the Frobenius norm of the
/// layer attribution remapped into the editing direction, averaged over
/// pairs.
pub fn score_layers(
    model: &Model,
    pairs: &[SamplePair],
    per_layer_stats: &BTreeMap<usize, KeyStatistics>,
    mode: RemapMode,
    n_steps: usize,
) -> Result<LayerScores> {
    if pairs.is_empty() {
        return Err(RectError::EmptyInput("score_layers needs pairs".into()));
    }
    let layers = model.editable_layers().to_vec();
    for &l in &layers {
        if !per_layer_stats.contains_key(&l) {
            return Err(RectError::InvalidArgument(format!(
                "missing key statistics for editable layer {l}"
            )));
        }
    }

    let mut sums: Vec<f64> = vec![0.0; layers.len()];
    for pair in pairs {
        let head = HeadSpec::for_pair(model, pair)?;
        let maps = attrib::layer_ig_multi(model, &layers, pair, head, n_steps)?;
        for (slot, (&l, map)) in layers.iter().zip(&maps).enumerate() {
            let stats = &per_layer_stats[&l];
            let k_bar = aggregated_key(
                model,
                l,
                std::slice::from_ref(pair),
                DirectionAggregation::MeanKey,
            )?;
            let m_star = match mode {
                RemapMode::DirectionOuter => attrib::remap(map, stats, &k_bar, mode)?,
                RemapMode::Zca => {
                    let key_map = attrib::keyspace_attribution(model, l, pair, head, n_steps)?;
                    attrib::remap(&key_map, stats, &k_bar, mode)?
                }
            };
            let score = m_star.norm();
            if !score.is_finite() {
                return Err(RectError::NonFinite(format!("layer {l} editability score")));
            }
            sums[slot] += score / pairs.len() as f64;
        }
    }

    Ok(LayerScores {
        scores: layers.into_iter().zip(sums).collect(),
        pair_digest: digest_pairs(pairs),
        mode,
    })
}

/// The layer with the maximal score; ties break toward the deepest layer.
pub fn locate(scores: &LayerScores) -> Result<usize> {
    if scores.scores.is_empty() {
        return Err(RectError::EmptyInput("locate on empty scores".into()));
    }
    let mut best = scores.scores[0].0;
    let mut best_score = scores.scores[0].1;
    for &(l, s) in &scores.scores[1..] {
        if s >= best_score {
            best = l;
            best_score = s;
        }
    }
    Ok(best)
}

/// Ground-truth layer ranking: each editable layer is edited independently
/// from the same starting model under an identical budget, and layers are
/// ranked by measured false-confidence reduction on a held-out triggered
/// set. A layer whose edit fails ranks last, with a warning recorded.
#[derive(Debug, Clone)]
pub struct OracleRanking {
    /// `(layer, false-confidence reduction)`, best first.
    pub ranked: Vec<(usize, f64)>,
    pub warnings: Vec<String>,
}

impl OracleRanking {
    pub fn top(&self, k: usize) -> Vec<usize> {
        self.ranked.iter().take(k).map(|(l, _)| *l).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,layer,false_confidence_reduction\n");
        for (rank, (l, r)) in self.ranked.iter().enumerate() {
            let _ = writeln!(out, "{},{l},{r:.9}", rank + 1);
        }
        out
    }
}

pub fn oracle_rank(
    model: &Model,
    pairs: &[SamplePair],
    reference: &[Tensor],
    triggered: &[Tensor],
    target: usize,
    cfg: &EditConfig,
) -> Result<OracleRanking> {
    if pairs.is_empty() {
        return Err(RectError::EmptyInput("oracle_rank needs pairs".into()));
    }
    let fc_before = metrics::false_confidence(model, triggered, target)?;
    let layers = model.editable_layers().to_vec();

    // Independent single-layer edits on model copies.
    let outcomes: Vec<(usize, std::result::Result<f64, String>)> = layers
        .par_iter()
        .map(|&l| {
            let result = (|| -> Result<f64> {
                let keys = collect_keys(model, l, reference)?;
                let lambda =
                    (cfg.ridge_factor * keys.sum_squares() / keys.key_dim() as f64).max(1e-12);
                let stats = key_stats(&keys, lambda)?;
                let outcome = rank_one_edit(model, l, pairs, &stats, cfg)?;
                let fc_after = metrics::false_confidence(&outcome.model, triggered, target)?;
                Ok(fc_before - fc_after)
            })();
            (l, result.map_err(|e| e.to_string()))
        })
        .collect();

    let mut warnings = Vec::new();
    let mut ranked: Vec<(usize, f64)> = Vec::new();
    for (l, outcome) in outcomes {
        match outcome {
            Ok(reduction) => ranked.push((l, reduction)),
            Err(message) => {
                warnings.push(format!("layer {l} edit failed, ranked last: {message}"));
                ranked.push((l, f64::NEG_INFINITY));
            }
        }
    }
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(OracleRanking { ranked, warnings })
}

/// 1 when the located layer is within the oracle's top k, else 0.
pub fn recall_at_k(predicted: &LayerScores, oracle: &OracleRanking, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(RectError::InvalidArgument("recall_at_k needs k >= 1".into()));
    }
    let chosen = locate(predicted)?;
    Ok(if oracle.top(k).contains(&chosen) { 1.0 } else { 0.0 })
}

/// Fraction of models whose located layer is within the oracle top k.
pub fn recall_rate(results: &[(LayerScores, OracleRanking)], k: usize) -> Result<f64> {
    if results.is_empty() {
        return Err(RectError::EmptyInput("recall_rate on empty results".into()));
    }
    let mut total = 0.0;
    for (scores, oracle) in results {
        total += recall_at_k(scores, oracle, k)?;
    }
    Ok(total / results.len() as f64)
}
