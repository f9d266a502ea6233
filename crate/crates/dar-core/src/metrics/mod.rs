//! Quantitative diagnostics: group accuracies, interventional core-effect
//! percentages, activation and GradCAM mass ratios, histograms, exports.
//!
//! All metric arithmetic runs in f64 regardless of the model's element type,
//! and example-level work parallelizes with a fixed-order final reduction, so
//! results are bitwise reproducible.

pub mod cam;
pub mod cep;
pub mod export;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, DominoExample};
use crate::model::{self, ModelConfig, ModelError};
use crate::par;
use crate::tensor::{ParamSet, Tape, TensorError};

pub use cam::{cap, cgp, gradcam, gradcam_batch, CapOutcome, CgpOutcome, Heatmap};
pub use cep::{cep, cep_report, CepOutcome, CepReport, ElementEffect, InterventionCfg, PredictionSpace};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("contract: {0}")]
    Contract(String),
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Batch size used for evaluation forward passes.
pub const EVAL_BATCH: usize = 64;

/// Argmax with first-index tie-breaking.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class ids for a split, evaluated in deterministic batches.
pub fn predict(
    cfg: &ModelConfig,
    params: &ParamSet<f32>,
    examples: &[DominoExample],
) -> Result<Vec<usize>, MetricError> {
    let chunks: Vec<&[DominoExample]> = examples.chunks(EVAL_BATCH).collect();
    let results = par::map_indexed(chunks.len(), |ci| -> Result<Vec<usize>, MetricError> {
        let chunk = chunks[ci];
        let mut tape: Tape<f32> = Tape::new();
        let mut frozen = params.clone();
        frozen.freeze_all();
        let bound = model::bind(&mut tape, &frozen)?;
        let imgs: Vec<&[f32]> = chunk.iter().map(|e| e.image.as_slice()).collect();
        let x = model::batch_input(&mut tape, &imgs, cfg.input)?;
        let out = model::forward(&mut tape, cfg, &bound, x)?;
        let logits = tape.data(out.logits);
        let classes = cfg.classes;
        Ok((0..chunk.len()).map(|b| argmax(&logits[b * classes..(b + 1) * classes])).collect())
    });
    let mut preds = Vec::with_capacity(examples.len());
    for r in results {
        preds.extend(r?);
    }
    Ok(preds)
}

/// Fraction of predictions equal to `target_of(example)`.
pub fn accuracy(
    examples: &[DominoExample],
    preds: &[usize],
    target_of: impl Fn(&DominoExample) -> usize,
) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let correct = examples.iter().zip(preds).filter(|(e, &p)| target_of(e) == p).count();
    correct as f64 / examples.len() as f64
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct GroupCell {
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// Per-group accuracy matrix plus the minority / majority / average summary.
/// Minority and majority are unweighted means over the off-diagonal and
/// diagonal groups; `average` is example-weighted. Empty groups are excluded
/// and reported.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub per_group: Vec<Vec<GroupCell>>,
    pub minority: f64,
    pub majority: f64,
    pub average: f64,
    pub empty_groups: Vec<(usize, usize)>,
}

pub fn group_accuracy_from_preds(
    examples: &[DominoExample],
    preds: &[usize],
    classes: usize,
) -> Result<GroupAccuracy, MetricError> {
    if examples.is_empty() {
        return Err(MetricError::Contract("empty split".into()));
    }
    let mut per_group = vec![vec![GroupCell::default(); classes]; classes];
    for (e, &p) in examples.iter().zip(preds) {
        let cell = &mut per_group[e.label][e.attribute];
        cell.count += 1;
        cell.correct += usize::from(p == e.label);
    }
    let mut empty = Vec::new();
    let (mut min_sum, mut min_n, mut maj_sum, mut maj_n) = (0.0, 0usize, 0.0, 0usize);
    let (mut total_correct, mut total) = (0usize, 0usize);
    for y in 0..classes {
        for a in 0..classes {
            let cell = &mut per_group[y][a];
            if cell.count == 0 {
                empty.push((y, a));
                continue;
            }
            cell.accuracy = 100.0 * cell.correct as f64 / cell.count as f64;
            total_correct += cell.correct;
            total += cell.count;
            if y == a {
                maj_sum += cell.accuracy;
                maj_n += 1;
            } else {
                min_sum += cell.accuracy;
                min_n += 1;
            }
        }
    }
    Ok(GroupAccuracy {
        per_group,
        minority: if min_n > 0 { min_sum / min_n as f64 } else { 0.0 },
        majority: if maj_n > 0 { maj_sum / maj_n as f64 } else { 0.0 },
        average: 100.0 * total_correct as f64 / total as f64,
        empty_groups: empty,
    })
}

/// Evaluate a model's per-group accuracy on a split.
pub fn group_accuracy(
    cfg: &ModelConfig,
    params: &ParamSet<f32>,
    examples: &[DominoExample],
) -> Result<GroupAccuracy, MetricError> {
    let preds = predict(cfg, params, examples)?;
    group_accuracy_from_preds(examples, &preds, cfg.classes)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Uniform-bin histogram over `range`; bins are right-open except the last.
pub fn histogram(values: &[f64], bins: usize, range: (f64, f64)) -> Result<Histogram, MetricError> {
    if values.is_empty() {
        return Err(MetricError::Contract("histogram of no values".into()));
    }
    if bins < 2 {
        return Err(MetricError::Contract(format!("need >= 2 bins, got {}", bins)));
    }
    let (lo, hi) = range;
    if !(hi > lo) {
        return Err(MetricError::Contract(format!("bad range [{}, {}]", lo, hi)));
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let idx = if v >= hi { bins - 1 } else { (((v - lo) / width).floor() as isize).clamp(0, bins as i64 as isize - 1) as usize };
        counts[idx] += 1;
    }
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    Ok(Histogram { edges, counts })
}
