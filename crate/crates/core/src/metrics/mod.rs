//! Class-aware segmentation metrics.
//!
//! Six base metrics (structure measure, weighted F, MAE, F, enhanced
//! alignment, IoU) are wrapped by a classification gate: a sample whose
//! predicted class is wrong scores the worst possible value (0 for
//! ascending metrics, 1 for MAE). With perfect masks every gated
//! aggregate therefore collapses to the classifier accuracy.
//!
//! Pinned conventions shared by these implementations and the
//! brute-force test oracles:
//! - binarization is `value >= threshold`; adaptive threshold is
//!   `min(2 * mean(pred), 1)`; an all-zero prediction scores 0 in the
//!   adaptive F-measure;
//! - the weighted-F distance transform breaks ties toward the smallest
//!   (row, col) in row-major order; its Gaussian diffusion is 7x7 with
//!   sigma 5, zero-padded; background attenuation is
//!   `2 - exp(ln(0.5)/5 * dist)`;
//! - the structure measure splits at the ground-truth centroid
//!   (rounded, 0-indexed, centroid pixel in the top-left block) and its
//!   block statistics use N-1 normalization;
//! - the enhanced-alignment map is averaged over all pixels.

mod base;

pub use base::{
    e_measure, f_beta, f_beta_weighted, f_beta_with, iou, iou_at, mae, s_measure, s_measure_with,
};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: pred {pred:?} vs gt {gt:?}")]
    ShapeMismatch { pred: (usize, usize), gt: (usize, usize) },
    #[error("prediction values must lie in [0, 1] (found {0})")]
    PredOutOfRange(f64),
    #[error("ground truth must be binary (found {0})")]
    GtNotBinary(f64),
    #[error("no samples to evaluate")]
    Empty,
    #[error("prediction/ground-truth ids misaligned: {0:?}")]
    IdMismatch(Vec<String>),
}

pub(crate) fn check_pair(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<(), MetricError> {
    if pred.dim() != gt.dim() {
        return Err(MetricError::ShapeMismatch { pred: pred.dim(), gt: gt.dim() });
    }
    for &v in pred.iter() {
        if !(0.0..=1.0).contains(&v) {
            return Err(MetricError::PredOutOfRange(v));
        }
    }
    for &v in gt.iter() {
        if v != 0.0 && v != 1.0 {
            return Err(MetricError::GtNotBinary(v));
        }
    }
    Ok(())
}

/// Metric direction for the classification gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateKind {
    /// Higher is better; wrong class forces 0.
    Ascending,
    /// Mean absolute error; wrong class forces 1.
    Mae,
}

/// Applies the class gate to one sample-level metric value.
pub fn gated(sample_metric: f64, class_correct: bool, kind: GateKind) -> f64 {
    if class_correct {
        sample_metric
    } else {
        match kind {
            GateKind::Ascending => 0.0,
            GateKind::Mae => 1.0,
        }
    }
}

/// The six metric values in report column order.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct SixMetrics {
    pub s_measure: f64,
    pub f_beta_w: f64,
    pub mae: f64,
    pub f_beta: f64,
    pub e_measure: f64,
    pub iou: f64,
}

impl SixMetrics {
    /// Column order used by comparison tables.
    pub const HEADER: [&'static str; 6] = ["cSm", "cFbw", "cMAE", "cFb", "cEm", "cIoU"];

    pub fn as_row(&self) -> [f64; 6] {
        [self.s_measure, self.f_beta_w, self.mae, self.f_beta, self.e_measure, self.iou]
    }

    pub fn from_row(row: [f64; 6]) -> Self {
        Self {
            s_measure: row[0],
            f_beta_w: row[1],
            mae: row[2],
            f_beta: row[3],
            e_measure: row[4],
            iou: row[5],
        }
    }

    fn gate(&self, correct: bool) -> Self {
        Self {
            s_measure: gated(self.s_measure, correct, GateKind::Ascending),
            f_beta_w: gated(self.f_beta_w, correct, GateKind::Ascending),
            mae: gated(self.mae, correct, GateKind::Mae),
            f_beta: gated(self.f_beta, correct, GateKind::Ascending),
            e_measure: gated(self.e_measure, correct, GateKind::Ascending),
            iou: gated(self.iou, correct, GateKind::Ascending),
        }
    }
}

/// One prediction entering evaluation.
#[derive(Clone, Debug)]
pub struct PredictionRecord {
    pub image_id: String,
    pub seg_prob: Array2<f64>,
    pub class_index: usize,
    pub degenerate: bool,
}

/// Ground truth for one sample.
#[derive(Clone, Debug)]
pub struct GroundTruthRecord {
    pub image_id: String,
    pub mask: Array2<f64>,
    pub class_index: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerSampleMetrics {
    pub image_id: String,
    pub class_correct: bool,
    pub degenerate: bool,
    pub base: SixMetrics,
    pub gated: SixMetrics,
}

/// Per-sample and aggregate class-aware metric values.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_sample: Vec<PerSampleMetrics>,
    /// Arithmetic means of the per-sample gated values.
    pub aggregate: SixMetrics,
    pub samples: usize,
    pub correct: usize,
}

impl MetricReport {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.samples as f64
    }
}

/// Evaluation thresholds (config overrides of the pinned defaults).
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricConfig {
    pub iou_threshold: f64,
    pub f_beta_sq: f64,
    pub s_measure_alpha: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { iou_threshold: 0.5, f_beta_sq: 0.3, s_measure_alpha: 0.5 }
    }
}

/// Computes the six base metrics for one prediction/ground-truth pair.
pub fn six_base_metrics(
    pred: &Array2<f64>,
    gt: &Array2<f64>,
    cfg: &MetricConfig,
) -> Result<SixMetrics, MetricError> {
    Ok(SixMetrics {
        s_measure: s_measure_with(pred, gt, cfg.s_measure_alpha)?,
        f_beta_w: f_beta_weighted(pred, gt)?,
        mae: mae(pred, gt)?,
        f_beta: f_beta_with(pred, gt, cfg.f_beta_sq)?,
        e_measure: e_measure(pred, gt)?,
        iou: iou_at(pred, gt, cfg.iou_threshold)?,
    })
}

/// Full evaluation: per-sample base metrics, the classification gate,
/// and arithmetic-mean aggregation.
pub fn evaluate(
    predictions: &[PredictionRecord],
    gts: &[GroundTruthRecord],
) -> Result<MetricReport, MetricError> {
    evaluate_with(predictions, gts, &MetricConfig::default())
}

pub fn evaluate_with(
    predictions: &[PredictionRecord],
    gts: &[GroundTruthRecord],
    cfg: &MetricConfig,
) -> Result<MetricReport, MetricError> {
    if predictions.is_empty() || gts.is_empty() {
        return Err(MetricError::Empty);
    }
    if predictions.len() != gts.len() {
        return Err(MetricError::IdMismatch(vec![format!(
            "{} predictions vs {} ground truths",
            predictions.len(),
            gts.len()
        )]));
    }
    let offenders: Vec<String> = predictions
        .iter()
        .zip(gts)
        .filter(|(p, g)| p.image_id != g.image_id)
        .map(|(p, g)| format!("{} vs {}", p.image_id, g.image_id))
        .collect();
    if !offenders.is_empty() {
        return Err(MetricError::IdMismatch(offenders));
    }

    let mut per_sample = Vec::with_capacity(predictions.len());
    let mut sums = [0.0f64; 6];
    let mut correct_count = 0usize;
    for (p, g) in predictions.iter().zip(gts) {
        let base = six_base_metrics(&p.seg_prob, &g.mask, cfg)?;
        let class_correct = p.class_index == g.class_index;
        if class_correct {
            correct_count += 1;
        }
        let gated_m = base.gate(class_correct);
        for (s, v) in sums.iter_mut().zip(gated_m.as_row()) {
            *s += v;
        }
        per_sample.push(PerSampleMetrics {
            image_id: p.image_id.clone(),
            class_correct,
            degenerate: p.degenerate,
            base,
            gated: gated_m,
        });
    }
    let n = predictions.len() as f64;
    let aggregate = SixMetrics::from_row([
        sums[0] / n,
        sums[1] / n,
        sums[2] / n,
        sums[3] / n,
        sums[4] / n,
        sums[5] / n,
    ]);
    Ok(MetricReport { per_sample, aggregate, samples: predictions.len(), correct: correct_count })
}
