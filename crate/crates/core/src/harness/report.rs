//! Static report data: aggregate CSVs, attribute statistics, per-layer
//! alpha values, and template-set diagnostics. Chart rasterization
//! lives in the CLI; this module produces the numbers.

use super::eval::EvalSample;
use super::{io_err, HarnessError};
use crate::backbone::Backbone;
use crate::data::{compute_attributes, load_sample, DatasetManifest, LoadMode};
use crate::decoder::Decoder;
use crate::metrics::MetricReport;
use crate::prompts::{class_embeddings, hausdorff_distance, PromptTemplateSet};
use crate::recognize;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Writes one aggregate row per named report in table column order.
pub fn write_aggregate_csv(
    path: &Path,
    reports: &[(&str, &MetricReport)],
) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::Serde(e.to_string()))?;
    w.write_record(["run", "cSm", "cFbw", "cMAE", "cFb", "cEm", "cIoU", "accuracy", "samples"])
        .map_err(|e| HarnessError::Serde(e.to_string()))?;
    for (name, r) in reports {
        let m = r.aggregate.as_row();
        let mut rec = vec![name.to_string()];
        rec.extend(m.iter().map(|v| format!("{v:.6}")));
        rec.push(format!("{:.6}", r.accuracy()));
        rec.push(r.samples.to_string());
        w.write_record(&rec).map_err(|e| HarnessError::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| HarnessError::Serde(e.to_string()))?;
    Ok(())
}

/// One attribute-statistics row (per image).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttributeRow {
    pub image_id: String,
    pub class_name: String,
    pub concentration: f64,
    pub avg_color_ratio: f64,
    pub area_ratio: f64,
    pub num_parts: usize,
    pub centroid_x: f64,
    pub centroid_y: f64,
}

/// Computes attribute statistics over every record of a manifest at a
/// fixed working resolution (per-image masks and colors).
pub fn attribute_rows(
    manifest: &DatasetManifest,
    resolution: usize,
) -> Result<(Vec<AttributeRow>, Vec<String>), HarnessError> {
    let classes = manifest.record_classes();
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for r in &manifest.records {
        match load_sample(manifest, r, &classes, resolution, LoadMode::Eval, 0) {
            Ok(s) => {
                let a = compute_attributes(&s.mask, &s.image);
                rows.push(AttributeRow {
                    image_id: s.image_id,
                    class_name: r.class_name.clone(),
                    concentration: a.concentration,
                    avg_color_ratio: a.avg_color_ratio,
                    area_ratio: a.area_ratio,
                    num_parts: a.num_parts,
                    centroid_x: a.centroid.0,
                    centroid_y: a.centroid.1,
                });
            }
            Err(e) => skipped.push(e.to_string()),
        }
    }
    Ok((rows, skipped))
}

pub fn write_attribute_csv(path: &Path, rows: &[AttributeRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::Serde(e.to_string()))?;
    w.write_record([
        "image_id",
        "class",
        "concentration",
        "avg_color_ratio",
        "area_ratio",
        "num_parts",
        "centroid_x",
        "centroid_y",
    ])
    .map_err(|e| HarnessError::Serde(e.to_string()))?;
    for r in rows {
        w.write_record(&[
            r.image_id.clone(),
            r.class_name.clone(),
            format!("{:.6}", r.concentration),
            format!("{:.6}", r.avg_color_ratio),
            format!("{:.6}", r.area_ratio),
            r.num_parts.to_string(),
            format!("{:.6}", r.centroid_x),
            format!("{:.6}", r.centroid_y),
        ])
        .map_err(|e| HarnessError::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| HarnessError::Serde(e.to_string()))?;
    Ok(())
}

/// Alpha value per (structure stage, head) from a trained decoder.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AlphaChartRow {
    pub stage: usize,
    pub head: usize,
    pub alpha: f64,
}

pub fn alpha_chart_rows(decoder: &Decoder) -> Vec<AlphaChartRow> {
    decoder
        .alpha_values()
        .into_iter()
        .flat_map(|(stage, alphas)| {
            alphas
                .into_iter()
                .enumerate()
                .map(move |(head, alpha)| AlphaChartRow { stage, head, alpha })
        })
        .collect()
}

pub fn write_alpha_csv(path: &Path, rows: &[AlphaChartRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::Serde(e.to_string()))?;
    w.write_record(["stage", "head", "alpha"]).map_err(|e| HarnessError::Serde(e.to_string()))?;
    for r in rows {
        w.write_record(&[r.stage.to_string(), r.head.to_string(), format!("{:.6}", r.alpha)])
            .map_err(|e| HarnessError::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| HarnessError::Serde(e.to_string()))?;
    Ok(())
}

/// Template-set diagnostics: the embedding-set distance between the
/// seen and unseen class splits, plus (optionally) ideal-mask
/// classification accuracy over labeled samples.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PromptAnalysisRow {
    pub template_set: String,
    pub hausdorff: f64,
    pub accuracy: Option<f64>,
}

pub fn prompt_analysis(
    backbone: &dyn Backbone,
    sets: &[PromptTemplateSet],
    seen_classes: &[String],
    unseen_classes: &[String],
    labeled: Option<(&[EvalSample], &[String])>,
) -> Result<Vec<PromptAnalysisRow>, HarnessError> {
    let mut rows = Vec::new();
    for set in sets {
        let seen = class_embeddings(backbone, set, seen_classes)?;
        let unseen = class_embeddings(backbone, set, unseen_classes)?;
        let h = hausdorff_distance(seen.embeddings(), unseen.embeddings())?;
        let accuracy = match labeled {
            Some((samples, classes)) => {
                let embeds = class_embeddings(backbone, set, classes)?;
                let mut correct = 0usize;
                for s in samples {
                    let pyramid = backbone.encode_image(&s.image)?;
                    let pooled = recognize::masked_average_pool(pyramid.level(5), &s.gt_mask)?;
                    let pred = recognize::classify(backbone, &pooled, &embeds)?;
                    if pred.class_index == s.class_index {
                        correct += 1;
                    }
                }
                Some(correct as f64 / samples.len() as f64)
            }
            None => None,
        };
        rows.push(PromptAnalysisRow { template_set: set.name().to_string(), hausdorff: h, accuracy });
    }
    Ok(rows)
}

pub fn write_prompt_analysis_csv(path: &Path, rows: &[PromptAnalysisRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::Serde(e.to_string()))?;
    w.write_record(["template_set", "hausdorff", "accuracy"])
        .map_err(|e| HarnessError::Serde(e.to_string()))?;
    for r in rows {
        w.write_record(&[
            r.template_set.clone(),
            format!("{:.6}", r.hausdorff),
            r.accuracy.map(|a| format!("{a:.6}")).unwrap_or_else(|| "-".into()),
        ])
        .map_err(|e| HarnessError::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| HarnessError::Serde(e.to_string()))?;
    Ok(())
}

/// Parses the JSONL training log back into records for plotting.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub epoch: usize,
    pub l_s: Vec<f64>,
    pub l_e: Vec<Vec<f64>>,
    pub l_d: Vec<Vec<f64>>,
    pub total: f64,
}

pub fn read_train_log(path: &Path) -> Result<Vec<LogRow>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(line).map_err(|e| HarnessError::Serde(e.to_string()))?);
    }
    Ok(rows)
}
