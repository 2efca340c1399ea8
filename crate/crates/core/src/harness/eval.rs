//! Evaluation: inference over a sample stream (no depth or edge inputs
//! are consumed), per-sample prediction dumps, and the class-aware
//! metric report.

use super::train::{load_checkpoint, restore_trainer};
use super::{io_err, EvalConfig, HarnessError, RunConfig};
use crate::backbone::{build_backbone, Backbone, ClassEmbeddingSet};
use crate::data::{load_manifest, load_sample, LoadMode, Split};
use crate::decoder::Decoder;
use crate::metrics::{evaluate_with, GroundTruthRecord, MetricConfig, MetricReport, PredictionRecord};
use crate::prompts::class_embeddings;
use crate::recognize;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// One evaluation input.
#[derive(Clone, Debug)]
pub struct EvalSample {
    pub image_id: String,
    pub image: Array3<f64>,
    pub gt_mask: Array2<f64>,
    pub class_index: usize,
}

/// Per-sample prediction record written alongside the mask image.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictionDumpRecord {
    pub image_id: String,
    pub class_name: String,
    pub class_score: f64,
    pub degenerate_flag: bool,
}

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub report: MetricReport,
    pub dump: Vec<PredictionDumpRecord>,
    pub skipped: Vec<String>,
}

fn write_mask_png(path: &Path, mask: &Array2<f64>) -> Result<(), HarnessError> {
    let (h, w) = mask.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        p.0[0] = (mask[(y as usize, x as usize)].clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    img.save(path).map_err(|e| HarnessError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    })
}

/// Runs inference and metric evaluation over prepared samples. With
/// `ideal_masks` the ground-truth mask replaces the prediction (the
/// ideal-performance oracle). When `out_dir` is given, per-sample masks
/// (8-bit grayscale) and a JSONL record stream are written.
pub fn evaluate_samples(
    backbone: &dyn Backbone,
    decoder: &Decoder,
    embeds: &ClassEmbeddingSet,
    samples: &[EvalSample],
    eval_cfg: &EvalConfig,
    out_dir: Option<&Path>,
) -> Result<EvalOutput, HarnessError> {
    if samples.is_empty() {
        return Err(HarnessError::NoEvalSamples);
    }
    let projection = backbone.projection_matrix();
    let mut preds = Vec::with_capacity(samples.len());
    let mut gts = Vec::with_capacity(samples.len());
    let mut dump = Vec::with_capacity(samples.len());

    for s in samples {
        let pyramid = backbone.encode_image(&s.image)?;
        let states = decoder.decode(&pyramid, embeds, projection)?;
        let last = states.last().expect("at least one iteration");
        let seg_prob =
            if eval_cfg.ideal_masks { s.gt_mask.clone() } else { last.seg_prob.clone() };
        let mut state_for_pool = last.clone();
        state_for_pool.seg_prob = seg_prob.clone();
        let pred = recognize::predict(backbone, &state_for_pool, &pyramid, embeds)?;
        dump.push(PredictionDumpRecord {
            image_id: s.image_id.clone(),
            class_name: embeds.class_names()[pred.class_index].clone(),
            class_score: pred.class_scores[pred.class_index],
            degenerate_flag: pred.degenerate,
        });
        preds.push(PredictionRecord {
            image_id: s.image_id.clone(),
            seg_prob,
            class_index: pred.class_index,
            degenerate: pred.degenerate,
        });
        gts.push(GroundTruthRecord {
            image_id: s.image_id.clone(),
            mask: s.gt_mask.clone(),
            class_index: s.class_index,
        });
    }

    let metric_cfg = MetricConfig {
        iou_threshold: eval_cfg.iou_threshold,
        f_beta_sq: eval_cfg.f_beta_sq,
        s_measure_alpha: eval_cfg.s_measure_alpha,
    };
    let report = evaluate_with(&preds, &gts, &metric_cfg)?;

    if let Some(dir) = out_dir {
        let mask_dir = dir.join("masks");
        std::fs::create_dir_all(&mask_dir).map_err(io_err(&mask_dir))?;
        for p in &preds {
            write_mask_png(&mask_dir.join(format!("{}.png", p.image_id)), &p.seg_prob)?;
        }
        let rec_path = dir.join("predictions.jsonl");
        let mut f = std::fs::File::create(&rec_path).map_err(io_err(&rec_path))?;
        for r in &dump {
            let line = serde_json::to_string(r).map_err(|e| HarnessError::Serde(e.to_string()))?;
            writeln!(f, "{line}").map_err(io_err(&rec_path))?;
        }
        let report_path = dir.join("report.json");
        let json =
            serde_json::to_string_pretty(&report).map_err(|e| HarnessError::Serde(e.to_string()))?;
        std::fs::write(&report_path, json).map_err(io_err(&report_path))?;
        super::report::write_aggregate_csv(&dir.join("aggregates.csv"), &[("run", &report)])?;
    }

    Ok(EvalOutput { report, dump, skipped: Vec::new() })
}

/// Manifest-driven evaluation from a checkpoint. The evaluation stream
/// is the explicit eval manifest when configured, otherwise the
/// unseen-class records of the main manifest; classification runs over
/// the classes present in that stream.
pub fn evaluate_run(config: &RunConfig, checkpoint: &Path) -> Result<EvalOutput, HarnessError> {
    config.validate()?;
    let backbone = build_backbone(&config.backbone)?;
    let (trainer, _) = restore_trainer(load_checkpoint(checkpoint)?, config)?;
    let decoder = trainer.decoder;

    let (manifest, records) = match &config.data.eval_manifest {
        Some(path) => {
            let m = load_manifest(path, &config.data.split, config.data.check_files)?;
            let recs: Vec<_> = m.records.clone();
            (m, recs)
        }
        None => {
            let m = load_manifest(&config.data.manifest, &config.data.split, config.data.check_files)?;
            let recs: Vec<_> = m.records_for(Split::Unseen).into_iter().cloned().collect();
            (m, recs)
        }
    };
    if records.is_empty() {
        return Err(HarnessError::NoEvalSamples);
    }
    let classes: Vec<String> = {
        let mut set = std::collections::BTreeSet::new();
        for r in &records {
            set.insert(r.class_name.clone());
        }
        set.into_iter().collect()
    };
    let template_name =
        config.run.eval_template_set.clone().unwrap_or_else(|| config.run.template_set.clone());
    let template = config.template_set(&template_name)?;
    let embeds = class_embeddings(backbone.as_ref(), &template, &classes)?;

    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for r in &records {
        match load_sample(&manifest, r, &classes, config.train.resolution, LoadMode::Eval, config.train.seed)
        {
            Ok(s) => samples.push(EvalSample {
                image_id: s.image_id,
                image: s.image,
                gt_mask: s.mask,
                class_index: s.class_index,
            }),
            Err(e) => skipped.push(e.to_string()),
        }
    }
    if samples.is_empty() {
        return Err(HarnessError::NoEvalSamples);
    }
    let out_dir = config.run.out_dir.join("eval");
    let mut out =
        evaluate_samples(backbone.as_ref(), &decoder, &embeds, &samples, &config.eval, Some(&out_dir))?;
    out.skipped = skipped;
    Ok(out)
}
