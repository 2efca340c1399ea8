//! Training loop: forward all T iterations, the multi-task objective,
//! AdamW on the decoder parameters only, per-epoch checkpoints, and a
//! JSONL loss log. Reproducible given the seed.

use super::optim::AdamW;
use super::{io_err, HarnessError, OptimizerConfig, RunConfig};
use crate::backbone::{build_backbone, Backbone, ClassEmbeddingSet};
use crate::data::{load_manifest, load_sample, LoadMode, Split};
use crate::decoder::{empty_grad_acc, BoundParams, Decoder, ParamEntry, ParamStore};
use crate::objectives::{total_loss_traced, GroundTruth, LossBreakdown, LossConfig};
use crate::prompts::class_embeddings;
use crate::util::derived_rng;
use crate::autograd::Tape;
use ndarray::Array3;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// One fully prepared training sample.
#[derive(Clone, Debug)]
pub struct GtSample {
    pub image_id: String,
    pub image: Array3<f64>,
    pub gt: GroundTruth,
}

/// Statistics from one optimizer step.
#[derive(Clone, Debug)]
pub struct StepStats {
    pub breakdown: LossBreakdown,
}

/// Gradient-coverage audit: which parameters ever received a nonzero
/// gradient.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradAudit {
    pub all_touched: bool,
    pub untouched: Vec<String>,
}

/// Owns the decoder, optimizer state, and gradient audit across steps.
pub struct Trainer {
    pub decoder: Decoder,
    pub optimizer: AdamW,
    touched: Vec<Vec<bool>>,
    pub step_count: u64,
}

impl Trainer {
    pub fn new(decoder: Decoder, opt: &OptimizerConfig) -> Self {
        let optimizer = AdamW::new(opt, decoder.params());
        let touched =
            decoder.params().entries().iter().map(|e| vec![false; e.data.len()]).collect();
        Self { decoder, optimizer, touched, step_count: 0 }
    }

    /// Forward/backward over one batch, then one AdamW step on the mean
    /// gradients. Per-sample passes can run on worker threads; gradient
    /// reduction follows batch order, so results are reproducible.
    pub fn train_step(
        &mut self,
        backbone: &dyn Backbone,
        embeds: &ClassEmbeddingSet,
        batch: &[GtSample],
        loss_cfg: &LossConfig,
    ) -> Result<StepStats, HarnessError> {
        assert!(!batch.is_empty(), "empty batch");
        let decoder = &self.decoder;
        let projection = backbone.projection_matrix();
        let per_sample: Vec<Result<(Vec<Vec<f64>>, LossBreakdown), HarnessError>> = batch
            .par_iter()
            .map(|sample| {
                let tape = Tape::new();
                let bound = BoundParams::bind(decoder.params(), &tape, true);
                let pyramid = backbone.encode_image(&sample.image)?;
                let traces = decoder.decode_traced(&tape, &bound, &pyramid, embeds, projection)?;
                let loss = total_loss_traced(&tape, &traces, &sample.gt, loss_cfg)?;
                let breakdown = loss.breakdown(&tape);
                let grads = tape.backward(loss.total);
                let mut acc = empty_grad_acc(decoder.params());
                bound.accumulate_grads(decoder.params(), &grads, &mut acc);
                Ok((acc, breakdown))
            })
            .collect();

        let mut mean_grads = empty_grad_acc(self.decoder.params());
        let mut breakdowns = Vec::with_capacity(batch.len());
        for r in per_sample {
            let (acc, breakdown) = r?;
            for (slot, sample_grad) in mean_grads.iter_mut().zip(acc) {
                if sample_grad.is_empty() {
                    continue;
                }
                if slot.is_empty() {
                    *slot = sample_grad;
                } else {
                    for (a, g) in slot.iter_mut().zip(sample_grad) {
                        *a += g;
                    }
                }
            }
            breakdowns.push(breakdown);
        }
        let inv = 1.0 / batch.len() as f64;
        for slot in mean_grads.iter_mut() {
            for g in slot.iter_mut() {
                *g *= inv;
            }
        }
        for (mask, grad) in self.touched.iter_mut().zip(&mean_grads) {
            for (m, &g) in mask.iter_mut().zip(grad) {
                if g != 0.0 {
                    *m = true;
                }
            }
        }

        let breakdown = mean_breakdown(&breakdowns);
        if !breakdown.total.is_finite() {
            return Err(HarnessError::NanLoss { step: self.step_count, last_checkpoint: None });
        }
        self.optimizer.step(self.decoder.params_mut(), &mean_grads);
        self.step_count += 1;
        Ok(StepStats { breakdown })
    }

    pub fn grad_audit(&self) -> GradAudit {
        let mut untouched = Vec::new();
        for (entry, mask) in self.decoder.params().entries().iter().zip(&self.touched) {
            if mask.iter().any(|&t| !t) {
                untouched.push(entry.name.clone());
            }
        }
        GradAudit { all_touched: untouched.is_empty(), untouched }
    }
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len() as f64;
    let mut out = items[0].clone();
    for b in &items[1..] {
        for (a, v) in out.seg_terms.iter_mut().zip(&b.seg_terms) {
            *a += v;
        }
        for (row_a, row_b) in out.edge_terms.iter_mut().zip(&b.edge_terms) {
            for (a, v) in row_a.iter_mut().zip(row_b) {
                *a += v;
            }
        }
        for (row_a, row_b) in out.depth_terms.iter_mut().zip(&b.depth_terms) {
            for (a, v) in row_a.iter_mut().zip(row_b) {
                *a += v;
            }
        }
        out.total += b.total;
    }
    for v in out.seg_terms.iter_mut() {
        *v /= n;
    }
    for row in out.edge_terms.iter_mut().chain(out.depth_terms.iter_mut()) {
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    out.total /= n;
    out
}

/// On-disk checkpoint: flat named parameter arrays plus the config
/// snapshot and optimizer state, versioned.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: RunConfig,
    /// Next epoch index to run (epochs completed so far).
    pub epoch: usize,
    pub params: Vec<ParamEntry>,
    pub optimizer: AdamW,
}

pub fn save_checkpoint(
    path: &Path,
    config: &RunConfig,
    epoch: usize,
    trainer: &Trainer,
) -> Result<(), HarnessError> {
    let ck = Checkpoint {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: config.clone(),
        epoch,
        params: trainer.decoder.params().entries().to_vec(),
        optimizer: trainer.optimizer.clone(),
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let json = serde_json::to_string(&ck).map_err(|e| HarnessError::Serde(e.to_string()))?;
    std::fs::write(path, json).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let ck: Checkpoint =
        serde_json::from_str(&text).map_err(|e| HarnessError::Serde(e.to_string()))?;
    if ck.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(HarnessError::CheckpointVersion {
            found: ck.format_version,
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }
    Ok(ck)
}

/// Field-by-field diff of the architecture-relevant config sections; a
/// non-empty result names every mismatching field path.
pub fn config_diff(a: &RunConfig, b: &RunConfig) -> Vec<String> {
    let mut fields = Vec::new();
    let pairs = [
        ("decoder", serde_json::to_value(&a.decoder).unwrap(), serde_json::to_value(&b.decoder).unwrap()),
        ("backbone", serde_json::to_value(&a.backbone).unwrap(), serde_json::to_value(&b.backbone).unwrap()),
        ("train.resolution", serde_json::to_value(a.train.resolution).unwrap(), serde_json::to_value(b.train.resolution).unwrap()),
    ];
    for (prefix, va, vb) in pairs {
        diff_json(prefix, &va, &vb, &mut fields);
    }
    fields
}

fn diff_json(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    match (a, b) {
        (serde_json::Value::Object(ma), serde_json::Value::Object(mb)) => {
            for (k, va) in ma {
                let sub = format!("{path}.{k}");
                match mb.get(k) {
                    Some(vb) => diff_json(&sub, va, vb, out),
                    None => out.push(sub),
                }
            }
            for k in mb.keys() {
                if !ma.contains_key(k) {
                    out.push(format!("{path}.{k}"));
                }
            }
        }
        _ => {
            if a != b {
                out.push(path.to_string());
            }
        }
    }
}

/// Restores a trainer from a checkpoint, verifying that the
/// architecture-relevant sections of the current config agree.
pub fn restore_trainer(ck: Checkpoint, config: &RunConfig) -> Result<(Trainer, usize), HarnessError> {
    let mismatches = config_diff(&ck.config, config);
    if !mismatches.is_empty() {
        return Err(HarnessError::ConfigMismatch(mismatches));
    }
    let backbone_spec = build_backbone(&config.backbone)?.spec().clone();
    let mut decoder = Decoder::new(config.decoder.clone(), &backbone_spec, config.train.seed)?;
    decoder.load_params(ParamStore::from_entries(ck.params))?;
    let mut trainer = Trainer::new(decoder, &config.optimizer);
    trainer.optimizer = ck.optimizer;
    Ok((trainer, ck.epoch))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub epochs_run: usize,
    pub final_epoch_mean_loss: f64,
    pub audit: GradAudit,
    pub backbone_fingerprint_before: String,
    pub backbone_fingerprint_after: String,
    /// Sample-level errors that were skipped (image ids + messages).
    pub skipped: Vec<String>,
}

#[derive(Serialize)]
struct LogRecord<'a> {
    step: u64,
    epoch: usize,
    l_s: &'a [f64],
    l_e: &'a [Vec<f64>],
    l_d: &'a [Vec<f64>],
    total: f64,
}

/// Manifest-driven training: streams seen-class records, augments with
/// per-(seed, epoch, image) derived randomness, checkpoints each epoch.
pub fn train_run(config: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome, HarnessError> {
    config.validate()?;
    let manifest = load_manifest(&config.data.manifest, &config.data.split, config.data.check_files)?;
    let backbone = build_backbone(&config.backbone)?;
    let fingerprint_before = backbone.param_fingerprint();

    let classes = manifest.classes_for(Split::Seen);
    if classes.is_empty() {
        return Err(HarnessError::NoTrainSamples);
    }
    let template = config.template_set(&config.run.template_set)?;
    let embeds = class_embeddings(backbone.as_ref(), &template, &classes)?;

    let records: Vec<_> = manifest.records_for(Split::Seen).into_iter().cloned().collect();
    if records.is_empty() {
        return Err(HarnessError::NoTrainSamples);
    }

    let (mut trainer, start_epoch) = match resume {
        Some(path) => restore_trainer(load_checkpoint(path)?, config)?,
        None => {
            let decoder = Decoder::new(config.decoder.clone(), backbone.spec(), config.train.seed)?;
            (Trainer::new(decoder, &config.optimizer), 0)
        }
    };

    let out_dir = &config.run.out_dir;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let log_path = out_dir.join("train_log.jsonl");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(io_err(&log_path))?;

    let mut skipped = Vec::new();
    let mut last_checkpoint: Option<PathBuf> = None;
    let mut final_epoch_mean = f64::NAN;

    for epoch in start_epoch..config.train.epochs {
        // Augmentations vary across epochs through the derived seed;
        // within an epoch each sample's stream depends only on
        // (seed, epoch, image_id).
        let epoch_seed = config.train.seed ^ crate::util::fnv1a64(format!("epoch-{epoch}").as_bytes());
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.shuffle(&mut derived_rng(config.train.seed, &format!("epoch-order-{epoch}")));

        let mut epoch_losses = Vec::new();
        for chunk in order.chunks(config.train.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &ri in chunk {
                match load_sample(
                    &manifest,
                    &records[ri],
                    &classes,
                    config.train.resolution,
                    LoadMode::Train,
                    epoch_seed,
                ) {
                    Ok(s) => batch.push(GtSample {
                        image_id: s.image_id,
                        image: s.image,
                        gt: GroundTruth { mask: s.mask, edge: Some(s.edge), depth: s.depth },
                    }),
                    Err(e) => skipped.push(e.to_string()),
                }
            }
            if batch.is_empty() {
                continue;
            }
            let stats = trainer
                .train_step(backbone.as_ref(), &embeds, &batch, &config.loss)
                .map_err(|e| match e {
                    HarnessError::NanLoss { step, .. } => HarnessError::NanLoss {
                        step,
                        last_checkpoint: last_checkpoint.clone(),
                    },
                    other => other,
                })?;
            let rec = LogRecord {
                step: trainer.step_count,
                epoch,
                l_s: &stats.breakdown.seg_terms,
                l_e: &stats.breakdown.edge_terms,
                l_d: &stats.breakdown.depth_terms,
                total: stats.breakdown.total,
            };
            let line =
                serde_json::to_string(&rec).map_err(|e| HarnessError::Serde(e.to_string()))?;
            writeln!(log, "{line}").map_err(io_err(&log_path))?;
            epoch_losses.push(stats.breakdown.total);
        }
        final_epoch_mean = epoch_losses.iter().sum::<f64>() / epoch_losses.len().max(1) as f64;

        let ck_path = out_dir.join(format!("checkpoint_epoch_{epoch:04}.json"));
        save_checkpoint(&ck_path, config, epoch + 1, &trainer)?;
        let latest = out_dir.join("checkpoint_latest.json");
        std::fs::copy(&ck_path, &latest).map_err(io_err(&latest))?;
        last_checkpoint = Some(ck_path);
    }

    let fingerprint_after = backbone.param_fingerprint();
    Ok(TrainOutcome {
        checkpoint: out_dir.join("checkpoint_latest.json"),
        log: log_path,
        epochs_run: config.train.epochs - start_epoch,
        final_epoch_mean_loss: final_epoch_mean,
        audit: trainer.grad_audit(),
        backbone_fingerprint_before: fingerprint_before,
        backbone_fingerprint_after: fingerprint_after,
        skipped,
    })
}
