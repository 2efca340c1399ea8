//! Iterative refinement decoder.
//!
//! A top-down pass over five pyramid stages. Every stage applies
//! semantic guidance attention (SGA): the normalized stage feature is
//! projected to Q/K/V, class text embeddings become guidance vectors,
//! and the per-pixel max of the softmax over classes forms a spatial
//! weight that modulates V before multi-head self-attention. Low stages
//! additionally run edge/depth stems whose features feed structure
//! enhancement attention (SEA), blended per head by a learnable alpha in
//! (0, 1). Iterations after the first re-enter at stage 3, re-using the
//! cached stage 4/5 computations, with a re-modulation map derived from
//! the previous segmentation, the pooled object representation and its
//! correlation against the class embeddings.

mod forward;
mod params;

pub use forward::{trainable_count_for, DecodeTrace, CUE_TEMPERATURE};
pub use params::{empty_grad_acc, BoundParams, ParamEntry, ParamStore};

use crate::backbone::BackboneSpec;
use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

pub const NUM_STAGES: usize = 5;
/// Iterations t >= 2 recompute stages at or below this entry layer.
pub const ITER_ENTRY_STAGE: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggMode {
    /// Per-pixel max over the class softmax (default).
    Max,
    /// Per-pixel mean over the class softmax (ablation).
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeFusion {
    /// Structure enhancement attention (default).
    Sea,
    /// Plain additive fusion of linearly projected stem features.
    Addition,
}

fn default_width() -> usize {
    128
}
fn default_heads() -> usize {
    8
}
fn default_iterations() -> usize {
    2
}
fn default_se_stages() -> BTreeSet<usize> {
    [1, 2, 3].into_iter().collect()
}
fn default_agg() -> AggMode {
    AggMode::Max
}
fn default_true() -> bool {
    true
}
fn default_se_fusion() -> SeFusion {
    SeFusion::Sea
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Unified decoder channel count C.
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Total number of refinement iterations T.
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Stages receiving structure enhancement (and auxiliary heads).
    #[serde(default = "default_se_stages")]
    pub se_stages: BTreeSet<usize>,
    #[serde(default = "default_agg")]
    pub agg: AggMode,
    /// Disabled: SGA degenerates to plain multi-head self-attention.
    #[serde(default = "default_true")]
    pub semantic_guidance: bool,
    /// Edge auxiliary branch.
    #[serde(default = "default_true")]
    pub edge_branch: bool,
    /// Depth auxiliary branch.
    #[serde(default = "default_true")]
    pub depth_branch: bool,
    /// Use the visual/text correlation in the top-down cue.
    #[serde(default = "default_true")]
    pub use_correlation: bool,
    /// Use the pooled object representation in the top-down cue.
    #[serde(default = "default_true")]
    pub use_object_repr: bool,
    #[serde(default = "default_se_fusion")]
    pub se_fusion: SeFusion,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            width: default_width(),
            heads: default_heads(),
            iterations: default_iterations(),
            se_stages: default_se_stages(),
            agg: default_agg(),
            semantic_guidance: true,
            edge_branch: true,
            depth_branch: true,
            use_correlation: true,
            use_object_repr: true,
            se_fusion: default_se_fusion(),
        }
    }
}

impl DecoderConfig {
    /// Small configuration for tests and CPU-scale runs.
    pub fn desk() -> Self {
        Self { width: 32, heads: 4, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.width == 0 || self.heads == 0 {
            return Err(DecodeError::InvalidConfig("width and heads must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(DecodeError::InvalidConfig(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.iterations < 1 {
            return Err(DecodeError::InvalidConfig("iterations must be >= 1".into()));
        }
        if self.se_stages.iter().any(|&s| s < 1 || s > NUM_STAGES) {
            return Err(DecodeError::InvalidConfig(format!(
                "se_stages must lie in 1..={NUM_STAGES}"
            )));
        }
        Ok(())
    }

    /// Whether any structure branch is active.
    pub fn structure_active(&self) -> bool {
        (self.edge_branch || self.depth_branch) && !self.se_stages.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid decoder config: {0}")]
    InvalidConfig(String),
    #[error("class embedding set is empty")]
    NoClasses,
    #[error("text embedding dim mismatch: expected {expected}, got {got}")]
    EmbedDimMismatch { expected: usize, got: usize },
    #[error("pyramid level {level} channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { level: usize, expected: usize, got: usize },
    #[error("spatial mismatch: {0}")]
    SpatialMismatch(String),
    #[error("numerical fault (non-finite similarity) at stage {stage}, iteration {iteration}")]
    NumericalFault { stage: usize, iteration: usize },
    #[error("stage {stage} is not a structure-enhancement stage")]
    StageNotInSe { stage: usize },
    #[error("previous state is unusable: {0}")]
    BadPrevState(String),
}

/// Per-iteration decoder outputs as plain arrays.
#[derive(Clone, Debug)]
pub struct DecodeState {
    /// 1-based iteration index t.
    pub iteration_index: usize,
    /// Stage outputs 1..5 at decoder width (index 0 = stage 1).
    pub stage_features: Vec<Array3<f64>>,
    /// Segmentation logits at stage-1 resolution.
    pub seg_logits: Array3<f64>,
    /// Segmentation probability, bilinearly resized to input resolution.
    pub seg_prob: Array2<f64>,
    pub edge_logits: BTreeMap<usize, Array2<f64>>,
    pub depth_logits: BTreeMap<usize, Array2<f64>>,
    pub edge_stem: BTreeMap<usize, Array3<f64>>,
    pub depth_stem: BTreeMap<usize, Array3<f64>>,
    /// Correlation vector that guided this iteration (t >= 2 only).
    pub correlation: Option<Array1<f64>>,
    /// Pooled object representation that guided this iteration (t >= 2).
    pub object_repr: Option<Array1<f64>>,
    /// Set when the previous mask pooled to (near) zero and guidance
    /// fell back to global average pooling.
    pub degenerate_pool: bool,
}

/// Intermediate tensors from one SGA application.
#[derive(Clone, Debug)]
pub struct GuidanceTensors {
    /// Spatial base weight, strictly positive.
    pub base_weight: Array2<f64>,
    /// Re-modulation weight, present from the second iteration on.
    pub remod_weight: Option<Array2<f64>>,
    /// Class guidance vectors (num_classes x width).
    pub class_guidance: Array2<f64>,
}

/// Outputs of one structure branch application.
#[derive(Clone, Debug)]
pub struct StructureOutputs {
    pub edge_stem: Option<Array3<f64>>,
    pub depth_stem: Option<Array3<f64>>,
    pub edge_logits: Option<Array2<f64>>,
    pub depth_logits: Option<Array2<f64>>,
}

/// Top-down cues computed from a completed iteration.
#[derive(Clone, Debug)]
pub struct TopdownGuidance {
    pub correlation: Array1<f64>,
    pub object_repr: Array1<f64>,
    /// Per-stage re-modulation maps for the stages that re-run.
    pub remod: BTreeMap<usize, Array2<f64>>,
    pub degenerate: bool,
}

pub struct Decoder {
    config: DecoderConfig,
    spec: BackboneSpec,
    params: ParamStore,
}

impl Decoder {
    pub fn new(config: DecoderConfig, spec: &BackboneSpec, seed: u64) -> Result<Self, DecodeError> {
        config.validate()?;
        spec.validate().map_err(|e| DecodeError::InvalidConfig(e.to_string()))?;
        let params = forward::init_params(&config, spec, seed);
        Ok(Self { config, spec: spec.clone(), params })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces the parameter store (checkpoint restore). Names and
    /// shapes must match the constructed layout exactly.
    pub fn load_params(&mut self, loaded: ParamStore) -> Result<(), DecodeError> {
        if loaded.len() != self.params.len() {
            return Err(DecodeError::InvalidConfig(format!(
                "checkpoint has {} parameter tensors, decoder expects {}",
                loaded.len(),
                self.params.len()
            )));
        }
        for e in self.params.entries() {
            if !loaded.contains(&e.name) {
                return Err(DecodeError::InvalidConfig(format!(
                    "checkpoint is missing parameter {}",
                    e.name
                )));
            }
            let other = loaded.entry(loaded.idx(&e.name));
            if other.shape != e.shape {
                return Err(DecodeError::InvalidConfig(format!(
                    "parameter {} shape mismatch: {:?} vs {:?}",
                    e.name, other.shape, e.shape
                )));
            }
        }
        self.params = loaded;
        Ok(())
    }

    /// Channel count expected at each pyramid level (index = level - 1).
    pub(crate) fn level_channels(&self) -> [usize; NUM_STAGES] {
        let c = self.spec.stage_channels;
        [c[0], c[0], c[1], c[2], c[3]]
    }

    /// Spatial stride of pyramid level 1 relative to the input image.
    pub(crate) fn level1_stride(&self) -> usize {
        (self.spec.stage_strides[0] / 2).max(1)
    }

    /// Current per-head alpha values, per structure stage, in (0, 1).
    pub fn alpha_values(&self) -> BTreeMap<usize, Vec<f64>> {
        let mut out = BTreeMap::new();
        for &stage in &self.config.se_stages {
            let name = format!("stage{stage}.sea.alpha");
            if self.params.contains(&name) {
                let raw = &self.params.entry(self.params.idx(&name)).data;
                out.insert(
                    stage,
                    raw.iter().map(|&v| crate::autograd::sigmoid_scalar(v)).collect(),
                );
            }
        }
        out
    }
}
