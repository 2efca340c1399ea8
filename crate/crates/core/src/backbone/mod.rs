//! Frozen vision-language backbone bridge.
//!
//! Three sub-interfaces are abstracted behind [`Backbone`]: the text
//! encoder, the multi-scale visual encoder, and the visual projection
//! layer. The backbone is immutable after construction and never
//! receives gradient updates; the decoder treats its outputs and its
//! projection matrix as constants.

mod registry;
mod stub;

pub use registry::{build_backbone, register_backbone_adapter, BackboneConfig, BackboneFactory, StubOptions};
pub use stub::{planted_palette, StubBackbone};

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Frozen parameter count of the full-scale CLIP-ConvNeXt-L tower
/// (359M total minus the 7M trainable decoder budget).
pub const CLIP_CONVNEXT_L_FROZEN_PARAMS: u64 = 352_000_000;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("prompt list is empty")]
    EmptyPrompts,
    #[error("prompt {index} is empty")]
    EmptyPrompt { index: usize },
    #[error("image of {h}x{w} not divisible by the required multiple {multiple}")]
    IndivisibleImage { h: usize, w: usize, multiple: usize },
    #[error("{what}: expected {expected}, got {got}")]
    DimMismatch { what: &'static str, expected: usize, got: usize },
    #[error("invalid backbone spec: {0}")]
    InvalidSpec(String),
    #[error("unknown backbone kind `{0}` (expected `stub` or `external-adapter`)")]
    UnknownKind(String),
    #[error("no external backbone adapter registered under `{0}`")]
    AdapterNotRegistered(String),
    #[error("invalid feature pyramid: {0}")]
    InvalidPyramid(String),
    #[error("class embedding row {row} has norm {norm}, expected 1 within 1e-5")]
    NotUnitNorm { row: usize, norm: f64 },
}

/// Static description of a backbone tower.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    /// Dimension of the joint image/text embedding space.
    pub embed_dim: usize,
    /// Channels of visual stages 2..5.
    pub stage_channels: [usize; 4],
    /// Spatial downsample factors of visual stages 2..5.
    pub stage_strides: [usize; 4],
    /// Always true: no backbone parameter ever receives a gradient.
    pub frozen: bool,
}

impl BackboneSpec {
    /// Desk-scale stub tower used throughout the tests.
    pub fn desk_stub() -> Self {
        Self {
            embed_dim: 64,
            stage_channels: [24, 48, 96, 192],
            stage_strides: [4, 8, 16, 32],
            frozen: true,
        }
    }

    /// Full-scale CLIP-ConvNeXt-L geometry. Loading real weights is an
    /// adapter responsibility; this spec exists for shape/budget
    /// arithmetic.
    pub fn clip_convnext_large() -> Self {
        Self {
            embed_dim: 768,
            stage_channels: [192, 384, 768, 1536],
            stage_strides: [4, 8, 16, 32],
            frozen: true,
        }
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        if !self.frozen {
            return Err(BackboneError::InvalidSpec("backbone must be frozen".into()));
        }
        if self.embed_dim == 0 {
            return Err(BackboneError::InvalidSpec("embed_dim must be positive".into()));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(BackboneError::InvalidSpec("stage channels must be positive".into()));
        }
        if !self.stage_strides.windows(2).all(|w| w[0] < w[1]) || self.stage_strides[0] == 0 {
            return Err(BackboneError::InvalidSpec(
                "stage strides must be positive and strictly increasing".into(),
            ));
        }
        Ok(())
    }

    /// Channel count of the deepest stage (input to the projection).
    pub fn top_channels(&self) -> usize {
        self.stage_channels[3]
    }
}

/// Multi-scale image features, levels 1..5. Level 1 is synthesized by 2x
/// bilinear upsampling of level 2 and shares its channel count; spatial
/// sizes halve from each level to the next.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<Array3<f64>>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Array3<f64>>) -> Result<Self, BackboneError> {
        if levels.len() != 5 {
            return Err(BackboneError::InvalidPyramid(format!(
                "expected 5 levels, got {}",
                levels.len()
            )));
        }
        let (c1, h1, w1) = levels[0].dim();
        let (c2, h2, w2) = levels[1].dim();
        if c1 != c2 || h1 != 2 * h2 || w1 != 2 * w2 {
            return Err(BackboneError::InvalidPyramid(
                "level 1 must be 2x the resolution of level 2 with identical channels".into(),
            ));
        }
        for i in 1..4 {
            let (_, h, w) = levels[i].dim();
            let (_, hn, wn) = levels[i + 1].dim();
            if h != 2 * hn || w != 2 * wn {
                return Err(BackboneError::InvalidPyramid(format!(
                    "level {} must halve the resolution of level {}",
                    i + 2,
                    i + 1
                )));
            }
        }
        Ok(Self { levels })
    }

    /// Level accessor, 1-based per the architecture's numbering.
    pub fn level(&self, i: usize) -> &Array3<f64> {
        assert!((1..=5).contains(&i), "pyramid level {i} out of range");
        &self.levels[i - 1]
    }

    pub fn levels(&self) -> &[Array3<f64>] {
        &self.levels
    }
}

/// Per-class unit-norm text embeddings, row order matching `class_names`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbeddingSet {
    class_names: Vec<String>,
    embeddings: Array2<f64>,
}

impl ClassEmbeddingSet {
    pub fn new(class_names: Vec<String>, embeddings: Array2<f64>) -> Result<Self, BackboneError> {
        if class_names.len() != embeddings.nrows() {
            return Err(BackboneError::DimMismatch {
                what: "class embedding rows",
                expected: class_names.len(),
                got: embeddings.nrows(),
            });
        }
        for (row, r) in embeddings.rows().into_iter().enumerate() {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(BackboneError::NotUnitNorm { row, norm });
            }
        }
        Ok(Self { class_names, embeddings })
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }
}

/// A warning emitted while encoding text (currently only truncation).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextWarning {
    pub prompt_index: usize,
    pub message: String,
}

/// Text encoder output: one unit-norm row per prompt plus warnings.
#[derive(Clone, Debug)]
pub struct TextEncoding {
    pub embeddings: Array2<f64>,
    pub warnings: Vec<TextWarning>,
}

/// Joint-space visual embedding; `degenerate` marks a zero-norm input
/// that was mapped to the zero vector instead of being normalized.
#[derive(Clone, Debug)]
pub struct Projected {
    pub vector: Array1<f64>,
    pub degenerate: bool,
}

/// The frozen backbone contract. Implementations must be pure functions
/// of their inputs: same input, same output, bit for bit.
pub trait Backbone: Send + Sync {
    fn spec(&self) -> &BackboneSpec;

    /// One embedding row per prompt, unit-normalized, order preserved.
    fn encode_text(&self, prompts: &[String]) -> Result<TextEncoding, BackboneError>;

    /// Multi-scale features for a (3, h, w) image in [0, 1]; h and w
    /// must be divisible by the largest stage stride.
    fn encode_image(&self, image: &Array3<f64>) -> Result<FeaturePyramid, BackboneError>;

    /// The visual projection as an explicit (embed_dim x c5) matrix so
    /// callers can differentiate through it without updating it.
    fn projection_matrix(&self) -> &Array2<f64>;

    /// Content hash over every frozen parameter buffer.
    fn param_fingerprint(&self) -> String;

    /// Number of encode_text invocations so far (caching audits).
    fn text_encode_count(&self) -> u64 {
        0
    }

    /// Projects a pooled stage-5 feature into the joint space and
    /// unit-normalizes it; an all-zero input maps to the zero vector
    /// with the degenerate flag set.
    fn project_visual(&self, feature: &Array1<f64>) -> Result<Projected, BackboneError> {
        let m = self.projection_matrix();
        if feature.len() != m.ncols() {
            return Err(BackboneError::DimMismatch {
                what: "project_visual input channels",
                expected: m.ncols(),
                got: feature.len(),
            });
        }
        let raw = m.dot(feature);
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            Ok(Projected { vector: Array1::zeros(m.nrows()), degenerate: true })
        } else {
            Ok(Projected { vector: raw.mapv(|v| v / norm), degenerate: false })
        }
    }
}
