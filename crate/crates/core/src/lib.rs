//! Open-vocabulary camouflaged object segmentation, end to end.
//!
//! The pipeline couples a frozen vision-language backbone to a small
//! trainable decoder and a class-aware evaluation protocol:
//!
//! 1. **backbone** — frozen text encoder, multi-scale visual encoder and
//!    visual projection, with a deterministic stub implementation.
//! 2. **prompts** — CamoPrompts template expansion and class-embedding
//!    averaging, plus embedding-set diagnostics.
//! 3. **decoder** — the iterative refinement decoder with semantic
//!    guidance attention and edge/depth structure enhancement.
//! 4. **objectives** — weighted segmentation + dice edge + L1/SSIM depth
//!    losses summed over iterations and stages.
//! 5. **recognize** — masked average pooling and cosine classification.
//! 6. **metrics** — six class-aware segmentation metrics and reports.
//! 7. **data** — manifest ingestion, edge synthesis, object attribute
//!    statistics, taxonomy path similarity, and a synthetic toy set.
//! 8. **harness** — training/evaluation loops, ablation presets, report
//!    emission, and run configuration.

pub mod autograd;
pub mod backbone;
pub mod data;
pub mod decoder;
pub mod harness;
pub mod metrics;
pub mod objectives;
pub mod prompts;
pub mod recognize;
pub(crate) mod util;
