//! Batch entry points: the training loop, evaluation runs, ablation
//! presets, and report data. Configuration is a layered TOML file with
//! dotted-path `--set key=value` overrides; defaults reproduce the
//! standard recipe (AdamW, lr 3e-6, weight decay 5e-4, batch 4, 30
//! epochs, 384 input).

mod ablate;
mod eval;
mod optim;
mod report;
mod train;

pub use ablate::{ablate_samples, builtin_presets, delta_vs_baseline, AblationPreset, AblationRow, AblationTable};
pub use eval::{evaluate_run, evaluate_samples, EvalOutput, EvalSample, PredictionDumpRecord};
pub use optim::AdamW;
pub use report::{
    alpha_chart_rows, attribute_rows, prompt_analysis, read_train_log, write_aggregate_csv,
    write_alpha_csv, write_attribute_csv, write_prompt_analysis_csv, AlphaChartRow, AttributeRow,
    LogRow, PromptAnalysisRow,
};
pub use train::{
    config_diff, load_checkpoint, restore_trainer, save_checkpoint, train_run, Checkpoint,
    GradAudit, GtSample, StepStats, TrainOutcome, Trainer, CHECKPOINT_FORMAT_VERSION,
};

use crate::backbone::BackboneConfig;
use crate::decoder::DecoderConfig;
use crate::objectives::LossConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("config/checkpoint mismatch in fields: {}", .0.join(", "))]
    ConfigMismatch(Vec<String>),
    #[error("checkpoint format version {found} unsupported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("non-finite loss at step {step}; last good checkpoint: {}", .last_checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    NanLoss { step: u64, last_checkpoint: Option<PathBuf> },
    #[error("no training samples available")]
    NoTrainSamples,
    #[error("no evaluation samples available")]
    NoEvalSamples,
    #[error("ablation preset name collision: `{0}`")]
    PresetCollision(String),
    #[error("ablation requires a preset named `baseline`")]
    MissingBaseline,
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Backbone(#[from] crate::backbone::BackboneError),
    #[error(transparent)]
    Prompt(#[from] crate::prompts::PromptError),
    #[error(transparent)]
    Decode(#[from] crate::decoder::DecodeError),
    #[error(transparent)]
    Loss(#[from] crate::objectives::LossError),
    #[error(transparent)]
    Metric(#[from] crate::metrics::MetricError),
    #[error(transparent)]
    Recognize(#[from] crate::recognize::RecognizeError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serde(String),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(default = "d_opt_name")]
    pub name: String,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
}

fn d_opt_name() -> String {
    "adamw".into()
}
fn d_lr() -> f64 {
    3e-6
}
fn d_wd() -> f64 {
    5e-4
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            name: d_opt_name(),
            lr: d_lr(),
            weight_decay: d_wd(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_resolution")]
    pub resolution: usize,
    #[serde(default = "d_seed")]
    pub seed: u64,
}

fn d_batch() -> usize {
    4
}
fn d_epochs() -> usize {
    30
}
fn d_resolution() -> usize {
    384
}
fn d_seed() -> u64 {
    17
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: d_batch(), epochs: d_epochs(), resolution: d_resolution(), seed: d_seed() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub manifest: PathBuf,
    pub split: PathBuf,
    /// Explicit evaluation manifest; when absent, evaluation uses the
    /// unseen-class records of the main manifest.
    #[serde(default)]
    pub eval_manifest: Option<PathBuf>,
    #[serde(default)]
    pub taxonomy: Option<PathBuf>,
    /// Verify referenced files exist when loading the manifest.
    #[serde(default = "d_true")]
    pub check_files: bool,
}

fn d_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSection {
    #[serde(default = "d_out_dir")]
    pub out_dir: PathBuf,
    /// Template set used for the training class embeddings.
    #[serde(default = "d_template")]
    pub template_set: String,
    /// Template set for evaluation (defaults to the training set).
    #[serde(default)]
    pub eval_template_set: Option<String>,
    /// Optional template file overriding the built-in sets.
    #[serde(default)]
    pub template_file: Option<PathBuf>,
}

fn d_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}
fn d_template() -> String {
    "camo".into()
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            out_dir: d_out_dir(),
            template_set: d_template(),
            eval_template_set: None,
            template_file: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Substitute the ground-truth mask for the predicted one (the
    /// ideal-performance oracle mode).
    #[serde(default)]
    pub ideal_masks: bool,
    #[serde(default = "d_iou_thr")]
    pub iou_threshold: f64,
    #[serde(default = "d_beta_sq")]
    pub f_beta_sq: f64,
    #[serde(default = "d_s_alpha")]
    pub s_measure_alpha: f64,
}

fn d_iou_thr() -> f64 {
    0.5
}
fn d_beta_sq() -> f64 {
    0.3
}
fn d_s_alpha() -> f64 {
    0.5
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ideal_masks: false,
            iou_threshold: d_iou_thr(),
            f_beta_sq: d_beta_sq(),
            s_measure_alpha: d_s_alpha(),
        }
    }
}

/// Complete run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct RunConfig {
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "DecoderConfig::default")]
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.optimizer.name != "adamw" {
            return Err(HarnessError::Config(format!(
                "unknown optimizer `{}` (only `adamw` is supported)",
                self.optimizer.name
            )));
        }
        for (name, v) in [
            ("optimizer.lr", self.optimizer.lr),
            ("optimizer.weight_decay", self.optimizer.weight_decay),
        ] {
            if v <= 0.0 || !v.is_finite() {
                return Err(HarnessError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.train.batch_size == 0 || self.train.epochs == 0 || self.train.resolution == 0 {
            return Err(HarnessError::Config(
                "train.batch_size, train.epochs and train.resolution must be positive".into(),
            ));
        }
        self.decoder.validate().map_err(HarnessError::from)?;
        Ok(())
    }

    /// Resolves the named or file-based template set.
    pub fn template_set(&self, name: &str) -> Result<crate::prompts::PromptTemplateSet, HarnessError> {
        if let Some(file) = &self.run.template_file {
            return Ok(crate::prompts::PromptTemplateSet::from_file(name.to_string(), file)?);
        }
        crate::prompts::PromptTemplateSet::builtin(name)
            .ok_or_else(|| HarnessError::Config(format!("unknown template set `{name}`")))
    }
}

/// Loads a TOML config file (optional) and applies dotted-path
/// overrides such as `decoder.width=64` or `run.template_set=photo`.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, HarnessError> {
    let mut table: toml::Table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(io_err(p))?;
            text.parse().map_err(|e| HarnessError::Config(format!("{e}")))?
        }
        None => toml::Table::new(),
    };
    for setting in overrides {
        let (key, raw) = setting
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("override `{setting}` is not key=value")))?;
        let value = parse_toml_value(raw);
        set_path(&mut table, key.trim(), value)?;
    }
    let config: RunConfig =
        toml::Value::Table(table).try_into().map_err(|e| HarnessError::Config(format!("{e}")))?;
    config.validate()?;
    Ok(config)
}

fn parse_toml_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    if raw.starts_with('[') {
        // bare arrays parse via a wrapper document
        if let Ok(mut t) = format!("v = {raw}").parse::<toml::Table>() {
            if let Some(v) = t.remove("v") {
                return v;
            }
        }
    }
    toml::Value::String(raw.to_string())
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), HarnessError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.is_empty() {
        return Err(HarnessError::Config("empty override key".into()));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        cur = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| HarnessError::Config(format!("`{part}` in `{key}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
