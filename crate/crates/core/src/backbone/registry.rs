//! Backend selection: the built-in stub or an externally registered
//! adapter, picked by the `backbone.kind` config key.

use super::{Backbone, BackboneError, BackboneSpec, StubBackbone};
use once_cell::sync::Lazy;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::{Arc, RwLock};

pub type BackboneFactory =
    Arc<dyn Fn(&BackboneConfig) -> Result<Arc<dyn Backbone>, BackboneError> + Send + Sync>;

static REGISTRY: Lazy<RwLock<HashMap<String, BackboneFactory>>> =
    Lazy::new(|| RwLock::new(HashMap::new()));

/// Registration hook for real-backbone adapters (e.g. a CLIP loader).
pub fn register_backbone_adapter(name: &str, factory: BackboneFactory) {
    REGISTRY.write().expect("registry lock").insert(name.to_string(), factory);
}

fn default_seed() -> u64 {
    1337
}

fn default_kind() -> String {
    "stub".into()
}

/// Stub geometry / planted-signal options.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct StubOptions {
    /// Override stage strides (default 4, 8, 16, 32).
    pub strides: Option<[usize; 4]>,
    /// Override stage channels (default 24, 48, 96, 192).
    pub channels: Option<[usize; 4]>,
    /// Override joint embedding dimension (default 64).
    pub embed_dim: Option<usize>,
    /// Classes whose color signature is planted into stage-5 features.
    #[serde(default)]
    pub planted_classes: Vec<String>,
    /// Strength of the planted injection.
    #[serde(default = "default_planted_gain")]
    pub planted_gain: f64,
}

fn default_planted_gain() -> f64 {
    16.0
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BackboneConfig {
    /// `stub` or `external-adapter`.
    #[serde(default = "default_kind")]
    pub kind: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Registry key for `external-adapter`.
    #[serde(default)]
    pub adapter: Option<String>,
    #[serde(default)]
    pub stub: StubOptions,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { kind: default_kind(), seed: default_seed(), adapter: None, stub: StubOptions::default() }
    }
}

pub fn build_backbone(cfg: &BackboneConfig) -> Result<Arc<dyn Backbone>, BackboneError> {
    match cfg.kind.as_str() {
        "stub" => {
            let mut spec = BackboneSpec::desk_stub();
            if let Some(s) = cfg.stub.strides {
                spec.stage_strides = s;
            }
            if let Some(c) = cfg.stub.channels {
                spec.stage_channels = c;
            }
            if let Some(d) = cfg.stub.embed_dim {
                spec.embed_dim = d;
            }
            spec.validate()?;
            let mut stub = StubBackbone::with_spec(spec, cfg.seed);
            if !cfg.stub.planted_classes.is_empty() {
                stub = stub.with_planted_classes(&cfg.stub.planted_classes, cfg.stub.planted_gain);
            }
            Ok(Arc::new(stub))
        }
        "external-adapter" => {
            let name = cfg.adapter.clone().unwrap_or_else(|| "default".into());
            let factory = REGISTRY
                .read()
                .expect("registry lock")
                .get(&name)
                .cloned()
                .ok_or_else(|| BackboneError::AdapterNotRegistered(name.clone()))?;
            factory(cfg)
        }
        other => Err(BackboneError::UnknownKind(other.to_string())),
    }
}
