//! The run configuration: one JSON document covering every module, with
//! dotted-path overrides.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{DetrError, Result};
use crate::model::ModelConfig;
use crate::rgbd::{CameraIntrinsics, GeneratorConfig};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Minimum detection score reported by `eval` and `infer`.
    pub score_thresh: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { score_thresh: 0.05 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Dataset directory used when `--data` is not given.
    pub data: Option<String>,
    /// Run directory used when `--out` is not given.
    pub out: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub camera: CameraIntrinsics,
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Parses a config document; missing fields take their defaults and
    /// unknown keys are rejected with their line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| DetrError::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }

    /// Applies `path=value` overrides such as `decoder.layers=2` (paths are
    /// relative to the document root, e.g. `model.decoder.layers=2`). Values
    /// are parsed as JSON, falling back to a plain string.
    pub fn with_overrides(self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut doc = serde_json::to_value(&self).expect("serializable");
        for o in overrides {
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| DetrError::Config(format!("override `{o}` is not of the form key.path=value")))?;
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, path, value)?;
        }
        serde_json::from_value(doc).map_err(|e| DetrError::Config(format!("after overrides: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        self.generator.validate()?;
        self.train.validate()?;
        let m = &self.model;
        if m.geometry.k == 0 || m.geometry.d == 0 || m.geometry.layers == 0 {
            return Err(DetrError::Config("model.geometry needs k, d and layers ≥ 1".into()));
        }
        if m.decoder.queries == 0 || m.decoder.heads == 0 || m.decoder.content_dim % m.decoder.heads != 0 {
            return Err(DetrError::Config(format!(
                "model.decoder: content_dim {} must be a positive multiple of heads {}, with queries ≥ 1",
                m.decoder.content_dim, m.decoder.heads
            )));
        }
        if m.visual.heads == 0 || m.visual.out_dim % m.visual.heads != 0 {
            return Err(DetrError::Config(format!(
                "model.visual: out_dim {} must be a positive multiple of heads {}",
                m.visual.out_dim, m.visual.heads
            )));
        }
        Ok(())
    }
}

fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let here = keys[..=i].join(".");
        let obj = node
            .as_object_mut()
            .ok_or_else(|| DetrError::Config(format!("`{}` is not a section", keys[..i].join("."))))?;
        let slot = obj
            .get_mut(*key)
            .ok_or_else(|| DetrError::Config(format!("unknown config key `{here}`")))?;
        if i + 1 == keys.len() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    Err(DetrError::Config("empty override path".into()))
}
