//! Run configuration: one JSON document with a section per stage, plus
//! dotted-key overrides.

use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::DataConfig;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::synthworld::WorldSpec;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Success radius in meters.
    pub radius: f64,
    /// Number of held-out episodes drawn as SVG by `render`.
    pub render_count: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            radius: 3.0,
            render_count: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed for the world, the episode splits and training.
    pub seed: u64,
    /// Directory holding every artifact of the run.
    pub out_dir: String,
    pub world: WorldSpec,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            out_dir: "runs/default".into(),
            world: WorldSpec::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::config("<root>", e.to_string()))?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        Ok(cfg)
    }

    pub fn load(path: &FsPath) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Applies `key=value` overrides, where `key` is a dotted path such as
    /// `train.iterations`. Values are parsed as JSON, falling back to a
    /// plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o, "override must look like key=value"))?;
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_dotted(&mut value, key, parsed)?;
        }
        Self::from_value(value)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate().map_err(|e| in_section("world", e))?;
        self.model.validate().map_err(|e| in_section("model", e))?;
        self.loss.validate().map_err(|e| in_section("loss", e))?;
        self.train.validate().map_err(|e| in_section("train", e))?;
        if !(self.eval.radius >= 0.0) {
            return Err(Error::config("eval.radius", "must be nonnegative"));
        }
        if !(self.data.radius >= 0.0) {
            return Err(Error::config("data.radius", "must be nonnegative"));
        }
        if self.data.max_steps > self.model.max_steps {
            return Err(Error::config(
                "data.max_steps",
                format!("exceeds model.max_steps ({})", self.model.max_steps),
            ));
        }
        Ok(())
    }

    pub fn to_pretty_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn in_section(section: &str, err: Error) -> Error {
    match err {
        Error::Config { .. } => err,
        other => Error::config(section, other.to_string()),
    }
}

fn set_dotted(root: &mut Value, key: &str, new: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let here = parts[..=i].join(".");
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(&here, "not a section"))?;
        let slot = obj.get_mut(*part).ok_or_else(|| Error::config(&here, "unknown key"))?;
        if i + 1 == parts.len() {
            *slot = new;
            return Ok(());
        }
        cur = slot;
    }
    Err(Error::config(key, "empty key"))
}
