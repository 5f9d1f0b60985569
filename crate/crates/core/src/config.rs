//! Run configuration: one JSON document with every tunable, plus dotted
//! `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{ProposalConfig, SceneConfig};
use crate::error::{Error, Result};
use crate::features::Level;
use crate::trainer::{ModelConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_images: usize,
    pub test_images: usize,
    pub proposal_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_images: 200,
            test_images: 50,
            proposal_seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// IoU needed for a detection to match a ground truth.
    pub iou_threshold: f64,
    /// Detections below this score are not counted in recall/accuracy.
    pub score_threshold: f64,
    /// Per-class NMS overlap.
    pub nms_iou: f64,
    /// Lowest class probability that becomes a detection at all.
    pub min_score: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            score_threshold: 0.5,
            nms_iou: 0.3,
            min_score: 0.05,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.iou_threshold)
            && unit(self.score_threshold)
            && unit(self.nms_iou)
            && unit(self.min_score))
        {
            return Err(Error::Config(
                "evaluation thresholds must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Generator input levels compared by `ablate`.
    pub input_levels: Vec<Level>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            input_levels: vec![Level::Conv1, Level::Conv2, Level::Conv3],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub proposals: ProposalConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    /// Used when no `--out` is given.
    pub output_dir: Option<String>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.proposals.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.data.train_images == 0 || self.data.test_images == 0 {
            return Err(Error::Config(
                "train_images and test_images must be positive".into(),
            ));
        }
        if self.ablation.input_levels.is_empty() {
            return Err(Error::Config(
                "ablation.input_levels must not be empty".into(),
            ));
        }
        Ok(())
    }

    /// Parses a JSON document, applies `key=value` overrides, validates.
    pub fn from_json_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json_str(&text, overrides)
    }

    /// Points every seed at `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        self.scene.seed = seed;
        self.train.seed = seed;
        self.data.proposal_seed = seed;
    }
}

/// Sets `a.b.c=value`, creating intermediate objects. The value is read as
/// JSON when it parses, otherwise as a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::Config(format!(
                "override {key:?}: {} is not an object",
                parts[..i].join(".")
            ))
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split always yields at least one part")
}
