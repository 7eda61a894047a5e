//! Run configuration: a preset serialized to TOML, with the user's file
//! deep-merged on top and command-line flags applied last.

use std::fmt;

use clap::ValueEnum;
use motionflow::features::FeatureLayout;
use motionflow::flow::{GuidanceWeights, TrainConfig};
use motionflow::flowedit::{EditConfig, NoiseMode, RetargetConfig};
use motionflow::model::ModelConfig;
use motionflow::synthdata::{vocab_size, DatasetConfig, PromptTokens, SkeletonPreset};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

/// A problem with one configuration key.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(key: impl Into<String>, message: impl fmt::Display) -> Self {
        Self {
            key: key.into(),
            message: message.to_string(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // keep the diagnostic on one line even when the source message is not
        let msg = self.message.split_whitespace().collect::<Vec<_>>().join(" ");
        write!(f, "config key `{}`: {msg}", self.key)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleDefaults {
    pub frames: usize,
    pub steps: usize,
    pub weights: GuidanceWeights,
    pub prompt: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditDefaults {
    pub tau_min: f64,
    pub steps: usize,
    pub w_src: GuidanceWeights,
    pub w_tgt: GuidanceWeights,
    pub noise: NoiseMode,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetargetDefaults {
    pub steps: usize,
    pub start_steps: Vec<usize>,
    pub noise: NoiseMode,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalDefaults {
    pub pairs: usize,
    /// Arm/leg scales the held-out targets are drawn from.
    pub limb_scales: Vec<f64>,
    /// Pick the start step by ground-truth error rather than bone length.
    pub use_truth: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DatasetConfig,
    pub sample: SampleDefaults,
    pub edit: EditDefaults,
    pub retarget: RetargetDefaults,
    pub eval: EvalDefaults,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let edit = EditConfig::text_edit(0);
        let retarget = RetargetConfig::new(0);
        let (model, train, data) = match preset {
            Preset::Desk => (
                ModelConfig::desk(),
                TrainConfig::desk(),
                DatasetConfig::new(0, 64, 64, SkeletonPreset::Humanoid16),
            ),
            Preset::Paper => (
                ModelConfig::paper(),
                TrainConfig::paper(),
                DatasetConfig::new(0, 2000, 120, SkeletonPreset::Humanoid24),
            ),
        };
        Self {
            sample: SampleDefaults {
                frames: data.window,
                steps: 100,
                weights: GuidanceWeights::GENERATION,
                prompt: "a person does a moderate walk with medium motion".into(),
                seed: 0,
            },
            edit: EditDefaults {
                tau_min: edit.tau_min,
                steps: edit.steps,
                w_src: edit.w_src,
                w_tgt: edit.w_tgt,
                noise: edit.noise,
                seed: 0,
            },
            retarget: RetargetDefaults {
                steps: retarget.steps,
                start_steps: retarget.start_steps,
                noise: retarget.noise,
                seed: 0,
            },
            eval: EvalDefaults {
                pairs: 20,
                limb_scales: vec![0.8, 1.0, 1.2],
                use_truth: true,
            },
            model,
            train,
            data,
        }
    }

    /// Layers `overlay` (TOML text) over `preset`.
    pub fn resolve(preset: Preset, overlay: Option<&str>) -> Result<Self, ConfigError> {
        let base = Value::try_from(Self::preset(preset)).map_err(|e| ConfigError::new("<preset>", e))?;
        let merged = match overlay {
            None => base,
            Some(text) => {
                let table: Table = toml::from_str(text).map_err(|e| ConfigError::new("<file>", e.message()))?;
                merge(base, Value::Table(table))
            }
        };
        let cfg: Self = serde_path_to_error::deserialize(merged).map_err(|e| {
            let path = e.path().to_string();
            let key = if path == "." { "<root>".to_string() } else { path };
            ConfigError::new(key, e.into_inner())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| ConfigError::new("model", e))?;
        let joints = self.data.preset.joints();
        if self.model.joints != joints {
            return Err(ConfigError::new(
                "model.joints",
                format!("{} does not match data.preset with {joints} joints", self.model.joints),
            ));
        }
        let dim = FeatureLayout::new(joints).map_err(|e| ConfigError::new("data.preset", e))?.dim();
        if self.model.feature_dim != dim {
            return Err(ConfigError::new(
                "model.feature_dim",
                format!("{} but the feature layout for {joints} joints has {dim} channels", self.model.feature_dim),
            ));
        }
        if self.model.vocab_size != vocab_size() {
            return Err(ConfigError::new(
                "model.vocab_size",
                format!("{} but the prompt vocabulary has {} words", self.model.vocab_size, vocab_size()),
            ));
        }
        self.train.validate().map_err(|e| ConfigError::new("train", e))?;
        if self.data.n_clips < 5 {
            return Err(ConfigError::new("data.n_clips", "need at least 5 clips"));
        }
        if self.data.window < 2 {
            return Err(ConfigError::new("data.window", "need at least 2 frames"));
        }
        if !(self.data.fps > 0.0 && self.data.fps.is_finite()) {
            return Err(ConfigError::new("data.fps", "must be positive"));
        }
        if self.sample.frames < 2 {
            return Err(ConfigError::new("sample.frames", "need at least 2 frames"));
        }
        if self.sample.steps == 0 {
            return Err(ConfigError::new("sample.steps", "need at least one step"));
        }
        PromptTokens::from_text(&self.sample.prompt, self.model.prompt_len)
            .map_err(|e| ConfigError::new("sample.prompt", e))?;
        self.sample.weights.validate().map_err(|e| ConfigError::new("sample.weights", e))?;
        self.edit_config().grid().map_err(|e| ConfigError::new("edit", e))?;
        if self.retarget.steps == 0 {
            return Err(ConfigError::new("retarget.steps", "need at least one step"));
        }
        if self.retarget.start_steps.is_empty() {
            return Err(ConfigError::new("retarget.start_steps", "need at least one start step"));
        }
        if let Some(k) = self.retarget.start_steps.iter().find(|&&k| k >= self.retarget.steps) {
            return Err(ConfigError::new(
                "retarget.start_steps",
                format!("start step {k} is not below retarget.steps = {}", self.retarget.steps),
            ));
        }
        if self.eval.pairs == 0 {
            return Err(ConfigError::new("eval.pairs", "need at least one pair"));
        }
        if self.eval.limb_scales.is_empty() {
            return Err(ConfigError::new("eval.limb_scales", "need at least one scale"));
        }
        Ok(())
    }

    pub fn edit_config(&self) -> EditConfig {
        EditConfig {
            tau_min: self.edit.tau_min,
            steps: self.edit.steps,
            w_src: self.edit.w_src,
            w_tgt: self.edit.w_tgt,
            noise: self.edit.noise,
            tau_clamp: self.train.tau_clamp,
            ..EditConfig::text_edit(self.edit.seed)
        }
    }

    pub fn retarget_config(&self) -> RetargetConfig {
        RetargetConfig {
            steps: self.retarget.steps,
            start_steps: self.retarget.start_steps.clone(),
            noise: self.retarget.noise,
            tau_clamp: self.train.tau_clamp,
            ..RetargetConfig::new(self.retarget.seed)
        }
    }
}

/// Recursive table merge; non-table values in `over` replace those in `base`.
fn merge(base: Value, over: Value) -> Value {
    match (base, over) {
        (Value::Table(mut b), Value::Table(o)) => {
            for (k, v) in o {
                let merged = match b.remove(&k) {
                    Some(old) => merge(old, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            Value::Table(b)
        }
        (_, o) => o,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for p in [Preset::Desk, Preset::Paper] {
            let cfg = RunConfig::preset(p);
            cfg.validate().unwrap();
            assert_eq!(RunConfig::resolve(p, Some(&cfg.to_toml())).unwrap(), cfg);
        }
    }

    #[test]
    fn overlay_changes_only_named_keys() {
        let cfg = RunConfig::resolve(Preset::Desk, Some("[train]\nlr = 0.001\n[edit.w_tgt]\ntext = 2.0\n")).unwrap();
        let mut want = RunConfig::preset(Preset::Desk);
        want.train.lr = 1e-3;
        want.edit.w_tgt.text = 2.0;
        assert_eq!(cfg, want);
    }

    #[test]
    fn paper_preset_keeps_unbounded_steps() {
        assert_eq!(RunConfig::resolve(Preset::Paper, None).unwrap().train.max_steps, None);
    }

    #[test]
    fn errors_name_the_key() {
        let e = RunConfig::resolve(Preset::Desk, Some("[model]\nhidden = \"wide\"\n")).unwrap_err();
        assert_eq!(e.key, "model.hidden");
        let e = RunConfig::resolve(Preset::Desk, Some("[train]\nlrate = 1.0\n")).unwrap_err();
        assert_eq!(e.key, "train.lrate");
        assert!(e.message.contains("lrate"), "{e}");
        let e = RunConfig::resolve(Preset::Desk, Some("[model]\njoints = 24\n")).unwrap_err();
        assert!(e.key.starts_with("model"), "{e}");
        let e = RunConfig::resolve(Preset::Desk, Some("[retarget]\nstart_steps = [5, 200]\n")).unwrap_err();
        assert_eq!(e.key, "retarget.start_steps");
        let e = RunConfig::resolve(Preset::Desk, Some("[edit]\ntau_min = 1.5\n")).unwrap_err();
        assert_eq!(e.key, "edit");
        assert!(!e.to_string().contains('\n'));
    }
}
