//! Run configuration: built-in defaults, then a JSON file, then command-line flags.

use std::path::Path;

use foley_core::adapter::AdapterConfig;
use foley_core::backbone::BackboneConfig;
use foley_core::diffusion::GuidanceParams;
use foley_core::features::{FeatureConfig, FeatureVariant};
use foley_core::synth::SynthConfig;
use foley_core::training::{ScheduleConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{FoleyError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed of the command.
    pub seed: u64,
    /// Seed of the class signatures shared by every split.
    pub signature_seed: u64,
    pub synth: SynthConfig,
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    pub features: FeatureConfig,
    pub variant: FeatureVariant,
    pub schedule: ScheduleConfig,
    pub backbone_training: TrainConfig,
    pub adapter_training: TrainConfig,
    pub guide: GuidanceParams,
    pub sample_steps: usize,
    pub alphas: Vec<f64>,
    pub null_trials: usize,
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            signature_seed: 0,
            synth: SynthConfig::default(),
            backbone: BackboneConfig::default(),
            adapter: AdapterConfig::default(),
            features: FeatureConfig::default(),
            variant: FeatureVariant::Fused,
            schedule: ScheduleConfig::default(),
            backbone_training: TrainConfig::backbone(3000, 0),
            adapter_training: TrainConfig::adapter(3000, 0),
            guide: GuidanceParams::default(),
            sample_steps: 50,
            alphas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            null_trials: 1000,
            log_every: 50,
        }
    }
}

/// Overlays `patch` onto `base`; every key of `patch` must already exist in `base`.
pub fn merge(base: &mut Value, patch: &Value, at: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let here = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None => return Err(FoleyError::Args(format!("unknown config key `{here}`"))),
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with an optional JSON file.
    pub fn load(file: Option<&Path>) -> Result<Self> {
        let mut v = serde_json::to_value(Self::default()).expect("defaults serialize");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| FoleyError::io(path, e))?;
            let patch: Value = serde_json::from_str(&text).map_err(|e| FoleyError::Json {
                path: path.into(),
                source: e,
            })?;
            merge(&mut v, &patch, "")?;
        }
        serde_json::from_value(v).map_err(|e| FoleyError::Args(format!("invalid config: {e}")))
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Checks ranges that the flags and file cannot express by type alone.
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.backbone.validate()?;
        self.backbone_training.validate()?;
        self.adapter_training.validate()?;
        self.guide.validate()?;
        if self.sample_steps == 0 {
            return Err(FoleyError::Args("sample_steps must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(FoleyError::Args("log_every must be at least 1".into()));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(FoleyError::Args(format!("alpha {a} outside [0, 1]")));
        }
        let s = &self.synth;
        let b = &self.backbone;
        if s.frames != b.frames || s.latent_channels != b.latent_channels || s.classes != b.classes {
            return Err(FoleyError::Args("synth and backbone shapes disagree".into()));
        }
        if s.feature_dim != self.features.raw_dim || s.frames != self.features.frames || s.clip_frames != self.features.clip_frames {
            return Err(FoleyError::Args("synth and feature shapes disagree".into()));
        }
        Ok(())
    }
}
