//! Checkpoint files: the CAFT container with the checkpoint description as metadata.

use std::path::{Path, PathBuf};

use foley_core::training::{Checkpoint, ModelConfig, ScheduleConfig, TrainConfig, TrainPhase, CHECKPOINT_VERSION};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::caft::Caft;
use crate::dataset::meta_field;
use crate::error::{FoleyError, Result};

/// Everything stored next to the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub phase: TrainPhase,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
    pub backbone_fingerprint: String,
    pub steps: u64,
    pub seed: u64,
    /// Signature seed of the data the models were trained on.
    pub signature_seed: u64,
    pub run_config: Value,
}

/// A checkpoint with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedCheckpoint {
    pub checkpoint: Checkpoint,
    pub signature_seed: u64,
    pub run_config: Value,
}

pub fn save_checkpoint(path: &Path, saved: &SavedCheckpoint) -> Result<()> {
    let ck = &saved.checkpoint;
    let meta = CheckpointMeta {
        format_version: ck.format_version,
        phase: ck.phase,
        model: ck.model.clone(),
        train: ck.train.clone(),
        schedule: ck.schedule,
        backbone_fingerprint: ck.backbone_fingerprint.clone(),
        steps: ck.steps,
        seed: ck.seed,
        signature_seed: saved.signature_seed,
        run_config: saved.run_config.clone(),
    };
    let mut c = Caft::new(serde_json::json!({ "checkpoint": meta }));
    for (n, t) in &ck.tensors {
        c.push(n.clone(), t.clone());
    }
    c.write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<SavedCheckpoint> {
    let c = Caft::read(path)?;
    let version = c
        .meta
        .get("checkpoint")
        .and_then(|m| m.get("format_version"))
        .and_then(Value::as_u64)
        .ok_or_else(|| FoleyError::corrupt(path, "not a checkpoint"))?;
    if version != CHECKPOINT_VERSION as u64 {
        return Err(FoleyError::UnsupportedVersion {
            path: path.into(),
            found: version as u32,
            supported: CHECKPOINT_VERSION,
        });
    }
    let meta: CheckpointMeta = meta_field(&c, "checkpoint", path)?;
    let checkpoint = Checkpoint {
        format_version: meta.format_version,
        phase: meta.phase,
        model: meta.model,
        train: meta.train,
        schedule: meta.schedule,
        tensors: c.tensors,
        backbone_fingerprint: meta.backbone_fingerprint,
        steps: meta.steps,
        seed: meta.seed,
    };
    Ok(SavedCheckpoint {
        checkpoint,
        signature_seed: meta.signature_seed,
        run_config: meta.run_config,
    })
}

/// Wall-clock accounting lives beside the checkpoint so the checkpoint itself stays reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub phase: TrainPhase,
    pub steps: u64,
    pub wall_seconds: f64,
    pub seconds_per_step: f64,
}

pub fn timing_path(ckpt: &Path) -> PathBuf {
    sidecar(ckpt, "timing.json")
}

/// `model.caft` -> `model.caft.<suffix>`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}
