//! Backbone pretraining, frozen-backbone adapter training, and checkpoints.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, AdapterConfig};
use crate::backbone::{fingerprint, Backbone, BackboneConfig};
use crate::diffusion::{training_loss, NoiseSchedule, ScheduleKind, TrainItem, VPredictor};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeaturePreprocessor, FeatureVariant};
use crate::optim::{clip_global_norm, AdamW, AdamWConfig};
use crate::real::Real;
use crate::rng::{stream, Stream};
use crate::system::{AdapterPredictor, BackbonePredictor};
use crate::tensor::{Param, Parameters, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainPhase {
    Backbone,
    Adapter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            kind: ScheduleKind::Cosine,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.steps, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub phase: TrainPhase,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub cond_drop_p: f64,
    pub clip_norm: f64,
    /// Extra adapter steps on the finetuning subset; 0 disables the stage.
    pub finetune_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::backbone(3000, 0)
    }
}

impl TrainConfig {
    pub fn backbone(steps: usize, seed: u64) -> Self {
        Self {
            phase: TrainPhase::Backbone,
            steps,
            batch_size: 16,
            optimizer: AdamWConfig::default(),
            cond_drop_p: 0.1,
            clip_norm: 1.0,
            finetune_steps: 0,
            seed,
        }
    }

    pub fn adapter(steps: usize, seed: u64) -> Self {
        Self {
            phase: TrainPhase::Adapter,
            optimizer: AdamWConfig {
                lr: 2e-3,
                ..AdamWConfig::default()
            },
            ..Self::backbone(steps, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.cond_drop_p) {
            return Err(Error::Config(alloc::format!("cond_drop_p {} outside [0, 1)", self.cond_drop_p)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        self.optimizer.validate()
    }
}

/// One optimizer step as reported to the caller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainSummary {
    pub steps: u64,
    /// Loss of every step, before its update.
    pub losses: Vec<f64>,
    pub fingerprint_before: String,
    pub fingerprint_after: String,
}

struct Loop<'a, R> {
    cfg: &'a TrainConfig,
    sched: NoiseSchedule,
    opt: AdamW<R>,
    batch_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    step: u64,
    losses: Vec<f64>,
}

impl<'a, R: Real> Loop<'a, R> {
    fn new(cfg: &'a TrainConfig, sched: &ScheduleConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            sched: sched.build()?,
            opt: AdamW::new(cfg.optimizer)?,
            batch_rng: stream(cfg.seed, Stream::Batch),
            noise_rng: stream(cfg.seed, Stream::Noise),
            step: 0,
            losses: Vec::new(),
        })
    }

    fn batch<'i>(&mut self, items: &'i [TrainItem<R>]) -> Vec<&'i TrainItem<R>> {
        (0..self.cfg.batch_size)
            .map(|_| &items[self.batch_rng.random_range(0..items.len())])
            .collect()
    }

    /// Loss and clipped gradients for the next batch.
    fn grads<M: VPredictor<R>>(
        &mut self,
        model: &M,
        batch: &[&TrainItem<R>],
    ) -> Result<(f64, f64, BTreeMap<crate::tensor::ParamId, Vec<R>>)> {
        let out = training_loss(model, batch, &self.sched, self.cfg.cond_drop_p, &mut self.noise_rng, true)?;
        let mut g = out.grads.unwrap_or_default();
        let norm = clip_global_norm(&mut g, self.cfg.clip_norm);
        Ok((out.loss.to_f64_lossy(), norm, g))
    }

    fn record(&mut self, loss: f64, grad_norm: f64, log: &mut dyn FnMut(&StepLog)) {
        self.step += 1;
        self.losses.push(loss);
        log(&StepLog {
            step: self.step,
            loss,
            grad_norm,
        });
    }
}

fn require_items<R>(items: &[TrainItem<R>], need_video: bool) -> Result<()> {
    if items.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if need_video && items.iter().any(|i| i.avclip.is_none()) {
        return Err(Error::Data("adapter training items need video features".into()));
    }
    Ok(())
}

/// Trains every backbone parameter on text-conditioned latents.
pub fn pretrain_backbone<R: Real>(
    bb: &mut Backbone<R>,
    items: &[TrainItem<R>],
    cfg: &TrainConfig,
    sched: &ScheduleConfig,
    log: &mut dyn FnMut(&StepLog),
) -> Result<TrainSummary> {
    if cfg.phase != TrainPhase::Backbone {
        return Err(Error::Config("pretrain_backbone needs the backbone phase".into()));
    }
    require_items(items, false)?;
    if let Some(i) = items.iter().find(|i| i.z0.shape() != [bb.config().frames, bb.config().latent_channels]) {
        return Err(Error::Data(alloc::format!("latent shape {:?} does not fit the backbone", i.z0.shape())));
    }
    let mut lp = Loop::new(cfg, sched)?;
    bb.set_trainable(true);
    let before = bb.fingerprint();
    for _ in 0..cfg.steps {
        let batch = lp.batch(items);
        let (loss, norm, g) = lp.grads(&BackbonePredictor(bb), &batch)?;
        lp.opt.step(&mut [("", bb)], &g)?;
        lp.record(loss, norm, log);
    }
    Ok(TrainSummary {
        steps: lp.step,
        losses: lp.losses,
        fingerprint_before: before,
        fingerprint_after: bb.fingerprint(),
    })
}

/// Trains the adapter and feature blocks against a frozen backbone.
///
/// The backbone fingerprint is compared before and after; any change is reported as
/// [`Error::FrozenViolation`].
#[allow(clippy::too_many_arguments)]
pub fn train_adapter<R: Real>(
    bb: &mut Backbone<R>,
    adapter: &mut Adapter<R>,
    features: &mut FeaturePreprocessor<R>,
    items: &[TrainItem<R>],
    finetune_items: &[TrainItem<R>],
    cfg: &TrainConfig,
    sched: &ScheduleConfig,
    log: &mut dyn FnMut(&StepLog),
) -> Result<TrainSummary> {
    if cfg.phase != TrainPhase::Adapter {
        return Err(Error::Config("train_adapter needs the adapter phase".into()));
    }
    require_items(items, true)?;
    if cfg.finetune_steps > 0 {
        require_items(finetune_items, true)?;
    }
    bb.set_trainable(false);
    let before = bb.fingerprint();
    let mut lp = Loop::new(cfg, sched)?;
    for stage in [(items, cfg.steps), (finetune_items, cfg.finetune_steps)] {
        for _ in 0..stage.1 {
            let batch = lp.batch(stage.0);
            let model = AdapterPredictor {
                backbone: bb,
                adapter,
                features,
            };
            let (loss, norm, g) = lp.grads(&model, &batch)?;
            lp.opt.step(&mut [("adapter", adapter), ("features", features)], &g)?;
            lp.record(loss, norm, log);
        }
    }
    let after = bb.fingerprint();
    if after != before {
        return Err(Error::FrozenViolation { before, after });
    }
    Ok(TrainSummary {
        steps: lp.step,
        losses: lp.losses,
        fingerprint_before: before,
        fingerprint_after: after,
    })
}

/// Shapes needed to rebuild every model in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub adapter: Option<AdapterConfig>,
    pub features: Option<FeatureConfig>,
    pub variant: Option<FeatureVariant>,
}

/// A backbone with an optional trained adapter and feature preprocessor.
#[derive(Debug, Clone)]
pub struct Models<R> {
    pub backbone: Backbone<R>,
    pub adapter: Option<Adapter<R>>,
    pub features: Option<FeaturePreprocessor<R>>,
}

impl<R: Real> Models<R> {
    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.config().clone(),
            adapter: self.adapter.as_ref().map(|a| a.config().clone()),
            features: self.features.as_ref().map(|f| f.config().clone()),
            variant: self.features.as_ref().map(|f| f.variant()),
        }
    }
}

impl<R: Real> Parameters<R> for Models<R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<R>)) {
        self.backbone.visit(&crate::tensor::join(prefix, "backbone"), f);
        if let Some(a) = &self.adapter {
            a.visit(&crate::tensor::join(prefix, "adapter"), f);
        }
        if let Some(p) = &self.features {
            p.visit(&crate::tensor::join(prefix, "features"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<R>)) {
        self.backbone.visit_mut(&crate::tensor::join(prefix, "backbone"), f);
        if let Some(a) = &mut self.adapter {
            a.visit_mut(&crate::tensor::join(prefix, "adapter"), f);
        }
        if let Some(p) = &mut self.features {
            p.visit_mut(&crate::tensor::join(prefix, "features"), f);
        }
    }
}

/// Everything needed to resume sampling or evaluation from a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub phase: TrainPhase,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
    /// Parameter path and value, in visiting order.
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub backbone_fingerprint: String,
    pub steps: u64,
    pub seed: u64,
}

impl Checkpoint {
    pub fn capture(
        models: &Models<f32>,
        train: &TrainConfig,
        schedule: &ScheduleConfig,
        steps: u64,
    ) -> Self {
        let mut tensors = Vec::new();
        models.visit("", &mut |name, p| {
            let mut t = p.value.clone();
            t.requires_grad = false;
            tensors.push((String::from(name), t));
        });
        Self {
            format_version: CHECKPOINT_VERSION,
            phase: train.phase,
            model: models.config(),
            train: train.clone(),
            schedule: *schedule,
            tensors,
            backbone_fingerprint: models.backbone.fingerprint(),
            steps,
            seed: train.seed,
        }
    }

    /// Rebuilds the models and checks the stored backbone fingerprint.
    ///
    /// The backbone comes back frozen when an adapter is present.
    pub fn restore(&self) -> Result<Models<f32>> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::Data(alloc::format!("unsupported checkpoint version {}", self.format_version)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let backbone = Backbone::new(&self.model.backbone, &mut rng)?;
        let adapter = match &self.model.adapter {
            Some(c) => Some(Adapter::from_backbone(&backbone, c)?),
            None => None,
        };
        let features = match (&self.model.features, self.model.variant) {
            (Some(c), Some(v)) => Some(FeaturePreprocessor::new(c, v, &mut rng)?),
            (None, None) => None,
            _ => return Err(Error::Data("feature config and variant must be stored together".into())),
        };
        let mut models = Models {
            backbone,
            adapter,
            features,
        };
        let stored: BTreeMap<&str, &Tensor<f32>> = self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        if stored.len() != self.tensors.len() {
            return Err(Error::Data("duplicate tensor names in checkpoint".into()));
        }
        let mut seen = 0usize;
        let mut failure = None;
        models.visit_mut("", &mut |name, p| {
            match stored.get(name) {
                Some(t) if t.shape() == p.value.shape() => {
                    let trainable = p.value.requires_grad;
                    p.value = (*t).clone();
                    p.value.requires_grad = trainable;
                    seen += 1;
                }
                Some(t) => {
                    failure.get_or_insert(alloc::format!("{name}: stored shape {:?}, expected {:?}", t.shape(), p.value.shape()));
                }
                None => {
                    failure.get_or_insert(alloc::format!("missing tensor {name}"));
                }
            }
        });
        if let Some(f) = failure {
            return Err(Error::Data(f));
        }
        if seen != stored.len() {
            return Err(Error::Data("checkpoint has tensors the model does not use".into()));
        }
        if models.adapter.is_some() {
            models.backbone.set_trainable(false);
        }
        let fp = models.backbone.fingerprint();
        if fp != self.backbone_fingerprint {
            return Err(Error::Data(alloc::format!(
                "backbone fingerprint {fp} does not match stored {}",
                self.backbone_fingerprint
            )));
        }
        Ok(models)
    }
}

/// Fresh backbone from the run seed.
pub fn init_backbone(cfg: &BackboneConfig, seed: u64) -> Result<Backbone<f32>> {
    Backbone::new(cfg, &mut stream(seed, Stream::Init))
}

/// Fresh adapter and feature blocks on top of a pretrained backbone.
pub fn init_adapter(
    bb: &Backbone<f32>,
    acfg: &AdapterConfig,
    fcfg: &FeatureConfig,
    variant: FeatureVariant,
    seed: u64,
) -> Result<(Adapter<f32>, FeaturePreprocessor<f32>)> {
    if acfg.feature_width != fcfg.hidden_dim {
        return Err(Error::Config(alloc::format!(
            "adapter feature width {} differs from preprocessor output {}",
            acfg.feature_width,
            fcfg.hidden_dim
        )));
    }
    let adapter = Adapter::from_backbone(bb, acfg)?;
    let features = FeaturePreprocessor::new(fcfg, variant, &mut stream(seed, Stream::Init))?;
    Ok((adapter, features))
}

/// Parameter bytes of a model, for exact before/after comparisons.
pub fn parameter_fingerprint<R: Real, M: Parameters<R> + ?Sized>(model: &M) -> String {
    fingerprint(model)
}
