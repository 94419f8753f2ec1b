//! Backbone + adapter wiring for sampling and for the two training phases.

use rand_chacha::ChaCha8Rng;

use crate::adapter::{Adapter, GuidancePath};
use crate::backbone::{backbone_forward, Backbone, InjectionBundle, Injections, TextCondition};
use crate::diffusion::{ConditionBundle, Denoiser, TrainItem, VPredictor};
use crate::error::{Error, Result};
use crate::features::{FeaturePreprocessor, FeatureVariant};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Guided denoiser over a frozen backbone with an optional adapter.
#[derive(Debug, Clone, Copy)]
pub struct GuidedModel<'a, R> {
    pub backbone: &'a Backbone<R>,
    pub adapter: Option<&'a Adapter<R>>,
    /// When false the unconditional injections are never rescaled.
    pub asymmetric: bool,
}

impl<'a, R: Real> GuidedModel<'a, R> {
    pub fn backbone_only(backbone: &'a Backbone<R>) -> Self {
        Self {
            backbone,
            adapter: None,
            asymmetric: false,
        }
    }

    pub fn with_adapter(backbone: &'a Backbone<R>, adapter: &'a Adapter<R>) -> Self {
        Self {
            backbone,
            adapter: Some(adapter),
            asymmetric: true,
        }
    }

    /// Unconditional-branch v-prediction for the given guidance parameters.
    pub fn unconditional(&self, z_t: &Tensor<R>, t: usize, cond: &ConditionBundle<R>) -> Result<Tensor<R>> {
        let bundle = self.path_injections(z_t, t, TextCondition::Null, cond, GuidancePath::Unconditional)?;
        backbone_forward(self.backbone, z_t, t, TextCondition::Null, &bundle)
    }

    fn path_injections(
        &self,
        z_t: &Tensor<R>,
        t: usize,
        text: TextCondition,
        cond: &ConditionBundle<R>,
        path: GuidancePath,
    ) -> Result<InjectionBundle<R>> {
        let (Some(adapter), Some(video)) = (self.adapter, cond.video.as_ref()) else {
            return Ok(InjectionBundle::default());
        };
        let mut out = adapter.forward(self.backbone, z_t, t, text, video, path)?;
        if self.asymmetric {
            out = adapter.apply_asymmetric_scale(out, cond.guide.alpha_asym)?;
        }
        Ok(out.into_bundle())
    }
}

impl<R: Real> Denoiser<R> for GuidedModel<'_, R> {
    fn predict_pair(&self, z_t: &Tensor<R>, t: usize, cond: &ConditionBundle<R>) -> Result<(Tensor<R>, Tensor<R>)> {
        if self.adapter.is_some() && cond.video.is_none() {
            return Err(Error::Contract("adapter sampling needs preprocessed video features".into()));
        }
        let ci = self.path_injections(z_t, t, cond.text, cond, GuidancePath::Conditional)?;
        let vc = backbone_forward(self.backbone, z_t, t, cond.text, &ci)?;
        let vu = self.unconditional(z_t, t, cond)?;
        Ok((vc, vu))
    }
}

/// Text-only predictor used while pretraining the backbone.
#[derive(Debug, Clone, Copy)]
pub struct BackbonePredictor<'a, R>(pub &'a Backbone<R>);

impl<R: Real> VPredictor<R> for BackbonePredictor<'_, R> {
    fn predict_v(
        &self,
        tape: &mut Tape<R>,
        z_t: Var,
        t: usize,
        text: TextCondition,
        _: &TrainItem<R>,
        _: &mut ChaCha8Rng,
    ) -> Result<Var> {
        self.0.forward(tape, z_t, t, text, &Injections::default())
    }
}

/// Full system predictor used while training the adapter and feature blocks.
#[derive(Debug, Clone, Copy)]
pub struct AdapterPredictor<'a, R> {
    pub backbone: &'a Backbone<R>,
    pub adapter: &'a Adapter<R>,
    pub features: &'a FeaturePreprocessor<R>,
}

/// Puts an item's raw streams on the tape as preprocessor inputs.
pub fn feature_inputs<R: Real>(
    tape: &mut Tape<R>,
    pre: &FeaturePreprocessor<R>,
    item: &TrainItem<R>,
) -> Result<(Var, Option<Var>)> {
    let avclip = item
        .avclip
        .as_ref()
        .ok_or_else(|| Error::Contract("adapter training needs the segment video stream".into()))?;
    let seg = tape.constant(avclip);
    let coarse = match pre.variant() {
        FeatureVariant::Segment => None,
        FeatureVariant::Fused => {
            let clip = item
                .clip
                .as_ref()
                .ok_or_else(|| Error::Contract("fused preprocessing needs the aligned 5 FPS stream".into()))?;
            Some(tape.constant(clip))
        }
    };
    Ok((seg, coarse))
}

impl<R: Real> VPredictor<R> for AdapterPredictor<'_, R> {
    fn predict_v(
        &self,
        tape: &mut Tape<R>,
        z_t: Var,
        t: usize,
        text: TextCondition,
        item: &TrainItem<R>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let (seg, coarse) = feature_inputs(tape, self.features, item)?;
        let ev = self.features.forward(tape, seg, coarse, true, rng)?;
        let cond = self.backbone.conditioning(tape, t, text)?;
        let inj = self.adapter.forward_tape(tape, self.backbone, z_t, &cond, ev, None)?;
        self.backbone.forward_conditioned(tape, z_t, &cond, &inj.as_injections())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterConfig;
    use crate::backbone::BackboneConfig;
    use crate::diffusion::{sample, GuidanceParams, NoiseSchedule, ScheduleKind};
    use crate::tensor::{Param, Parameters};
    use rand::SeedableRng;

    fn parts(seed: u64) -> (Backbone<f32>, Adapter<f32>, Tensor<f32>) {
        let cfg = BackboneConfig {
            latent_channels: 2,
            frames: 8,
            hidden: 8,
            blocks: 2,
            heads: 2,
            classes: 3,
            mlp_ratio: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bb = Backbone::new(&cfg, &mut rng).unwrap();
        let ad = Adapter::from_backbone(
            &bb,
            &AdapterConfig {
                feature_width: 4,
                ..AdapterConfig::default()
            },
        )
        .unwrap();
        let video = Tensor::randn(&[8, 4], 1.0, &mut rng);
        (bb, ad, video)
    }

    fn bundle(video: &Tensor<f32>, gamma: f64, alpha: f64) -> ConditionBundle<f32> {
        ConditionBundle {
            text: TextCondition::Class(1),
            video: Some(video.clone()),
            guide: GuidanceParams::new(gamma, alpha).unwrap(),
        }
    }

    fn perturb(ad: &mut Adapter<f32>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ad.visit_mut("", &mut |name, p| {
            if name.starts_with("zero_fc") {
                *p = Param::new(Tensor::randn(p.value.shape(), 0.2, &mut rng));
            }
        });
    }

    #[test]
    fn fresh_adapter_samples_like_the_backbone() {
        let (bb, ad, video) = parts(1);
        let sched = NoiseSchedule::new(100, ScheduleKind::Cosine).unwrap();
        let full = GuidedModel::with_adapter(&bb, &ad);
        let alone = GuidedModel::backbone_only(&bb);
        for (seed, gamma, alpha) in [(0, 7.0, 0.5), (3, 1.0, 1.0), (4, 3.0, 0.0)] {
            let c = bundle(&video, gamma, alpha);
            let a = sample(&full, &c, &sched, 10, seed, &[8, 2]).unwrap();
            let b = sample(&alone, &c, &sched, 10, seed, &[8, 2]).unwrap();
            assert!(a.bit_eq(&b), "seed {seed}");
        }
    }

    #[test]
    fn unit_alpha_matches_plain_guidance() {
        let (bb, mut ad, video) = parts(2);
        perturb(&mut ad, 5);
        let sched = NoiseSchedule::new(100, ScheduleKind::Cosine).unwrap();
        let asym = GuidedModel::with_adapter(&bb, &ad);
        let plain = GuidedModel { asymmetric: false, ..asym };
        let c = bundle(&video, 7.0, 1.0);
        let a = sample(&asym, &c, &sched, 10, 8, &[8, 2]).unwrap();
        let b = sample(&plain, &c, &sched, 10, 8, &[8, 2]).unwrap();
        assert!(a.bit_eq(&b));
        let lower = sample(&asym, &bundle(&video, 7.0, 0.5), &sched, 10, 8, &[8, 2]).unwrap();
        assert!(!a.bit_eq(&lower));
    }

    #[test]
    fn zero_alpha_unconditional_is_the_backbone() {
        let (bb, mut ad, video) = parts(3);
        perturb(&mut ad, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::randn(&[8, 2], 1.0, &mut rng);
        let model = GuidedModel::with_adapter(&bb, &ad);
        let c = bundle(&video, 7.0, 0.0);
        let (vc, vu) = model.predict_pair(&z, 50, &c).unwrap();
        let (bc, bu) = GuidedModel::backbone_only(&bb).predict_pair(&z, 50, &c).unwrap();
        assert!(vu.bit_eq(&bu));
        assert!(!vc.bit_eq(&bc));
    }

    #[test]
    fn adapter_sampling_requires_video() {
        let (bb, ad, _) = parts(4);
        let model = GuidedModel::with_adapter(&bb, &ad);
        let c = ConditionBundle {
            text: TextCondition::Null,
            video: None,
            guide: GuidanceParams::default(),
        };
        let z = Tensor::zeros(&[8, 2]);
        assert!(matches!(model.predict_pair(&z, 0, &c), Err(Error::Contract(_))));
    }
}
