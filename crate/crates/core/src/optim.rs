//! AdamW with decoupled weight decay and global gradient-norm clipping.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{ParamId, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(alloc::format!("invalid AdamW settings {self:?}")))
        }
    }
}

/// First and second moment estimates of one tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments<R> {
    pub m: Vec<R>,
    pub v: Vec<R>,
}

/// One AdamW update of `params` in place; `step` counts from 1.
/// Empty moments are initialized to zeros.
pub fn adamw_step<R: Real>(
    params: &mut [R],
    grads: &[R],
    state: &mut Moments<R>,
    step: u64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Contract(alloc::format!(
            "gradient length {} does not match parameter length {}",
            grads.len(),
            params.len()
        )));
    }
    if state.m.is_empty() && state.v.is_empty() {
        state.m = alloc::vec![R::zero(); params.len()];
        state.v = alloc::vec![R::zero(); params.len()];
    }
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Contract("optimizer state does not match parameter shape".into()));
    }
    if step == 0 {
        return Err(Error::Contract("AdamW steps are counted from 1".into()));
    }
    let (b1, b2) = (R::lit(cfg.beta1), R::lit(cfg.beta2));
    let c1 = R::lit(1.0 - libm::pow(cfg.beta1, step as f64));
    let c2 = R::lit(1.0 - libm::pow(cfg.beta2, step as f64));
    let lr = R::lit(cfg.lr);
    let eps = R::lit(cfg.eps);
    let decay = R::one() - lr * R::lit(cfg.weight_decay);
    let one = R::one();
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let mh = *m / c1;
        let vh = *v / c2;
        *p = *p * decay - lr * mh / (vh.sqrt() + eps);
    }
    Ok(())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm<R: Real>(grads: &mut BTreeMap<ParamId, Vec<R>>, max_norm: f64) -> f64 {
    let total = libm::sqrt(
        grads
            .values()
            .flat_map(|g| g.iter())
            .map(|&x| {
                let x = x.to_f64_lossy();
                x * x
            })
            .sum::<f64>(),
    );
    if total > max_norm && total > 0.0 {
        let s = R::lit(max_norm / total);
        grads.values_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x = *x * s);
    }
    total
}

/// AdamW over named parameters; moments are keyed by parameter path.
#[derive(Debug, Clone)]
pub struct AdamW<R> {
    pub cfg: AdamWConfig,
    step: u64,
    state: BTreeMap<String, Moments<R>>,
}

impl<R: Real> AdamW<R> {
    pub fn new(cfg: AdamWConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            step: 0,
            state: BTreeMap::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter of `models` that received a gradient.
    pub fn step(&mut self, models: &mut [(&str, &mut dyn Parameters<R>)], grads: &BTreeMap<ParamId, Vec<R>>) -> Result<()> {
        self.step += 1;
        let (step, cfg) = (self.step, self.cfg);
        let mut failure = None;
        for (prefix, model) in models.iter_mut() {
            model.visit_mut(prefix, &mut |name, p| {
                if !p.value.requires_grad || failure.is_some() {
                    return;
                }
                let Some(g) = grads.get(&p.id()) else { return };
                let st = self.state.entry(String::from(name)).or_default();
                if let Err(e) = adamw_step(p.value.data_mut(), g, st, step, &cfg) {
                    failure = Some(e);
                }
            });
        }
        failure.map_or(Ok(()), Err)
    }
}
