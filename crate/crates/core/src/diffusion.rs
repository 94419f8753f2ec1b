//! Noise schedules, forward corruption, the v-parameterization, the denoising loss,
//! guidance rules and a deterministic first-order sampler.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::TextCondition;
use crate::error::{dim_err, Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Per-step `alpha` and cumulative `alpha_bar` tables.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

const MAX_BETA: f64 = 0.999;

impl NoiseSchedule {
    pub fn new(num_steps: usize, kind: ScheduleKind) -> Result<Self> {
        if num_steps < 2 {
            return Err(Error::Config(alloc::format!(
                "a noise schedule needs at least 2 steps, got {num_steps}"
            )));
        }
        let n = num_steps as f64;
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => {
                // the usual 1e-4..0.02 range over 1000 steps, rescaled to `num_steps`
                let scale = 1000.0 / n;
                let (lo, hi) = (scale * 1e-4, (scale * 0.02).min(MAX_BETA));
                (0..num_steps)
                    .map(|i| (lo + (hi - lo) * i as f64 / (n - 1.0)).min(MAX_BETA))
                    .collect()
            }
            ScheduleKind::Cosine => {
                let s = 0.008;
                let f = |t: f64| libm::cos((t / n + s) / (1.0 + s) * FRAC_PI_2).powi(2);
                (0..num_steps)
                    .map(|i| (1.0 - f(i as f64 + 1.0) / f(i as f64)).min(MAX_BETA))
                    .collect()
            }
        };
        let alpha: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(num_steps);
        let mut acc = 1.0;
        for &a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let last = alpha_bar[num_steps - 1];
        if !(last > 0.0 && last < 0.01) {
            return Err(Error::Config(alloc::format!(
                "terminal alpha_bar {last} does not reach the near-noise regime"
            )));
        }
        Ok(Self { kind, alpha, alpha_bar })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::Index {
                what: "diffusion timestep",
                index: t,
                len: self.len(),
            });
        }
        Ok(())
    }

    /// `(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))`.
    pub fn coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check(t)?;
        let ab = self.alpha_bar[t];
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    /// Uniformly spaced descending timesteps from `len - 1` down to 0.
    pub fn sampling_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.len() {
            return Err(Error::Config(alloc::format!(
                "sampling steps must be in 1..={}, got {steps}",
                self.len()
            )));
        }
        let last = (self.len() - 1) as f64;
        if steps == 1 {
            return Ok(alloc::vec![self.len() - 1]);
        }
        Ok((0..steps)
            .map(|i| libm::round(last * (steps - 1 - i) as f64 / (steps - 1) as f64) as usize)
            .collect())
    }
}

/// `a * x + b * y`, elementwise.
fn affine<R: Real>(x: &Tensor<R>, a: f64, y: &Tensor<R>, b: f64, op: &'static str) -> Result<Tensor<R>> {
    let (a, b) = (R::lit(a), R::lit(b));
    x.zip_map(y, op, |u, v| a * u + b * v)
}

/// One Markov corruption step: `sqrt(alpha_t) * z_prev + sqrt(1 - alpha_t) * eps`.
pub fn forward_step<R: Real>(z_prev: &Tensor<R>, t: usize, eps: &Tensor<R>, sched: &NoiseSchedule) -> Result<Tensor<R>> {
    sched.check(t)?;
    let a = sched.alpha[t];
    affine(z_prev, a.sqrt(), eps, (1.0 - a).sqrt(), "forward_step")
}

/// Closed-form marginal: `sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_marginal<R: Real>(z0: &Tensor<R>, t: usize, eps: &Tensor<R>, sched: &NoiseSchedule) -> Result<Tensor<R>> {
    let (s, n) = sched.coefficients(t)?;
    affine(z0, s, eps, n, "forward_marginal")
}

/// `v = sqrt(alpha_bar_t) * eps - sqrt(1 - alpha_bar_t) * z0`.
pub fn v_from<R: Real>(z0: &Tensor<R>, eps: &Tensor<R>, t: usize, sched: &NoiseSchedule) -> Result<Tensor<R>> {
    let (s, n) = sched.coefficients(t)?;
    affine(eps, s, z0, -n, "v_from")
}

/// Inverts the v-parameterization: returns `(z0_hat, eps_hat)`.
pub fn recover_z0_eps<R: Real>(
    z_t: &Tensor<R>,
    v: &Tensor<R>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<(Tensor<R>, Tensor<R>)> {
    let (s, n) = sched.coefficients(t)?;
    Ok((
        affine(z_t, s, v, -n, "recover_z0_eps")?,
        affine(z_t, n, v, s, "recover_z0_eps")?,
    ))
}

/// Classifier-free guidance scale and the asymmetric adapter scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceParams {
    pub gamma: f64,
    pub alpha_asym: f64,
}

impl Default for GuidanceParams {
    fn default() -> Self {
        Self {
            gamma: 7.0,
            alpha_asym: 0.5,
        }
    }
}

impl GuidanceParams {
    pub fn new(gamma: f64, alpha_asym: f64) -> Result<Self> {
        let g = Self { gamma, alpha_asym };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::Parameter(alloc::format!("guidance scale {} must be finite and >= 0", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.alpha_asym) {
            return Err(Error::Parameter(alloc::format!(
                "asymmetric scale {} outside [0, 1]",
                self.alpha_asym
            )));
        }
        Ok(())
    }
}

/// `uncond + gamma * (cond - uncond)`, evaluated as `gamma * cond + (1 - gamma) * uncond`
/// so that `gamma = 1` and `gamma = 0` return their operand exactly.
pub fn guided_prediction<R: Real>(cond: &Tensor<R>, uncond: &Tensor<R>, gamma: f64) -> Result<Tensor<R>> {
    affine(cond, gamma, uncond, 1.0 - gamma, "guided_prediction")
}

/// Everything a sampler needs besides the latent: text, video features and guidance.
#[derive(Debug, Clone)]
pub struct ConditionBundle<R> {
    pub text: TextCondition,
    /// Preprocessed video features on the latent grid (`T x P`), when an adapter is used.
    pub video: Option<Tensor<R>>,
    pub guide: GuidanceParams,
}

/// A model evaluating its conditional and unconditional v-predictions in one call.
pub trait Denoiser<R: Real> {
    fn predict_pair(&self, z_t: &Tensor<R>, t: usize, cond: &ConditionBundle<R>) -> Result<(Tensor<R>, Tensor<R>)>;
}

/// Deterministic first-order sampler over `steps` uniformly spaced timesteps.
///
/// Starts from a seeded Gaussian latent of `shape`, applies guidance in v-space,
/// and returns the final clean-latent estimate.
pub fn sample<R: Real, D: Denoiser<R> + ?Sized>(
    model: &D,
    cond: &ConditionBundle<R>,
    sched: &NoiseSchedule,
    steps: usize,
    seed: u64,
    shape: &[usize],
) -> Result<Tensor<R>> {
    cond.guide.validate()?;
    let ts = sched.sampling_timesteps(steps)?;
    let mut rng = crate::rng::stream(seed, crate::rng::Stream::Sampling);
    let mut z = Tensor::randn(shape, 1.0, &mut rng);
    for (i, &t) in ts.iter().enumerate() {
        let (vc, vu) = model.predict_pair(&z, t, cond)?;
        let v = guided_prediction(&vc, &vu, cond.guide.gamma)?;
        let (z0, eps) = recover_z0_eps(&z, &v, t, sched)?;
        match ts.get(i + 1) {
            Some(&next) => {
                let (s, n) = sched.coefficients(next)?;
                z = affine(&z0, s, &eps, n, "sample")?;
            }
            None => return Ok(z0),
        }
    }
    unreachable!("timestep list is never empty")
}

/// One training example: a clean latent, its text label and optional raw video streams.
#[derive(Debug, Clone)]
pub struct TrainItem<R> {
    pub z0: Tensor<R>,
    pub text: TextCondition,
    /// Fine-grained stream on the latent grid.
    pub avclip: Option<Tensor<R>>,
    /// Coarse stream already resampled and padded onto the latent grid.
    pub clip: Option<Tensor<R>>,
}

/// A differentiable v-predictor used by [`training_loss`].
pub trait VPredictor<R: Real>: Sync {
    fn predict_v(
        &self,
        tape: &mut Tape<R>,
        z_t: Var,
        t: usize,
        text: TextCondition,
        item: &TrainItem<R>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var>;
}

/// Result of [`training_loss`].
#[derive(Debug, Clone)]
pub struct LossOutput<R> {
    pub loss: R,
    pub per_item: Vec<R>,
    /// Gradients of the batch-mean loss, when requested.
    pub grads: Option<BTreeMap<ParamId, Vec<R>>>,
    /// How many items had their text replaced by the null condition.
    pub null_conditions: usize,
}

struct Draw<R> {
    t: usize,
    eps: Tensor<R>,
    drop: bool,
    dropout_seed: u64,
}

/// Mean v-prediction error over a batch.
///
/// Per item: a uniform timestep, Gaussian noise, the marginal corruption, and with
/// probability `cond_drop_p` the null text condition. All randomness is drawn from
/// `rng` before any model evaluation, so results do not depend on evaluation order.
pub fn training_loss<R: Real, M: VPredictor<R>>(
    model: &M,
    batch: &[&TrainItem<R>],
    sched: &NoiseSchedule,
    cond_drop_p: f64,
    rng: &mut ChaCha8Rng,
    with_grads: bool,
) -> Result<LossOutput<R>> {
    if batch.is_empty() {
        return Err(Error::Contract("training_loss needs a non-empty batch".into()));
    }
    if !(0.0..1.0).contains(&cond_drop_p) {
        return Err(Error::Parameter(alloc::format!("condition dropout {cond_drop_p} outside [0, 1)")));
    }
    let draws: Vec<Draw<R>> = batch
        .iter()
        .map(|item| Draw {
            t: rng.random_range(0..sched.len()),
            eps: Tensor::randn(item.z0.shape(), 1.0, rng),
            drop: cond_drop_p > 0.0 && rng.random::<f64>() < cond_drop_p,
            dropout_seed: rng.random(),
        })
        .collect();
    let jobs: Vec<(&TrainItem<R>, &Draw<R>)> = batch.iter().copied().zip(&draws).collect();
    let results = crate::par_map(&jobs, |(item, d)| -> Result<(R, Option<BTreeMap<ParamId, Vec<R>>>)> {
        let z_t = forward_marginal(&item.z0, d.t, &d.eps, sched)?;
        let target = v_from(&item.z0, &d.eps, d.t, sched)?;
        let text = if d.drop { TextCondition::Null } else { item.text };
        let mut tape = if with_grads { Tape::new() } else { Tape::inference() };
        let zv = tape.constant(&z_t);
        let mut item_rng = ChaCha8Rng::seed_from_u64(d.dropout_seed);
        let pred = model.predict_v(&mut tape, zv, d.t, text, item, &mut item_rng)?;
        let tv = tape.constant(&target);
        let l = tape.mse(pred, tv)?;
        let grads = if with_grads { Some(tape.backward(l)?.into_param_map()) } else { None };
        Ok((tape.scalar(l), grads))
    });
    let b = R::from_usize(batch.len()).unwrap();
    let mut per_item = Vec::with_capacity(batch.len());
    let mut total: Option<BTreeMap<ParamId, Vec<R>>> = None;
    for r in results {
        let (l, g) = r?;
        per_item.push(l);
        if let Some(g) = g {
            match total.as_mut() {
                None => total = Some(g),
                Some(acc) => {
                    for (id, gv) in g {
                        match acc.get_mut(&id) {
                            Some(a) => a.iter_mut().zip(&gv).for_each(|(x, y)| *x = *x + *y),
                            None => {
                                acc.insert(id, gv);
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(acc) = total.as_mut() {
        for g in acc.values_mut() {
            g.iter_mut().for_each(|x| *x = *x / b);
        }
    }
    let loss = per_item.iter().copied().sum::<R>() / b;
    if !loss.is_finite() {
        return Err(Error::Contract("training loss is not finite".into()));
    }
    Ok(LossOutput {
        loss,
        per_item,
        grads: total,
        null_conditions: draws.iter().filter(|d| d.drop).count(),
    })
}

/// Shape check shared by callers that pair two latents.
pub fn same_shape<R: Real>(a: &Tensor<R>, b: &Tensor<R>, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err(op, a.shape(), b.shape()));
    }
    Ok(())
}
