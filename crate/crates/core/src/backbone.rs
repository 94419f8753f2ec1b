//! The frozen text-to-latent diffusion transformer.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::{Dense, LayerNorm, MlpBlock, SelfAttention};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::{join, Param, Parameters, Tensor};

/// Text label of a clip, or the learned null condition used for the unconditional path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextCondition {
    Class(usize),
    Null,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub latent_channels: usize,
    pub frames: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    pub classes: usize,
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            latent_channels: 8,
            frames: 216,
            hidden: 32,
            blocks: 2,
            heads: 4,
            classes: 12,
            mlp_ratio: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("latent_channels", self.latent_channels),
            ("frames", self.frames),
            ("hidden", self.hidden),
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("classes", self.classes),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(alloc::format!("{name} must be positive")));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(alloc::format!(
                "hidden width {} not divisible by {} heads",
                self.hidden,
                self.heads
            )));
        }
        if self.hidden % 2 != 0 {
            return Err(Error::Config("hidden width must be even for the timestep embedding".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count of [`Backbone`].
    pub fn param_count(&self) -> usize {
        let (c, t, h, k) = (self.latent_channels, self.frames, self.hidden, self.classes);
        let dense = |i: usize, o: usize| i * o + o;
        let block = 2 * (2 * h) + dense(h, 3 * h) + dense(h, h) + dense(h, self.mlp_ratio * h)
            + dense(self.mlp_ratio * h, h)
            + dense(h, 6 * h);
        dense(c, h) + t * h + dense(h, h) + (k + 1) * h + self.blocks * block + 2 * h + dense(h, 2 * h) + dense(h, c)
    }
}

/// Transformer block with adaptive layer-norm shift, scale and gate from the conditioning vector.
#[derive(Debug, Clone)]
pub struct DitBlock<R> {
    pub norm1: LayerNorm<R>,
    pub attn: SelfAttention<R>,
    pub norm2: LayerNorm<R>,
    pub mlp: MlpBlock<R>,
    pub modulation: Dense<R>,
}

impl<R: Real> DitBlock<R> {
    pub fn new<G: Rng + ?Sized>(hidden: usize, heads: usize, mlp_ratio: usize, rng: &mut G) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(hidden),
            attn: SelfAttention::new(hidden, heads, rng)?,
            norm2: LayerNorm::new(hidden),
            mlp: MlpBlock::new(hidden, mlp_ratio * hidden, rng),
            modulation: Dense::new(hidden, 6 * hidden, rng),
        })
    }

    /// `x` is `T x H`; `cond` is the activated `1 x H` conditioning vector.
    pub fn forward(&self, tape: &mut Tape<R>, x: Var, cond: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, x)?;
        let width = tape.shape(h)[1];
        let m = self.modulation.forward(tape, cond)?;
        let part = |tape: &mut Tape<R>, i: usize| tape.slice_cols(m, i * width, width);
        let (shift1, scale1, gate1) = (part(tape, 0)?, part(tape, 1)?, part(tape, 2)?);
        let (shift2, scale2, gate2) = (part(tape, 3)?, part(tape, 4)?, part(tape, 5)?);

        let h = tape.modulate(h, shift1, scale1)?;
        let a = self.attn.forward(tape, h)?;
        let a = tape.mul_row(a, gate1)?;
        let x = tape.add(x, a)?;

        let h = self.norm2.forward(tape, x)?;
        let h = tape.modulate(h, shift2, scale2)?;
        let f = self.mlp.forward(tape, h)?;
        let f = tape.mul_row(f, gate2)?;
        tape.add(x, f)
    }

    pub fn cast<S: Real>(&self) -> DitBlock<S> {
        DitBlock {
            norm1: self.norm1.cast(),
            attn: self.attn.cast(),
            norm2: self.norm2.cast(),
            mlp: self.mlp.cast(),
            modulation: self.modulation.cast(),
        }
    }
}

impl<R: Real> Parameters<R> for DitBlock<R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<R>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
        self.modulation.visit(&join(prefix, "modulation"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<R>)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
        self.modulation.visit_mut(&join(prefix, "modulation"), f);
    }
}

/// Additive adapter signals on the tape: one for the latent input, one per block.
#[derive(Debug, Clone, Default)]
pub struct Injections {
    pub input: Option<Var>,
    pub blocks: Vec<Option<Var>>,
}

/// Tensor-valued adapter signals for [`backbone_forward`].
#[derive(Debug, Clone, Default)]
pub struct InjectionBundle<R> {
    /// `T x C`, added to the noisy latent before the input projection.
    pub input: Option<Tensor<R>>,
    /// One `T x H` tensor per block, added to each block's output.
    pub blocks: Option<Vec<Tensor<R>>>,
}

/// Conditioning shared by the backbone and adapter trunks.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning {
    /// Timestep embedding added to every token.
    pub time: Var,
    /// Activated timestep + text vector feeding the adaptive norms.
    pub cond: Var,
}

#[derive(Debug, Clone)]
pub struct Backbone<R> {
    cfg: BackboneConfig,
    pub input_proj: Dense<R>,
    pub positions: Param<R>,
    pub time_proj: Dense<R>,
    /// `(classes + 1) x H`; the last row is the learned null condition.
    pub class_table: Param<R>,
    pub blocks: Vec<DitBlock<R>>,
    pub final_norm: LayerNorm<R>,
    pub final_modulation: Dense<R>,
    pub output_proj: Dense<R>,
}

/// Sinusoidal features of a diffusion timestep, `1 x width`.
pub fn timestep_features<R: Real>(t: usize, width: usize) -> Tensor<R> {
    let half = width / 2;
    let mut v = Vec::with_capacity(width);
    let freqs: Vec<f64> = (0..half)
        .map(|i| libm::exp(-libm::log(10_000.0) * i as f64 / half as f64))
        .collect();
    v.extend(freqs.iter().map(|f| R::lit(libm::sin(t as f64 * f))));
    v.extend(freqs.iter().map(|f| R::lit(libm::cos(t as f64 * f))));
    Tensor::from_vec(&[1, width], v).expect("width is positive")
}

impl<R: Real> Backbone<R> {
    pub fn new<G: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut G) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden;
        let input_proj = Dense::new(cfg.latent_channels, h, rng);
        let positions = Param::new(Tensor::randn(&[cfg.frames, h], 0.1, rng));
        let time_proj = Dense::new(h, h, rng);
        let class_table = Param::new(Tensor::randn(&[cfg.classes + 1, h], 0.5, rng));
        let blocks = (0..cfg.blocks)
            .map(|_| DitBlock::new(h, cfg.heads, cfg.mlp_ratio, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            input_proj,
            positions,
            time_proj,
            class_table,
            blocks,
            final_norm: LayerNorm::new(h),
            final_modulation: Dense::new(h, 2 * h, rng),
            output_proj: Dense::new(h, cfg.latent_channels, rng),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn class_row(&self, c: TextCondition) -> Result<usize> {
        match c {
            TextCondition::Null => Ok(self.cfg.classes),
            TextCondition::Class(k) if k < self.cfg.classes => Ok(k),
            TextCondition::Class(k) => Err(Error::Index {
                what: "text class",
                index: k,
                len: self.cfg.classes,
            }),
        }
    }

    /// Embedding row of a text condition (the null row for [`TextCondition::Null`]).
    pub fn embed_condition(&self, c: TextCondition) -> Result<Tensor<R>> {
        let row = self.class_row(c)?;
        Tensor::from_vec(&[1, self.cfg.hidden], self.class_table.value.row(row).to_vec())
    }

    pub fn conditioning(&self, tape: &mut Tape<R>, t: usize, c: TextCondition) -> Result<Conditioning> {
        let row = self.class_row(c)?;
        let feats = tape.constant(&timestep_features(t, self.cfg.hidden));
        let time = self.time_proj.forward(tape, feats)?;
        let table = tape.param(&self.class_table);
        let text = tape.gather_row(table, row)?;
        let sum = tape.add(time, text)?;
        Ok(Conditioning {
            time,
            cond: tape.gelu(sum),
        })
    }

    /// Projects a `T x C` latent to `T x H` tokens with positional and timestep embeddings.
    pub fn embed_tokens(&self, tape: &mut Tape<R>, z: Var, cond: &Conditioning) -> Result<Var> {
        let shape = tape.shape(z);
        if shape != [self.cfg.frames, self.cfg.latent_channels] {
            return Err(crate::error::dim_err(
                "backbone input",
                shape,
                &[self.cfg.frames, self.cfg.latent_channels],
            ));
        }
        let x = self.input_proj.forward(tape, z)?;
        let pos = tape.param(&self.positions);
        let x = tape.add(x, pos)?;
        tape.add_row(x, cond.time)
    }

    /// v-prediction for a noisy latent, with optional additive injections.
    pub fn forward(
        &self,
        tape: &mut Tape<R>,
        z_t: Var,
        t: usize,
        c: TextCondition,
        inj: &Injections,
    ) -> Result<Var> {
        let cond = self.conditioning(tape, t, c)?;
        self.forward_conditioned(tape, z_t, &cond, inj)
    }

    /// [`Backbone::forward`] with a precomputed conditioning, shared with an adapter trunk.
    pub fn forward_conditioned(
        &self,
        tape: &mut Tape<R>,
        z_t: Var,
        cond: &Conditioning,
        inj: &Injections,
    ) -> Result<Var> {
        if !inj.blocks.is_empty() && inj.blocks.len() != self.blocks.len() {
            return Err(Error::Config(alloc::format!(
                "{} block injections for {} blocks",
                inj.blocks.len(),
                self.blocks.len()
            )));
        }
        let cond = *cond;
        let z = match inj.input {
            Some(i) => tape.add(z_t, i)?,
            None => z_t,
        };
        let mut x = self.embed_tokens(tape, z, &cond)?;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(tape, x, cond.cond)?;
            if let Some(Some(b)) = inj.blocks.get(i) {
                x = tape.add(x, *b)?;
            }
        }
        let h = self.cfg.hidden;
        let m = self.final_modulation.forward(tape, cond.cond)?;
        let shift = tape.slice_cols(m, 0, h)?;
        let scale = tape.slice_cols(m, h, h)?;
        let x = self.final_norm.forward(tape, x)?;
        let x = tape.modulate(x, shift, scale)?;
        self.output_proj.forward(tape, x)
    }

    pub fn cast<S: Real>(&self) -> Backbone<S> {
        Backbone {
            cfg: self.cfg.clone(),
            input_proj: self.input_proj.cast(),
            positions: self.positions.cast(),
            time_proj: self.time_proj.cast(),
            class_table: self.class_table.cast(),
            blocks: self.blocks.iter().map(|b| b.cast()).collect(),
            final_norm: self.final_norm.cast(),
            final_modulation: self.final_modulation.cast(),
            output_proj: self.output_proj.cast(),
        }
    }

    /// SHA-256 over every parameter name, shape and value, in visit order.
    pub fn fingerprint(&self) -> String {
        fingerprint(self)
    }
}

/// Order-stable SHA-256 of a model's parameters, as lowercase hex.
pub fn fingerprint<R: Real, M: Parameters<R> + ?Sized>(model: &M) -> String {
    let mut h = Sha256::new();
    model.visit("", &mut |name, p| {
        h.update((name.len() as u32).to_le_bytes());
        h.update(name.as_bytes());
        h.update((p.value.shape().len() as u32).to_le_bytes());
        for d in p.value.shape() {
            h.update((*d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            h.update(v.to_f64_lossy().to_bits().to_le_bytes());
        }
    });
    hex::encode(h.finalize())
}

impl<R: Real> Parameters<R> for Backbone<R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<R>)) {
        self.input_proj.visit(&join(prefix, "input_proj"), f);
        f(&join(prefix, "positions"), &self.positions);
        self.time_proj.visit(&join(prefix, "time_proj"), f);
        f(&join(prefix, "class_table"), &self.class_table);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &alloc::format!("blocks.{i}")), f);
        }
        self.final_norm.visit(&join(prefix, "final_norm"), f);
        self.final_modulation.visit(&join(prefix, "final_modulation"), f);
        self.output_proj.visit(&join(prefix, "output_proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<R>)) {
        self.input_proj.visit_mut(&join(prefix, "input_proj"), f);
        f(&join(prefix, "positions"), &mut self.positions);
        self.time_proj.visit_mut(&join(prefix, "time_proj"), f);
        f(&join(prefix, "class_table"), &mut self.class_table);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &alloc::format!("blocks.{i}")), f);
        }
        self.final_norm.visit_mut(&join(prefix, "final_norm"), f);
        self.final_modulation.visit_mut(&join(prefix, "final_modulation"), f);
        self.output_proj.visit_mut(&join(prefix, "output_proj"), f);
    }
}

/// Tensor-level forward pass of the backbone alone.
pub fn backbone_forward<R: Real>(
    bb: &Backbone<R>,
    z_t: &Tensor<R>,
    t: usize,
    c: TextCondition,
    inj: &InjectionBundle<R>,
) -> Result<Tensor<R>> {
    let mut tape = Tape::inference();
    let z = tape.constant(z_t);
    let mut vars = Injections {
        input: inj.input.as_ref().map(|i| tape.constant(i)),
        blocks: Vec::new(),
    };
    if let Some(blocks) = &inj.blocks {
        vars.blocks = blocks.iter().map(|b| Some(tape.constant(b))).collect();
    }
    let out = bb.forward(&mut tape, z, t, c, &vars)?;
    Ok(tape.tensor(out))
}
