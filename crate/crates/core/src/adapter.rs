//! Trainable modality adapter: copied backbone blocks reading video features,
//! bridged into the backbone through zero-initialized dense layers.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Conditioning, DitBlock, InjectionBundle, Injections, TextCondition};
use crate::error::{Error, Result};
use crate::layers::Dense;
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::{join, Param, Parameters, Tensor};

/// Where the unconditional-path scale is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AsymPoint {
    /// Scale trunk hidden states before the zero-FC projection.
    PreFc,
    /// Scale the projected injections.
    #[default]
    PostFc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidancePath {
    Conditional,
    Unconditional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    /// Width `P` of the preprocessed video features.
    pub feature_width: usize,
    pub asym_point: AsymPoint,
    /// Whether the input injection is scaled along with the block injections.
    pub scale_input: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            feature_width: 32,
            asym_point: AsymPoint::PostFc,
            scale_input: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adapter<R> {
    cfg: AdapterConfig,
    pub blocks: Vec<DitBlock<R>>,
    /// `P -> C`.
    pub zero_fc_in: Dense<R>,
    /// One `H -> H` layer per block.
    pub zero_fc_blocks: Vec<Dense<R>>,
}

/// Injections produced for one guidance path.
#[derive(Debug, Clone)]
pub struct AdapterOutput<R> {
    /// `T x C`.
    pub input_injection: Tensor<R>,
    /// `B` tensors of `T x H`.
    pub block_injections: Vec<Tensor<R>>,
    /// Trunk hidden states before projection, kept for pre-projection scaling.
    pub hidden: Vec<Tensor<R>>,
    /// Features the input injection was projected from.
    pub features: Tensor<R>,
    pub path: GuidancePath,
}

impl<R: Real> AdapterOutput<R> {
    pub fn into_bundle(self) -> InjectionBundle<R> {
        InjectionBundle {
            input: Some(self.input_injection),
            blocks: Some(self.block_injections),
        }
    }
}

/// Tape handles for the adapter's injections.
#[derive(Debug, Clone)]
pub struct TapeInjections {
    pub input: Var,
    pub blocks: Vec<Var>,
    pub hidden: Vec<Var>,
}

impl TapeInjections {
    pub fn as_injections(&self) -> Injections {
        Injections {
            input: Some(self.input),
            blocks: self.blocks.iter().map(|&b| Some(b)).collect(),
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Parameter(alloc::format!("asymmetric scale {alpha} outside [0, 1]")));
    }
    Ok(())
}

impl<R: Real> Adapter<R> {
    /// Copies every backbone block and zero-initializes the bridges.
    pub fn from_backbone(bb: &Backbone<R>, cfg: &AdapterConfig) -> Result<Self> {
        if cfg.feature_width == 0 {
            return Err(Error::Config("adapter feature width must be positive".into()));
        }
        let bc = bb.config();
        let mut blocks = bb.blocks.clone();
        for b in &mut blocks {
            b.set_trainable(true);
        }
        Ok(Self {
            cfg: cfg.clone(),
            blocks,
            zero_fc_in: Dense::zeros(cfg.feature_width, bc.latent_channels),
            zero_fc_blocks: (0..bc.blocks).map(|_| Dense::zeros(bc.hidden, bc.hidden)).collect(),
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.cfg
    }

    pub fn set_asym_point(&mut self, point: AsymPoint) {
        self.cfg.asym_point = point;
    }

    pub fn set_scale_input(&mut self, on: bool) {
        self.cfg.scale_input = on;
    }

    pub fn bridges_are_zero(&self) -> bool {
        self.zero_fc_in.is_zero() && self.zero_fc_blocks.iter().all(|d| d.is_zero())
    }

    fn check_compatible(&self, bb: &Backbone<R>) -> Result<()> {
        if self.blocks.len() != bb.blocks.len() {
            return Err(Error::Config(alloc::format!(
                "adapter has {} blocks, backbone has {}",
                self.blocks.len(),
                bb.blocks.len()
            )));
        }
        Ok(())
    }

    /// Runs the trunk on the tape. `hidden_scale` multiplies trunk states before the
    /// block projections (pre-projection scaling); `None` leaves them untouched.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<R>,
        bb: &Backbone<R>,
        z_t: Var,
        cond: &Conditioning,
        features: Var,
        hidden_scale: Option<R>,
    ) -> Result<TapeInjections> {
        self.check_compatible(bb)?;
        let (zr, fr) = (tape.shape(z_t)[0], tape.shape(features)[0]);
        if zr != fr {
            return Err(Error::Alignment { expected: zr, actual: fr });
        }
        let input = self.zero_fc_in.forward(tape, features)?;
        let z = tape.add(z_t, input)?;
        let mut x = bb.embed_tokens(tape, z, cond)?;
        let mut hidden = Vec::with_capacity(self.blocks.len());
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (block, fc) in self.blocks.iter().zip(&self.zero_fc_blocks) {
            x = block.forward(tape, x, cond.cond)?;
            hidden.push(x);
            let h = match hidden_scale {
                Some(s) => tape.scale(x, s),
                None => x,
            };
            blocks.push(fc.forward(tape, h)?);
        }
        Ok(TapeInjections { input, blocks, hidden })
    }

    /// Unscaled injections for one path.
    pub fn forward(
        &self,
        bb: &Backbone<R>,
        z_t: &Tensor<R>,
        t: usize,
        c: TextCondition,
        features: &Tensor<R>,
        path: GuidancePath,
    ) -> Result<AdapterOutput<R>> {
        let mut tape = Tape::inference();
        let z = tape.constant(z_t);
        let f = tape.constant(features);
        let cond = bb.conditioning(&mut tape, t, c)?;
        let out = self.forward_tape(&mut tape, bb, z, &cond, f, None)?;
        Ok(AdapterOutput {
            input_injection: tape.tensor(out.input),
            block_injections: out.blocks.iter().map(|&b| tape.tensor(b)).collect(),
            hidden: out.hidden.iter().map(|&h| tape.tensor(h)).collect(),
            features: features.clone(),
            path,
        })
    }

    /// Attenuates the unconditional path's contribution by `alpha`; the conditional
    /// path passes through unchanged.
    pub fn apply_asymmetric_scale(&self, out: AdapterOutput<R>, alpha: f64) -> Result<AdapterOutput<R>> {
        check_alpha(alpha)?;
        if out.path == GuidancePath::Conditional {
            return Ok(out);
        }
        let a = R::lit(alpha);
        let mut out = out;
        match self.cfg.asym_point {
            AsymPoint::PostFc => {
                for b in &mut out.block_injections {
                    *b = b.scale(a);
                }
            }
            AsymPoint::PreFc => {
                let mut tape = Tape::inference();
                for (b, (h, fc)) in out.block_injections.iter_mut().zip(out.hidden.iter().zip(&self.zero_fc_blocks)) {
                    let hv = tape.constant(&h.scale(a));
                    let y = fc.forward(&mut tape, hv)?;
                    *b = tape.tensor(y);
                }
            }
        }
        if self.cfg.scale_input {
            out.input_injection = match self.cfg.asym_point {
                AsymPoint::PostFc => out.input_injection.scale(a),
                AsymPoint::PreFc => {
                    let mut tape = Tape::inference();
                    let fv = tape.constant(&out.features.scale(a));
                    let y = self.zero_fc_in.forward(&mut tape, fv)?;
                    tape.tensor(y)
                }
            };
        }
        Ok(out)
    }

    pub fn cast<S: Real>(&self) -> Adapter<S> {
        Adapter {
            cfg: self.cfg.clone(),
            blocks: self.blocks.iter().map(|b| b.cast()).collect(),
            zero_fc_in: self.zero_fc_in.cast(),
            zero_fc_blocks: self.zero_fc_blocks.iter().map(|d| d.cast()).collect(),
        }
    }
}

/// Tensor-level post-projection scaling of an output, independent of adapter weights.
pub fn apply_asymmetric_scale<R: Real>(
    out: AdapterOutput<R>,
    alpha: f64,
    scale_input: bool,
) -> Result<AdapterOutput<R>> {
    check_alpha(alpha)?;
    if out.path == GuidancePath::Conditional {
        return Ok(out);
    }
    let a = R::lit(alpha);
    let mut out = out;
    for b in &mut out.block_injections {
        *b = b.scale(a);
    }
    if scale_input {
        out.input_injection = out.input_injection.scale(a);
    }
    Ok(out)
}

impl<R: Real> Parameters<R> for Adapter<R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<R>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &alloc::format!("blocks.{i}")), f);
        }
        self.zero_fc_in.visit(&join(prefix, "zero_fc_in"), f);
        for (i, d) in self.zero_fc_blocks.iter().enumerate() {
            d.visit(&join(prefix, &alloc::format!("zero_fc_blocks.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<R>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &alloc::format!("blocks.{i}")), f);
        }
        self.zero_fc_in.visit_mut(&join(prefix, "zero_fc_in"), f);
        for (i, d) in self.zero_fc_blocks.iter_mut().enumerate() {
            d.visit_mut(&join(prefix, &alloc::format!("zero_fc_blocks.{i}")), f);
        }
    }
}
