//! Differentiable layers built on the tape.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::{join, Param, Parameters, Tensor};

/// Fully connected layer `y = x·w + b`.
#[derive(Debug, Clone)]
pub struct Dense<R> {
    pub w: Param<R>,
    pub b: Param<R>,
}

impl<R: Real> Dense<R> {
    /// Weights drawn from N(0, 1/in), zero bias.
    pub fn new<G: Rng + ?Sized>(input: usize, output: usize, rng: &mut G) -> Self {
        let std = 1.0 / (input as f64).sqrt();
        Self {
            w: Param::new(Tensor::randn(&[input, output], std, rng)),
            b: Param::new(Tensor::zeros(&[output])),
        }
    }

    /// All-zero weights and bias: contributes nothing until trained.
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Param::new(Tensor::zeros(&[input, output])),
            b: Param::new(Tensor::zeros(&[output])),
        }
    }

    pub fn input_width(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn output_width(&self) -> usize {
        self.w.value.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape<R>, x: Var) -> Result<Var> {
        let w = tape.param(&self.w);
        let b = tape.param(&self.b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    pub fn cast<S: Real>(&self) -> Dense<S> {
        Dense {
            w: self.w.cast(),
            b: self.b.cast(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.w.value.data().iter().chain(self.b.value.data()).all(|v| v.is_zero())
    }
}

impl<R: Real> Parameters<R> for Dense<R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<R>)) {
        f(&join(prefix, "w"), &self.w);
        f(&join(prefix, "b"), &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<R>)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNorm<R> {
    pub gain: Param<R>,
    pub bias: Param<R>,
}

impl<R: Real> LayerNorm<R> {
    pub fn new(width: usize) -> Self {
        Self {
            gain: Param::new(Tensor::ones(&[width])),
            bias: Param::new(Tensor::zeros(&[width])),
        }
    }

    pub fn forward(&self, tape: &mut Tape<R>, x: Var) -> Result<Var> {
        let g = tape.param(&self.gain);
        let b = tape.param(&self.bias);
        tape.layer_norm(x, g, b, R::lit(LAYER_NORM_EPS))
    }

    pub fn cast<S: Real>(&self) -> LayerNorm<S> {
        LayerNorm {
            gain: self.gain.cast(),
            bias: self.bias.cast(),
        }
    }
}

impl<R: Real> Parameters<R> for LayerNorm<R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<R>)) {
        f(&join(prefix, "gain"), &self.gain);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<R>)) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Inverted dropout: kept elements are rescaled by `1 / (1 - rate)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(alloc::format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Self { rate })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn forward<R: Real, G: Rng + ?Sized>(
        &self,
        tape: &mut Tape<R>,
        x: Var,
        training: bool,
        rng: &mut G,
    ) -> Result<Var> {
        if !training || self.rate == 0.0 {
            return Ok(x);
        }
        let keep = R::lit(1.0 / (1.0 - self.rate));
        let mask: Vec<R> = (0..tape.value(x).len())
            .map(|_| if rng.random::<f64>() < self.rate { R::zero() } else { keep })
            .collect();
        tape.mask(x, mask)
    }
}

/// Multi-head self-attention with a packed qkv projection and an output projection.
#[derive(Debug, Clone)]
pub struct SelfAttention<R> {
    pub qkv: Dense<R>,
    pub out: Dense<R>,
    pub heads: usize,
}

impl<R: Real> SelfAttention<R> {
    pub fn new<G: Rng + ?Sized>(width: usize, heads: usize, rng: &mut G) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(alloc::format!(
                "attention width {width} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            qkv: Dense::new(width, 3 * width, rng),
            out: Dense::new(width, width, rng),
            heads,
        })
    }

    pub fn forward(&self, tape: &mut Tape<R>, x: Var) -> Result<Var> {
        let qkv = self.qkv.forward(tape, x)?;
        let a = tape.attention(qkv, self.heads)?;
        self.out.forward(tape, a)
    }

    pub fn cast<S: Real>(&self) -> SelfAttention<S> {
        SelfAttention {
            qkv: self.qkv.cast(),
            out: self.out.cast(),
            heads: self.heads,
        }
    }
}

impl<R: Real> Parameters<R> for SelfAttention<R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<R>)) {
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<R>)) {
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// Two dense layers with a GELU in between.
#[derive(Debug, Clone)]
pub struct MlpBlock<R> {
    pub fc1: Dense<R>,
    pub fc2: Dense<R>,
}

impl<R: Real> MlpBlock<R> {
    pub fn new<G: Rng + ?Sized>(width: usize, hidden: usize, rng: &mut G) -> Self {
        Self {
            fc1: Dense::new(width, hidden, rng),
            fc2: Dense::new(hidden, width, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape<R>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, h)
    }

    pub fn cast<S: Real>(&self) -> MlpBlock<S> {
        MlpBlock {
            fc1: self.fc1.cast(),
            fc2: self.fc2.cast(),
        }
    }
}

impl<R: Real> Parameters<R> for MlpBlock<R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<R>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<R>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// `x·w + b` on plain tensors.
pub fn dense_forward<R: Real>(x: &Tensor<R>, w: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
    let mut tape = Tape::inference();
    let (x, w, b) = (tape.constant(x), tape.constant(w), tape.constant(b));
    let y = tape.matmul(x, w)?;
    let y = tape.add_row(y, b)?;
    Ok(tape.tensor(y))
}

pub fn layer_norm_forward<R: Real>(
    x: &Tensor<R>,
    gain: &Tensor<R>,
    bias: &Tensor<R>,
    eps: R,
) -> Result<Tensor<R>> {
    let mut tape = Tape::inference();
    let (x, g, b) = (tape.constant(x), tape.constant(gain), tape.constant(bias));
    let y = tape.layer_norm(x, g, b, eps)?;
    Ok(tape.tensor(y))
}

pub fn dropout_forward<R: Real, G: Rng + ?Sized>(
    x: &Tensor<R>,
    rate: f64,
    training: bool,
    rng: &mut G,
) -> Result<Tensor<R>> {
    let drop = Dropout::new(rate)?;
    let mut tape = Tape::inference();
    let xv = tape.constant(x);
    let y = drop.forward(&mut tape, xv, training, rng)?;
    Ok(tape.tensor(y))
}

pub fn self_attention_forward<R: Real>(x: &Tensor<R>, attn: &SelfAttention<R>) -> Result<Tensor<R>> {
    let mut tape = Tape::inference();
    let xv = tape.constant(x);
    let y = attn.forward(&mut tape, xv)?;
    Ok(tape.tensor(y))
}
