//! Temporal alignment of raw video feature streams onto the latent grid and the
//! learned transformation blocks that turn them into adapter inputs.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Dense, Dropout, LayerNorm};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::{join, Param, Parameters, Tensor};

/// Frame grid a raw stream lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateKind {
    /// Overlapping segments, one per latent frame (216 per 10 s).
    SegmentGrid,
    /// Frame-level features sampled at 5 frames per second.
    Fps5Grid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStream<R> {
    pub rate_kind: RateKind,
    /// `N x D`.
    pub frames: Tensor<R>,
    pub scene_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub raw_dim: usize,
    pub hidden_dim: usize,
    /// Latent frames per scene.
    pub frames: usize,
    /// 5 FPS frames per scene.
    pub clip_frames: usize,
    /// Length the coarse stream is interpolated to before padding.
    pub interp_frames: usize,
    pub dropout: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            raw_dim: 16,
            hidden_dim: 32,
            frames: 216,
            clip_frames: 50,
            interp_frames: 200,
            dropout: 0.1,
        }
    }
}

/// Which video streams the preprocessor consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureVariant {
    /// Fine-grained segment stream only.
    Segment,
    /// Segment stream fused with the coarse 5 FPS stream.
    Fused,
}

/// Per-channel linear interpolation from `N` to `target_len` frames with endpoints kept.
pub fn linear_resample<R: Real>(frames: &Tensor<R>, target_len: usize) -> Result<Tensor<R>> {
    let (n, d) = (frames.rows(), frames.cols());
    if n < 2 || target_len < 2 {
        return Err(Error::Contract(alloc::format!(
            "linear resampling needs at least 2 input and output frames, got {n} -> {target_len}"
        )));
    }
    let mut out = Vec::with_capacity(target_len * d);
    let span = (n - 1) as f64 / (target_len - 1) as f64;
    for i in 0..target_len {
        let pos = i as f64 * span;
        let lo = (libm::floor(pos) as usize).min(n - 2);
        let w = R::lit(pos - lo as f64);
        let (a, b) = (frames.row(lo), frames.row(lo + 1));
        out.extend(a.iter().zip(b).map(|(&x, &y)| x + (y - x) * w));
    }
    Tensor::from_vec(&[target_len, d], out)
}

/// Pads to `target_len` frames by repeating the edge frames; the extra frame goes
/// to the right when the padding is odd.
pub fn pad_symmetric<R: Real>(frames: &Tensor<R>, target_len: usize) -> Result<Tensor<R>> {
    let (m, d) = (frames.rows(), frames.cols());
    if target_len < m {
        return Err(Error::Contract(alloc::format!(
            "cannot pad {m} frames down to {target_len}"
        )));
    }
    let left = (target_len - m) / 2;
    let right = target_len - m - left;
    let mut out = Vec::with_capacity(target_len * d);
    for _ in 0..left {
        out.extend_from_slice(frames.row(0));
    }
    out.extend_from_slice(frames.data());
    for _ in 0..right {
        out.extend_from_slice(frames.row(m - 1));
    }
    Tensor::from_vec(&[target_len, d], out)
}

/// Brings a 5 FPS stream onto the latent grid: interpolate, then pad.
pub fn align_clip_stream<R: Real>(stream: &FeatureStream<R>, cfg: &FeatureConfig) -> Result<Tensor<R>> {
    if stream.rate_kind != RateKind::Fps5Grid {
        return Err(Error::Contract("coarse path expects a 5 FPS stream".into()));
    }
    if stream.frames.rows() != cfg.clip_frames {
        return Err(Error::Alignment {
            expected: cfg.clip_frames,
            actual: stream.frames.rows(),
        });
    }
    let interp = linear_resample(&stream.frames, cfg.interp_frames)?;
    pad_symmetric(&interp, cfg.frames)
}

/// `dense -> ReLU -> layer norm -> dropout`.
#[derive(Debug, Clone)]
pub struct TransformBlock<R> {
    pub dense: Dense<R>,
    pub norm: LayerNorm<R>,
    pub dropout: Dropout,
}

impl<R: Real> TransformBlock<R> {
    pub fn new<G: Rng + ?Sized>(input: usize, output: usize, dropout: f64, rng: &mut G) -> Result<Self> {
        Ok(Self {
            dense: Dense::new(input, output, rng),
            norm: LayerNorm::new(output),
            dropout: Dropout::new(dropout)?,
        })
    }

    pub fn forward<G: Rng + ?Sized>(&self, tape: &mut Tape<R>, x: Var, training: bool, rng: &mut G) -> Result<Var> {
        let h = self.dense.forward(tape, x)?;
        let h = tape.relu(h);
        let h = self.norm.forward(tape, h)?;
        self.dropout.forward(tape, h, training, rng)
    }

    pub fn cast<S: Real>(&self) -> TransformBlock<S> {
        TransformBlock {
            dense: self.dense.cast(),
            norm: self.norm.cast(),
            dropout: self.dropout,
        }
    }
}

impl<R: Real> Parameters<R> for TransformBlock<R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<R>)) {
        self.dense.visit(&join(prefix, "dense"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<R>)) {
        self.dense.visit_mut(&join(prefix, "dense"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

/// Learned preprocessing from raw streams to the adapter's `T x P` feature grid.
#[derive(Debug, Clone)]
pub struct FeaturePreprocessor<R> {
    cfg: FeatureConfig,
    variant: FeatureVariant,
    /// Width-preserving block on the segment stream.
    pub segment: TransformBlock<R>,
    /// Width-expanding block applied last.
    pub expand: TransformBlock<R>,
    /// Width-preserving block on the aligned coarse stream (fused variant only).
    pub coarse: Option<TransformBlock<R>>,
}

impl<R: Real> FeaturePreprocessor<R> {
    pub fn new<G: Rng + ?Sized>(cfg: &FeatureConfig, variant: FeatureVariant, rng: &mut G) -> Result<Self> {
        let (d, p) = (cfg.raw_dim, cfg.hidden_dim);
        let segment = TransformBlock::new(d, d, cfg.dropout, rng)?;
        let expand = TransformBlock::new(d, p, cfg.dropout, rng)?;
        let coarse = match variant {
            FeatureVariant::Fused => Some(TransformBlock::new(d, d, cfg.dropout, rng)?),
            FeatureVariant::Segment => None,
        };
        Ok(Self {
            cfg: cfg.clone(),
            variant,
            segment,
            expand,
            coarse,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn variant(&self) -> FeatureVariant {
        self.variant
    }

    /// `segment` is `T x D` on the latent grid; `coarse` (fused variant) is the already
    /// aligned `T x D` 5 FPS stream.
    pub fn forward<G: Rng + ?Sized>(
        &self,
        tape: &mut Tape<R>,
        segment: Var,
        coarse: Option<Var>,
        training: bool,
        rng: &mut G,
    ) -> Result<Var> {
        let rows = tape.shape(segment)[0];
        if rows != self.cfg.frames {
            return Err(Error::Alignment {
                expected: self.cfg.frames,
                actual: rows,
            });
        }
        let mut h = self.segment.forward(tape, segment, training, rng)?;
        match (&self.coarse, coarse) {
            (Some(block), Some(c)) => {
                let rows = tape.shape(c)[0];
                if rows != self.cfg.frames {
                    return Err(Error::Alignment {
                        expected: self.cfg.frames,
                        actual: rows,
                    });
                }
                let hc = block.forward(tape, c, training, rng)?;
                h = tape.add(h, hc)?;
            }
            (Some(_), None) => return Err(Error::Contract("fused preprocessing needs the 5 FPS stream".into())),
            (None, _) => {}
        }
        self.expand.forward(tape, h, training, rng)
    }

    pub fn cast<S: Real>(&self) -> FeaturePreprocessor<S> {
        FeaturePreprocessor {
            cfg: self.cfg.clone(),
            variant: self.variant,
            segment: self.segment.cast(),
            expand: self.expand.cast(),
            coarse: self.coarse.as_ref().map(|c| c.cast()),
        }
    }

    /// Inference-mode features for a segment stream alone.
    pub fn preprocess_avclip(&self, stream: &FeatureStream<R>) -> Result<Tensor<R>> {
        if stream.rate_kind != RateKind::SegmentGrid {
            return Err(Error::Contract("segment path expects a stream on the latent grid".into()));
        }
        let mut tape = Tape::inference();
        let s = tape.constant(&stream.frames);
        let mut h = self.segment.forward(&mut tape, s, false, &mut NoRng)?;
        h = self.expand.forward(&mut tape, h, false, &mut NoRng)?;
        Ok(tape.tensor(h))
    }

    /// Inference-mode features fusing both streams; the coarse stream is aligned here.
    pub fn preprocess_fused(&self, segment: &FeatureStream<R>, coarse: &FeatureStream<R>) -> Result<Tensor<R>> {
        if segment.rate_kind != RateKind::SegmentGrid {
            return Err(Error::Contract("segment path expects a stream on the latent grid".into()));
        }
        let aligned = align_clip_stream(coarse, &self.cfg)?;
        let mut tape = Tape::inference();
        let s = tape.constant(&segment.frames);
        let c = tape.constant(&aligned);
        let h = self.forward(&mut tape, s, Some(c), false, &mut NoRng)?;
        Ok(tape.tensor(h))
    }

    /// Inference-mode features for raw tensors on the latent grid (coarse already aligned).
    pub fn preprocess(&self, segment: &Tensor<R>, coarse: Option<&Tensor<R>>) -> Result<Tensor<R>> {
        let mut tape = Tape::inference();
        let s = tape.constant(segment);
        let c = coarse.map(|c| tape.constant(c));
        let h = self.forward(&mut tape, s, c, false, &mut NoRng)?;
        Ok(tape.tensor(h))
    }
}

impl<R: Real> Parameters<R> for FeaturePreprocessor<R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<R>)) {
        self.segment.visit(&join(prefix, "segment"), f);
        if let Some(c) = &self.coarse {
            c.visit(&join(prefix, "coarse"), f);
        }
        self.expand.visit(&join(prefix, "expand"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<R>)) {
        self.segment.visit_mut(&join(prefix, "segment"), f);
        if let Some(c) = &mut self.coarse {
            c.visit_mut(&join(prefix, "coarse"), f);
        }
        self.expand.visit_mut(&join(prefix, "expand"), f);
    }
}

/// Generator for inference paths where dropout is off and nothing is drawn.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("inference preprocessing draws no randomness")
    }

    fn next_u64(&mut self) -> u64 {
        unreachable!("inference preprocessing draws no randomness")
    }

    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("inference preprocessing draws no randomness")
    }
}
