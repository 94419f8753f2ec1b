//! Synthetic scenes with two independent axes: class content and event timing.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::TextCondition;
use crate::diffusion::TrainItem;
use crate::error::{Error, Result};
use crate::features::{align_clip_stream, FeatureConfig, FeatureStream, RateKind};
use crate::rng::{derive_seed, stream_at, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub classes: usize,
    pub frames: usize,
    pub latent_channels: usize,
    pub feature_dim: usize,
    pub clip_frames: usize,
    /// Coarse stream length after interpolation, before edge padding.
    pub interp_frames: usize,
    pub scene_seconds: f64,
    /// Latent frames covered by one burst.
    pub latent_burst: usize,
    pub feature_burst: usize,
    pub latent_gain: f64,
    pub feature_gain: f64,
    pub latent_noise: f64,
    pub feature_noise: f64,
    pub class_bias: f64,
    pub max_similarity: f64,
    pub max_events: usize,
    pub min_separation: f64,
    /// Events stay this far from either end of the scene.
    pub edge_margin: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 12,
            frames: 216,
            latent_channels: 8,
            feature_dim: 16,
            clip_frames: 50,
            interp_frames: 200,
            scene_seconds: 10.0,
            latent_burst: 9,
            feature_burst: 5,
            latent_gain: 8.0,
            feature_gain: 9.0,
            latent_noise: 0.05,
            feature_noise: 0.1,
            class_bias: 0.2,
            max_similarity: 0.25,
            max_events: 4,
            min_separation: 1.0,
            edge_margin: 0.25,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Parameter(alloc::format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.latent_burst == 0 || self.latent_burst > self.frames || self.feature_burst == 0 || self.feature_burst > self.frames {
            return Err(Error::Config("burst lengths must lie in 1..=frames".into()));
        }
        if self.latent_channels == 0 || self.feature_dim == 0 || self.clip_frames < 2 || self.interp_frames > self.frames || self.max_events == 0 {
            return Err(Error::Config("empty synthetic dimension".into()));
        }
        let usable = self.scene_seconds - 2.0 * self.edge_margin;
        if !(usable > 0.0) || (self.max_events - 1) as f64 * self.min_separation > usable {
            return Err(Error::Config("events do not fit in the scene".into()));
        }
        Ok(())
    }

    /// Latent frames per second.
    pub fn frame_rate(&self) -> f64 {
        self.frames as f64 / self.scene_seconds
    }

    pub fn event_frame(&self, t: f64) -> usize {
        (libm::round(t * self.frame_rate()) as usize).min(self.frames - 1)
    }

    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            raw_dim: self.feature_dim,
            frames: self.frames,
            clip_frames: self.clip_frames,
            interp_frames: self.interp_frames,
            ..FeatureConfig::default()
        }
    }
}

/// Per-class content: a latent burst, a video feature burst, and a slow video bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSignature {
    pub class_id: usize,
    /// `E x C`, unit Frobenius norm.
    pub latent_template: Tensor<f64>,
    /// `E' x D`, unit Frobenius norm.
    pub feature_template: Tensor<f64>,
    /// Unit `D`-vector present in every video frame of the class.
    pub bias: Vec<f64>,
}

/// Hann profile over `n` frames with unit sum of squares.
pub fn burst_envelope(n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n)
        .map(|i| {
            let s = libm::sin(core::f64::consts::PI * (i + 1) as f64 / (n + 1) as f64);
            s * s
        })
        .collect();
    let norm = libm::sqrt(w.iter().map(|x| x * x).sum::<f64>());
    w.into_iter().map(|x| x / norm).collect()
}

fn unit_vector<G: Rng + ?Sized>(dim: usize, rng: &mut G) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn burst_template<G: Rng + ?Sized>(len: usize, dim: usize, rng: &mut G) -> Tensor<f64> {
    let env = burst_envelope(len);
    let mut data = Vec::with_capacity(len * dim);
    for w in env {
        data.extend(unit_vector(dim, rng).into_iter().map(|x| x * w));
    }
    Tensor::from_vec(&[len, dim], data).expect("template shape")
}

/// Largest absolute correlation between two equal-width templates over every relative shift.
pub fn max_shifted_correlation(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let (na, nb) = (a.rows() as isize, b.rows() as isize);
    let mut best = 0.0f64;
    for lag in -(nb - 1)..na {
        let mut s = 0.0;
        for i in 0..na {
            let j = i - lag;
            if (0..nb).contains(&j) {
                s += a.row(i as usize).iter().zip(b.row(j as usize)).map(|(x, y)| x * y).sum::<f64>();
            }
        }
        best = best.max(s.abs());
    }
    best
}

const MAX_TRIES: usize = 20_000;

/// Draws `cfg.classes` signatures whose latent templates stay below `cfg.max_similarity`
/// against each other at every shift.
pub fn make_signatures(cfg: &SynthConfig, seed: u64) -> Result<Vec<ClassSignature>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "signatures", 0));
    let mut out: Vec<ClassSignature> = Vec::with_capacity(cfg.classes);
    for k in 0..cfg.classes {
        let mut accepted = None;
        for _ in 0..MAX_TRIES {
            let cand = burst_template(cfg.latent_burst, cfg.latent_channels, &mut rng);
            if out
                .iter()
                .all(|s| max_shifted_correlation(&s.latent_template, &cand) < cfg.max_similarity)
            {
                accepted = Some(cand);
                break;
            }
        }
        let latent_template = accepted.ok_or_else(|| {
            Error::Generation(alloc::format!(
                "could not place class {k} below similarity {} after {MAX_TRIES} draws",
                cfg.max_similarity
            ))
        })?;
        out.push(ClassSignature {
            class_id: k,
            latent_template,
            feature_template: burst_template(cfg.feature_burst, cfg.feature_dim, &mut rng),
            bias: unit_vector(cfg.feature_dim, &mut rng),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: u64,
    pub video_class: usize,
    pub audio_class: usize,
    /// Seconds, sorted.
    pub event_times: Vec<f64>,
    pub seed: u64,
}

impl Scene {
    pub fn is_conflicted(&self) -> bool {
        self.audio_class != self.video_class
    }

    pub fn validate(&self, cfg: &SynthConfig) -> Result<()> {
        if self.video_class >= cfg.classes || self.audio_class >= cfg.classes {
            return Err(Error::Data(alloc::format!("scene {}: class out of range", self.scene_id)));
        }
        let sorted = self.event_times.windows(2).all(|w| w[1] - w[0] >= cfg.min_separation - 1e-9);
        let inside = self.event_times.iter().all(|&t| (0.0..cfg.scene_seconds).contains(&t));
        if !sorted || !inside {
            return Err(Error::Data(alloc::format!("scene {}: invalid event times", self.scene_id)));
        }
        Ok(())
    }
}

/// Uniform video class, 1 to `max_events` separated events, and for conflicted scenes an
/// audio class drawn from the other classes.
pub fn sample_scene<G: Rng + ?Sized>(rng: &mut G, conflict: bool, cfg: &SynthConfig) -> Scene {
    let video_class = rng.random_range(0..cfg.classes);
    let audio_class = if conflict {
        let k = rng.random_range(0..cfg.classes - 1);
        if k >= video_class { k + 1 } else { k }
    } else {
        video_class
    };
    let count = rng.random_range(1..=cfg.max_events);
    let (lo, hi) = (cfg.edge_margin, cfg.scene_seconds - cfg.edge_margin);
    let mut times: Vec<f64> = Vec::with_capacity(count);
    while times.len() < count {
        times.clear();
        for _ in 0..count {
            let t = rng.random_range(lo..hi);
            if times.iter().all(|&s| libm::fabs(s - t) >= cfg.min_separation) {
                times.push(t);
            } else {
                break;
            }
        }
    }
    times.sort_by(f64::total_cmp);
    Scene {
        scene_id: 0,
        video_class,
        audio_class,
        event_times: times,
        seed: rng.random(),
    }
}

/// Scene `i` of a split depends only on `(seed, i)`.
pub fn generate_scenes(n: usize, conflict_ratio: f64, seed: u64, cfg: &SynthConfig) -> Result<Vec<Scene>> {
    if n == 0 {
        return Err(Error::Parameter("scene count must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&conflict_ratio) {
        return Err(Error::Parameter(alloc::format!("conflict ratio {conflict_ratio} outside [0, 1]")));
    }
    cfg.validate()?;
    let ids: Vec<u64> = (0..n as u64).collect();
    Ok(crate::par_map(&ids, |&i| {
        let mut rng = stream_at(seed, Stream::Data, i);
        let conflict = rng.random::<f64>() < conflict_ratio;
        let mut s = sample_scene(&mut rng, conflict, cfg);
        s.scene_id = i;
        s
    }))
}

fn signature<'a>(sigs: &'a [ClassSignature], k: usize) -> Result<&'a ClassSignature> {
    sigs.get(k).ok_or(Error::Index {
        what: "class signatures",
        index: k,
        len: sigs.len(),
    })
}

fn add_burst(out: &mut [f64], frames: usize, dim: usize, center: usize, template: &Tensor<f64>, gain: f64) {
    let half = template.rows() / 2;
    for f in 0..template.rows() {
        let pos = center as isize - half as isize + f as isize;
        if (0..frames as isize).contains(&pos) {
            let row = &mut out[pos as usize * dim..(pos as usize + 1) * dim];
            row.iter_mut().zip(template.row(f)).for_each(|(o, &x)| *o += gain * x);
        }
    }
}

fn noise(len: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len)
        .map(|_| sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

fn to_f32(shape: &[usize], data: Vec<f64>) -> Tensor<f32> {
    Tensor::from_vec(shape, data.into_iter().map(|x| x as f32).collect()).expect("rendered shape")
}

/// Segment stream (`frames x D`) and 5 FPS stream (`clip_frames x D`) of the video class.
pub fn render_video_features(
    scene: &Scene,
    sigs: &[ClassSignature],
    cfg: &SynthConfig,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let sig = signature(sigs, scene.video_class)?;
    let (t, d) = (cfg.frames, cfg.feature_dim);
    let mut rng = stream_at(scene.seed, Stream::Data, 1);
    let mut seg = noise(t * d, cfg.feature_noise, &mut rng);
    for row in seg.chunks_mut(d) {
        row.iter_mut().zip(&sig.bias).for_each(|(o, b)| *o += cfg.class_bias * b);
    }
    for &e in &scene.event_times {
        add_burst(&mut seg, t, d, cfg.event_frame(e), &sig.feature_template, cfg.feature_gain);
    }

    let n = cfg.clip_frames;
    let dt = cfg.scene_seconds / n as f64;
    let raw = noise(n * d, cfg.feature_noise, &mut rng);
    let mut clip = Vec::with_capacity(n * d);
    for j in 0..n {
        let tj = (j as f64 + 0.5) * dt;
        let slow = 1.0 + 0.25 * libm::sin(2.0 * core::f64::consts::PI * tj / cfg.scene_seconds);
        let bump: f64 = scene
            .event_times
            .iter()
            .map(|&e| 0.5 * libm::exp(-(tj - e) * (tj - e) / (2.0 * 0.3 * 0.3)))
            .sum();
        for c in 0..d {
            // three-tap smoothing of the noise
            let lo = j.saturating_sub(1);
            let hi = (j + 1).min(n - 1);
            let nz = (raw[lo * d + c] + raw[j * d + c] + raw[hi * d + c]) / 3.0;
            clip.push((slow + bump) * sig.bias[c] + nz);
        }
    }
    Ok((to_f32(&[t, d], seg), to_f32(&[n, d], clip)))
}

/// Near-silent latent with the audio class burst at every event frame.
pub fn render_target_latent(scene: &Scene, sigs: &[ClassSignature], cfg: &SynthConfig) -> Result<Tensor<f32>> {
    let sig = signature(sigs, scene.audio_class)?;
    let (t, c) = (cfg.frames, cfg.latent_channels);
    let mut rng = stream_at(scene.seed, Stream::Data, 0);
    let mut z = noise(t * c, cfg.latent_noise, &mut rng);
    for &e in &scene.event_times {
        add_burst(&mut z, t, c, cfg.event_frame(e), &sig.latent_template, cfg.latent_gain);
    }
    Ok(to_f32(&[t, c], z))
}

/// All tensors of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedScene {
    pub scene: Scene,
    pub latent: Tensor<f32>,
    pub avclip: Tensor<f32>,
    /// Raw 5 FPS stream.
    pub clip: Tensor<f32>,
}

impl RenderedScene {
    pub fn render(scene: &Scene, sigs: &[ClassSignature], cfg: &SynthConfig) -> Result<Self> {
        scene.validate(cfg)?;
        let (avclip, clip) = render_video_features(scene, sigs, cfg)?;
        Ok(Self {
            scene: scene.clone(),
            latent: render_target_latent(scene, sigs, cfg)?,
            avclip,
            clip,
        })
    }

    pub fn clip_stream(&self, cfg: &SynthConfig) -> FeatureStream<f32> {
        FeatureStream {
            rate_kind: RateKind::Fps5Grid,
            frames: self.clip.clone(),
            scene_seconds: cfg.scene_seconds,
        }
    }

    /// Training example labelled with the audio class; the coarse stream is aligned to the latent grid.
    pub fn train_item(&self, cfg: &SynthConfig) -> Result<TrainItem<f32>> {
        Ok(TrainItem {
            z0: self.latent.clone(),
            text: TextCondition::Class(self.scene.audio_class),
            avclip: Some(self.avclip.clone()),
            clip: Some(align_clip_stream(&self.clip_stream(cfg), &cfg.feature_config())?),
        })
    }
}

/// Renders every scene, in parallel when available.
pub fn render_all(scenes: &[Scene], sigs: &[ClassSignature], cfg: &SynthConfig) -> Result<Vec<RenderedScene>> {
    crate::par_map(scenes, |s| RenderedScene::render(s, sigs, cfg))
        .into_iter()
        .collect()
}
