//! Template-matching metrics, the conflicting-condition evaluation and the α sweep.

use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::TextCondition;
use crate::diffusion::{sample, ConditionBundle, GuidanceParams, NoiseSchedule};
use crate::error::{Error, Result};
use crate::features::FeatureVariant;
use crate::rng::{derive_seed, stream_at, Stream};
use crate::synth::{generate_scenes, ClassSignature, RenderedScene, SynthConfig};
use crate::system::GuidedModel;
use crate::tensor::Tensor;
use crate::training::Models;

/// Lag window of the offset metric, in seconds.
pub const MAX_LAG_SECONDS: f64 = 2.5;
/// Scores below this are reported as no class.
pub const DECISION_FLOOR: f64 = 0.5;

fn frame_norms(z: &Tensor<f32>) -> Vec<f64> {
    (0..z.rows())
        .map(|r| libm::sqrt(z.row(r).iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>()))
        .collect()
}

fn median(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Per-frame norm minus its median.
pub fn energy_envelope(z: &Tensor<f32>) -> Vec<f64> {
    let n = frame_norms(z);
    let m = median(&n);
    n.into_iter().map(|x| x - m).collect()
}

/// Signed lag (frames) maximizing the correlation of the envelope with the event impulses.
/// Ties go to the smaller absolute lag, then to the negative one.
pub fn best_lag(z: &Tensor<f32>, event_times: &[f64], cfg: &SynthConfig) -> Result<isize> {
    if event_times.is_empty() {
        return Err(Error::Contract("temporal offset needs at least one event".into()));
    }
    if z.rows() != cfg.frames {
        return Err(Error::Alignment {
            expected: cfg.frames,
            actual: z.rows(),
        });
    }
    let env = energy_envelope(z);
    let max_lag = libm::round(MAX_LAG_SECONDS * cfg.frame_rate()) as isize;
    let frames: Vec<isize> = event_times.iter().map(|&t| cfg.event_frame(t) as isize).collect();
    let mut best = (f64::NEG_INFINITY, 0isize);
    for mag in 0..=max_lag {
        for lag in [-mag, mag] {
            let score: f64 = frames
                .iter()
                .map(|&f| f + lag)
                .filter(|p| (0..env.len() as isize).contains(p))
                .map(|p| env[p as usize])
                .sum();
            if score > best.0 {
                best = (score, lag);
            }
            if mag == 0 {
                break;
            }
        }
    }
    Ok(best.1)
}

/// Absolute timing error in seconds between a latent's energy and the scene events.
pub fn temporal_offset(z: &Tensor<f32>, event_times: &[f64], cfg: &SynthConfig) -> Result<f64> {
    Ok(best_lag(z, event_times, cfg)?.unsigned_abs() as f64 / cfg.frame_rate())
}

/// Peak template correlation of every class, normalized by the largest window norm.
pub fn class_scores(z: &Tensor<f32>, sigs: &[ClassSignature]) -> Vec<f64> {
    let Some(first) = sigs.first() else { return Vec::new() };
    let e = first.latent_template.rows();
    let c = z.cols();
    if z.rows() < e || c != first.latent_template.cols() {
        return alloc::vec![0.0; sigs.len()];
    }
    let data: Vec<f64> = z.data().iter().map(|&v| v as f64).collect();
    let starts = z.rows() - e + 1;
    let mut max_norm = 0.0f64;
    for p in 0..starts {
        let w = &data[p * c..(p + e) * c];
        max_norm = max_norm.max(w.iter().map(|x| x * x).sum::<f64>());
    }
    let max_norm = libm::sqrt(max_norm);
    if max_norm == 0.0 {
        return alloc::vec![0.0; sigs.len()];
    }
    sigs.iter()
        .map(|s| {
            let t = s.latent_template.data();
            let peak = (0..starts)
                .map(|p| data[p * c..(p + e) * c].iter().zip(t).map(|(x, y)| x * y).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max);
            peak / max_norm
        })
        .collect()
}

/// Best matching class, or `None` when no score reaches [`DECISION_FLOOR`].
pub fn classify_latent(z: &Tensor<f32>, sigs: &[ClassSignature]) -> Option<usize> {
    let s = class_scores(z, sigs);
    let (k, best) = s.iter().copied().enumerate().max_by(|a, b| a.1.total_cmp(&b.1))?;
    (best >= DECISION_FLOOR).then_some(k)
}

/// Normalized peak correlation with one class template, in [-1, 1].
pub fn clap_analog_similarity(z: &Tensor<f32>, class_id: usize, sigs: &[ClassSignature]) -> Result<f64> {
    if class_id >= sigs.len() {
        return Err(Error::Index {
            what: "class signatures",
            index: class_id,
            len: sigs.len(),
        });
    }
    Ok(class_scores(z, sigs)[class_id])
}

/// Two-way decision between the target and the original class; the target must score strictly higher.
pub fn binary_choice(z: &Tensor<f32>, target: usize, original: usize, sigs: &[ClassSignature]) -> Result<usize> {
    let t = clap_analog_similarity(z, target, sigs)?;
    let o = clap_analog_similarity(z, original, sigs)?;
    Ok(if t > o { target } else { original })
}

/// Frame-mean of a latent.
pub fn pooled_features(z: &Tensor<f32>) -> Vec<f64> {
    let mut m = alloc::vec![0.0; z.cols()];
    for r in 0..z.rows() {
        m.iter_mut().zip(z.row(r)).for_each(|(a, &v)| *a += v as f64);
    }
    m.iter_mut().for_each(|a| *a /= z.rows() as f64);
    m
}

fn gaussian(set: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = set[0].len();
    let n = set.len() as f64;
    let mut mu = DVector::zeros(d);
    for x in set {
        mu += DVector::from_column_slice(x);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(d, d);
    for x in set {
        let v = DVector::from_column_slice(x) - &mu;
        cov += &v * v.transpose();
    }
    cov /= n - 1.0;
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|l| libm::sqrt(l.max(0.0)));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn frechet_from_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let d = a.first().or(b.first()).map_or(0, |x| x.len());
    if d == 0 || a.iter().chain(b).any(|x| x.len() != d) {
        return Err(Error::Contract("feature sets need one non-empty common width".into()));
    }
    if a.len() < 2 * d || b.len() < 2 * d {
        return Err(Error::Contract(alloc::format!(
            "Fréchet distance needs at least {} samples per set, got {} and {}",
            2 * d,
            a.len(),
            b.len()
        )));
    }
    let (ma, ca) = gaussian(a);
    let (mb, cb) = gaussian(b);
    let sa = psd_sqrt(&ca);
    let cross = psd_sqrt(&(&sa * &cb * &sa));
    let d2 = (&ma - &mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross.trace();
    Ok(d2.max(0.0))
}

/// Fréchet distance over frame-mean latent features.
pub fn frechet_distance(a: &[Tensor<f32>], b: &[Tensor<f32>]) -> Result<f64> {
    let fa: Vec<Vec<f64>> = a.iter().map(pooled_features).collect();
    let fb: Vec<Vec<f64>> = b.iter().map(pooled_features).collect();
    frechet_from_features(&fa, &fb)
}

/// Offsets of white-noise latents against random scenes.
pub fn null_offsets(trials: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<f64>> {
    let scenes = generate_scenes(trials.max(1), 0.0, derive_seed(seed, "null-scenes", 0), cfg)?;
    let out = crate::par_map(&scenes[..trials], |s| {
        let mut rng = stream_at(seed, Stream::Sampling, s.scene_id);
        let data = (0..cfg.frames * cfg.latent_channels)
            .map(|_| <rand_distr::StandardNormal as rand_distr::Distribution<f64>>::sample(&rand_distr::StandardNormal, &mut rng) as f32)
            .collect();
        let z = Tensor::from_vec(&[cfg.frames, cfg.latent_channels], data)?;
        temporal_offset(&z, &s.event_times, cfg)
    });
    out.into_iter().collect()
}

/// Metric sanity on clean renders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preflight {
    pub scenes: usize,
    pub classification_rate: f64,
    pub max_offset_frames: usize,
    pub min_own_similarity: f64,
    pub max_other_similarity: f64,
}

impl Preflight {
    pub fn passed(&self) -> bool {
        self.classification_rate == 1.0 && self.max_offset_frames <= 1
    }
}

pub fn metric_preflight(rendered: &[RenderedScene], sigs: &[ClassSignature], cfg: &SynthConfig) -> Result<Preflight> {
    let mut correct = 0usize;
    let mut max_off = 0usize;
    let (mut own, mut other) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in rendered {
        let k = r.scene.audio_class;
        if classify_latent(&r.latent, sigs) == Some(k) {
            correct += 1;
        }
        if !r.scene.event_times.is_empty() {
            max_off = max_off.max(best_lag(&r.latent, &r.scene.event_times, cfg)?.unsigned_abs());
        }
        let s = class_scores(&r.latent, sigs);
        for (j, v) in s.into_iter().enumerate() {
            if j == k {
                own = own.min(v);
            } else {
                other = other.max(v);
            }
        }
    }
    Ok(Preflight {
        scenes: rendered.len(),
        classification_rate: correct as f64 / rendered.len().max(1) as f64,
        max_offset_frames: max_off,
        min_own_similarity: own,
        max_other_similarity: other,
    })
}

/// Sampling settings shared by every scene of an evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSetup {
    pub guide: GuidanceParams,
    pub steps: usize,
    pub seed: u64,
    /// Sample through the adapter when the models carry one.
    pub use_adapter: bool,
    /// Apply the asymmetric unconditional scaling.
    pub asymmetric: bool,
}

impl Default for EvalSetup {
    fn default() -> Self {
        Self {
            guide: GuidanceParams::default(),
            steps: 50,
            seed: 0,
            use_adapter: true,
            asymmetric: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: u64,
    pub target_class: usize,
    pub original_class: usize,
    /// Binary decision between target and original.
    pub predicted_class: usize,
    /// Unrestricted decision over all classes.
    pub open_class: Option<usize>,
    pub temporal_offset_s: f64,
    pub clap_analog: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub scenes: usize,
    pub accuracy: f64,
    pub mean_offset_s: f64,
    pub frechet_distance: Option<f64>,
    pub clap_analog_similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<SceneRecord>,
    pub aggregates: Aggregates,
}

impl EvalReport {
    /// Aggregates are pure functions of the records plus the set-level Fréchet distance.
    pub fn from_records(records: Vec<SceneRecord>, frechet_distance: Option<f64>) -> Self {
        let n = records.len().max(1) as f64;
        let aggregates = Aggregates {
            scenes: records.len(),
            accuracy: records.iter().filter(|r| r.predicted_class == r.target_class).count() as f64 / n,
            mean_offset_s: records.iter().map(|r| r.temporal_offset_s).sum::<f64>() / n,
            frechet_distance,
            clap_analog_similarity: records.iter().map(|r| r.clap_analog).sum::<f64>() / n,
        };
        Self { records, aggregates }
    }
}

/// Generates one latent for a scene: text from the audio class, video from the scene's streams.
pub fn generate_for_scene(
    models: &Models<f32>,
    scene: &RenderedScene,
    text: TextCondition,
    setup: &EvalSetup,
    sched: &NoiseSchedule,
    cfg: &SynthConfig,
) -> Result<Tensor<f32>> {
    let adapter = if setup.use_adapter { models.adapter.as_ref() } else { None };
    let video = match (adapter, models.features.as_ref()) {
        (Some(_), Some(f)) => Some(match f.variant() {
            FeatureVariant::Segment => f.preprocess(&scene.avclip, None)?,
            FeatureVariant::Fused => f.preprocess_fused(
                &crate::features::FeatureStream {
                    rate_kind: crate::features::RateKind::SegmentGrid,
                    frames: scene.avclip.clone(),
                    scene_seconds: cfg.scene_seconds,
                },
                &scene.clip_stream(cfg),
            )?,
        }),
        (Some(_), None) => return Err(Error::Contract("adapter checkpoint lacks its feature blocks".into())),
        _ => None,
    };
    let model = GuidedModel {
        backbone: &models.backbone,
        adapter,
        asymmetric: setup.asymmetric,
    };
    let cond = ConditionBundle {
        text,
        video,
        guide: setup.guide,
    };
    let seed = derive_seed(setup.seed, "scene", scene.scene.scene_id);
    sample(&model, &cond, sched, setup.steps, seed, &[cfg.frames, cfg.latent_channels])
}

/// Samples every scene with its audio class as text and scores it against both classes.
///
/// The Fréchet distance compares the generated set with the clean renders of the same scenes
/// and is omitted when the set is too small.
pub fn disentanglement_eval(
    models: &Models<f32>,
    scenes: &[RenderedScene],
    sigs: &[ClassSignature],
    setup: &EvalSetup,
    sched: &NoiseSchedule,
    cfg: &SynthConfig,
) -> Result<(EvalReport, Vec<Tensor<f32>>)> {
    setup.guide.validate()?;
    let generated: Vec<Result<Tensor<f32>>> = crate::par_map(scenes, |s| {
        generate_for_scene(models, s, TextCondition::Class(s.scene.audio_class), setup, sched, cfg)
    });
    let generated: Vec<Tensor<f32>> = generated.into_iter().collect::<Result<_>>()?;
    let mut records = Vec::with_capacity(scenes.len());
    for (s, z) in scenes.iter().zip(&generated) {
        let target = s.scene.audio_class;
        let original = s.scene.video_class;
        records.push(SceneRecord {
            scene_id: s.scene.scene_id,
            target_class: target,
            original_class: original,
            predicted_class: binary_choice(z, target, original, sigs)?,
            open_class: classify_latent(z, sigs),
            temporal_offset_s: temporal_offset(z, &s.scene.event_times, cfg)?,
            clap_analog: clap_analog_similarity(z, target, sigs)?,
            gamma: setup.guide.gamma,
            alpha: setup.guide.alpha_asym,
            steps: setup.steps,
        });
    }
    let clean: Vec<Tensor<f32>> = scenes.iter().map(|s| s.latent.clone()).collect();
    let fd = frechet_distance(&generated, &clean).ok();
    Ok((EvalReport::from_records(records, fd), generated))
}

/// One line of the α sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub acc: f64,
    pub mean_offset: f64,
    pub frechet: Option<f64>,
    pub clap: f64,
}

pub fn alpha_sweep(
    models: &Models<f32>,
    scenes: &[RenderedScene],
    sigs: &[ClassSignature],
    alphas: &[f64],
    base: &EvalSetup,
    sched: &NoiseSchedule,
    cfg: &SynthConfig,
) -> Result<Vec<(SweepRow, EvalReport)>> {
    alphas
        .iter()
        .map(|&alpha| {
            let setup = EvalSetup {
                guide: GuidanceParams::new(base.guide.gamma, alpha)?,
                ..*base
            };
            let (report, _) = disentanglement_eval(models, scenes, sigs, &setup, sched, cfg)?;
            let a = &report.aggregates;
            Ok((
                SweepRow {
                    alpha,
                    acc: a.accuracy,
                    mean_offset: a.mean_offset_s,
                    frechet: a.frechet_distance,
                    clap: a.clap_analog_similarity,
                },
                report,
            ))
        })
        .collect()
}

/// Two-sided z statistic comparing a sample mean of offsets with the null mean.
pub fn null_z_score(offsets: &[f64], null: &[f64]) -> f64 {
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let var = |x: &[f64], m: f64| x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0);
    let (ma, mb) = (mean(offsets), mean(null));
    let se = libm::sqrt(var(offsets, ma) / offsets.len() as f64 + var(null, mb) / null.len() as f64);
    if se == 0.0 {
        0.0
    } else {
        (ma - mb) / se
    }
}

/// Human-readable label of a class decision.
pub fn class_label(k: Option<usize>) -> String {
    k.map_or_else(|| String::from("none"), |k| alloc::format!("{k}"))
}

/// A latent shifted by `frames` (positive delays), wrapping around the scene.
pub fn circular_shift(z: &Tensor<f32>, frames: isize) -> Tensor<f32> {
    let n = z.rows() as isize;
    let mut out = Vec::with_capacity(z.numel());
    for r in 0..n {
        let src = (r - frames).rem_euclid(n) as usize;
        out.extend_from_slice(z.row(src));
    }
    Tensor::from_vec(z.shape(), out).expect("same shape")
}

/// Random scene event times for null comparisons, uniform in the usable span.
pub fn random_events<G: Rng + ?Sized>(count: usize, cfg: &SynthConfig, rng: &mut G) -> Vec<f64> {
    let mut t: Vec<f64> = (0..count)
        .map(|_| rng.random_range(cfg.edge_margin..cfg.scene_seconds - cfg.edge_margin))
        .collect();
    t.sort_by(f64::total_cmp);
    t
}
