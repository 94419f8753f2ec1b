//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion and fails if any criterion fails.
//!
//! `FOLEY_ACCEPTANCE_QUICK=1` shrinks training and evaluation for local iteration;
//! the lines are then tagged `quick` and criteria 7 and 8 are not meaningful.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use foley::config::RunConfig;
use foley_core::adapter::Adapter;
use foley_core::backbone::{Backbone, BackboneConfig, DitBlock, TextCondition};
use foley_core::diffusion::{
    forward_marginal, recover_z0_eps, sample, v_from, ConditionBundle, Denoiser, GuidanceParams, NoiseSchedule,
};
use foley_core::eval::{
    alpha_sweep, disentanglement_eval, frechet_from_features, generate_for_scene, metric_preflight, null_offsets,
    null_z_score, pooled_features, EvalSetup, SweepRow,
};
use foley_core::features::{align_clip_stream, linear_resample, FeaturePreprocessor, FeatureVariant};
use foley_core::gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
use foley_core::layers::{Dense, Dropout, LayerNorm, MlpBlock, SelfAttention};
use foley_core::optim::{AdamW, AdamWConfig};
use foley_core::rng::{stream, Stream};
use foley_core::synth::{generate_scenes, make_signatures, render_all, ClassSignature, RenderedScene, SynthConfig};
use foley_core::system::GuidedModel;
use foley_core::tape::Tape;
use foley_core::tensor::{Param, Parameters, Tensor};
use foley_core::training::{init_adapter, init_backbone, pretrain_backbone, train_adapter, Models, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRAIN_SEED: u64 = 2;
const TEST_SEED: u64 = 3;

struct Scale {
    quick: bool,
    train_scenes: usize,
    test_scenes: usize,
    steps: usize,
}

impl Scale {
    fn from_env() -> Self {
        if std::env::var("FOLEY_ACCEPTANCE_QUICK").is_ok_and(|v| v == "1") {
            Self {
                quick: true,
                train_scenes: 200,
                test_scenes: 24,
                steps: 60,
            }
        } else {
            Self {
                quick: false,
                train_scenes: 2000,
                test_scenes: 200,
                steps: 3000,
            }
        }
    }
}

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

#[derive(Default)]
struct Ledger {
    quick: bool,
    rows: Vec<Outcome>,
}

impl Ledger {
    fn record(&mut self, id: usize, name: &'static str, pass: bool, detail: String) {
        let line = line(self.quick, id, name, pass, &detail);
        // written past the test harness capture so the lines always appear
        let _ = writeln!(std::io::stderr(), "{line}");
        self.rows.push(Outcome { id, name, pass, detail });
    }
}

fn line(quick: bool, id: usize, name: &str, pass: bool, detail: &str) -> String {
    let tag = if pass { "PASS" } else { "FAIL" };
    let q = if quick { " (quick)" } else { "" };
    format!("[{tag}] criterion {id:>2}{q}: {name}: {detail}")
}

fn schedule(cfg: &RunConfig) -> NoiseSchedule {
    cfg.schedule.build().unwrap()
}

/// Criterion 1: fresh adapter sampling equals backbone-only sampling.
fn zero_init(cfg: &RunConfig, test: &[RenderedScene], ledger: &mut Ledger) {
    let bb = init_backbone(&cfg.backbone, 21).unwrap();
    let (ad, fp) = init_adapter(&bb, &cfg.adapter, &cfg.features, cfg.variant, 22).unwrap();
    let models = Models {
        backbone: bb,
        adapter: Some(ad),
        features: Some(fp),
    };
    let sched = schedule(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut identical = 0;
    let trials = 20;
    for i in 0..trials {
        let guide = GuidanceParams::new(rng.random_range(0.0..12.0), rng.random_range(0.0..=1.0)).unwrap();
        let setup = EvalSetup {
            guide,
            steps: 20,
            seed: rng.random(),
            use_adapter: true,
            asymmetric: true,
        };
        let scene = &test[i % test.len()];
        let text = TextCondition::Class(scene.scene.audio_class);
        let full = generate_for_scene(&models, scene, text, &setup, &sched, &cfg.synth).unwrap();
        let alone = generate_for_scene(
            &models,
            scene,
            text,
            &EvalSetup {
                use_adapter: false,
                ..setup
            },
            &sched,
            &cfg.synth,
        )
        .unwrap();
        identical += usize::from(full.bit_eq(&alone));
    }
    ledger.record(
        1,
        "zero-init equivalence",
        identical == trials,
        format!("{identical}/{trials} random (seed, gamma, alpha) samples bit-identical"),
    );
}

/// Conditional-only DDIM written against the public schedule, without guidance.
fn conditional_only_sampler(
    model: &GuidedModel<'_, f32>,
    cond: &ConditionBundle<f32>,
    sched: &NoiseSchedule,
    steps: usize,
    seed: u64,
    shape: &[usize],
) -> Tensor<f32> {
    let ts = sched.sampling_timesteps(steps).unwrap();
    let mut rng = stream(seed, Stream::Sampling);
    let mut z = Tensor::randn(shape, 1.0, &mut rng);
    for (i, &t) in ts.iter().enumerate() {
        let (vc, _) = model.predict_pair(&z, t, cond).unwrap();
        let (z0, eps) = recover_z0_eps(&z, &vc, t, sched).unwrap();
        let Some(&next) = ts.get(i + 1) else { return z0 };
        let (s, n) = sched.coefficients(next).unwrap();
        let (s, n) = (s as f32, n as f32);
        z = z0.zip_map(&eps, "oracle", |a, b| s * a + n * b).unwrap();
    }
    z
}

/// Criterion 2: gamma = 1 and alpha = 1 reductions on the trained system.
fn cfg_reductions(cfg: &RunConfig, models: &Models<f32>, test: &[RenderedScene], ledger: &mut Ledger) {
    let sched = schedule(cfg);
    let (bb, ad, fp) = (&models.backbone, models.adapter.as_ref().unwrap(), models.features.as_ref().unwrap());
    let asym = GuidedModel::with_adapter(bb, ad);
    let plain = GuidedModel {
        asymmetric: false,
        ..asym
    };
    let shape = [cfg.synth.frames, cfg.synth.latent_channels];
    let (mut gamma_ok, mut alpha_ok, mut alpha_differs) = (0, 0, 0);
    let n = 4;
    for (i, scene) in test.iter().take(n).enumerate() {
        let video = video_features(fp, scene, &cfg.synth);
        let text = TextCondition::Class(scene.scene.audio_class);
        let bundle = |gamma, alpha| ConditionBundle {
            text,
            video: Some(video.clone()),
            guide: GuidanceParams::new(gamma, alpha).unwrap(),
        };
        let seed = 100 + i as u64;
        let g1 = sample(&asym, &bundle(1.0, 0.5), &sched, 20, seed, &shape).unwrap();
        let oracle = conditional_only_sampler(&asym, &bundle(1.0, 0.5), &sched, 20, seed, &shape);
        gamma_ok += usize::from(g1.bit_eq(&oracle));
        let a1 = sample(&asym, &bundle(7.0, 1.0), &sched, 20, seed, &shape).unwrap();
        let p1 = sample(&plain, &bundle(7.0, 1.0), &sched, 20, seed, &shape).unwrap();
        alpha_ok += usize::from(a1.bit_eq(&p1));
        let a05 = sample(&asym, &bundle(7.0, 0.5), &sched, 20, seed, &shape).unwrap();
        alpha_differs += usize::from(!a05.bit_eq(&p1));
    }
    ledger.record(
        2,
        "CFG reductions",
        gamma_ok == n && alpha_ok == n && alpha_differs == n,
        format!(
            "gamma=1 vs conditional-only {gamma_ok}/{n} bit-exact; alpha=1 vs unscaled path {alpha_ok}/{n} bit-exact; \
             alpha=0.5 differs in {alpha_differs}/{n}"
        ),
    );
}

fn video_features(fp: &FeaturePreprocessor<f32>, scene: &RenderedScene, synth: &SynthConfig) -> Tensor<f32> {
    match fp.variant() {
        FeatureVariant::Segment => fp.preprocess(&scene.avclip, None).unwrap(),
        FeatureVariant::Fused => {
            let clip = align_clip_stream(&scene.clip_stream(synth), fp.config()).unwrap();
            fp.preprocess(&scene.avclip, Some(&clip)).unwrap()
        }
    }
}

/// Criterion 3: v round trip at every timestep.
fn v_round_trip(cfg: &RunConfig, ledger: &mut Ledger) {
    let sched = schedule(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let cases = 1000;
    let mut worst = 0.0f64;
    for t in 0..sched.len() {
        let z0 = Tensor::<f32>::randn(&[cases, 1], 1.0, &mut rng);
        let eps = Tensor::<f32>::randn(&[cases, 1], 1.0, &mut rng);
        let zt = forward_marginal(&z0, t, &eps, &sched).unwrap();
        let v = v_from(&z0, &eps, t, &sched).unwrap();
        let (z, e) = recover_z0_eps(&zt, &v, t, &sched).unwrap();
        for (a, b) in z.data().iter().zip(z0.data()).chain(e.data().iter().zip(eps.data())) {
            worst = worst.max((a - b).abs() as f64);
        }
    }
    ledger.record(
        3,
        "v-parameterization round trip",
        worst < 1e-6,
        format!("{cases} cases at each of {} timesteps, max abs error {worst:.2e} (f32)", sched.len()),
    );
}

fn check<M: Parameters<f64>>(
    name: &str,
    model: &mut M,
    loss: impl Fn(&M, &mut Tape<f64>) -> foley_core::Result<foley_core::tape::Var>,
    out: &mut Vec<(String, GradCheckReport)>,
) {
    let r = finite_diff_check(model, loss, GradCheckOptions::default()).unwrap();
    out.push((name.to_string(), r));
}

/// Criterion 4: finite-difference oracle over every trainable component.
fn gradient_oracle(ledger: &mut Ledger) {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x = Tensor::<f64>::randn(&[5, 6], 1.0, &mut rng);
    let target6 = Tensor::<f64>::randn(&[5, 6], 1.0, &mut rng);
    let target4 = Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng);
    let mut reports = Vec::new();

    let mut dense = Dense::<f64>::new(6, 4, &mut rng);
    dense.b = Param::new(Tensor::randn(&[4], 0.5, &mut rng));
    check(
        "dense",
        &mut dense,
        |m, tape| {
            let xv = tape.constant(&x);
            let y = m.forward(tape, xv)?;
            let t = tape.constant(&target4);
            tape.mse(y, t)
        },
        &mut reports,
    );

    let mut norm = LayerNorm::<f64>::new(6);
    norm.gain = Param::new(Tensor::randn(&[6], 1.0, &mut rng));
    norm.bias = Param::new(Tensor::randn(&[6], 1.0, &mut rng));
    check(
        "layer norm",
        &mut norm,
        |m, tape| {
            let xv = tape.constant(&x);
            let y = m.forward(tape, xv)?;
            let t = tape.constant(&target6);
            tape.mse(y, t)
        },
        &mut reports,
    );

    let mut after_drop = Dense::<f64>::new(6, 4, &mut rng);
    let drop = Dropout::new(0.3).unwrap();
    check(
        "dropout (training, fixed mask)",
        &mut after_drop,
        |m, tape| {
            let xv = tape.constant(&x);
            let h = m.forward(tape, xv)?;
            let mut mask = ChaCha8Rng::seed_from_u64(7);
            let y = drop.forward(tape, h, true, &mut mask)?;
            let t = tape.constant(&target4);
            tape.mse(y, t)
        },
        &mut reports,
    );

    let mut attn = SelfAttention::<f64>::new(6, 2, &mut rng).unwrap();
    check(
        "self-attention",
        &mut attn,
        |m, tape| {
            let xv = tape.constant(&x);
            let y = m.forward(tape, xv)?;
            let t = tape.constant(&target6);
            tape.mse(y, t)
        },
        &mut reports,
    );

    let mut mlp = MlpBlock::<f64>::new(6, 12, &mut rng);
    check(
        "MLP (GELU)",
        &mut mlp,
        |m, tape| {
            let xv = tape.constant(&x);
            let y = m.forward(tape, xv)?;
            let t = tape.constant(&target6);
            tape.mse(y, t)
        },
        &mut reports,
    );

    let mut block = DitBlock::<f64>::new(6, 2, 2, &mut rng).unwrap();
    let cond = Tensor::<f64>::randn(&[1, 6], 1.0, &mut rng);
    check(
        "DiT block",
        &mut block,
        |m, tape| {
            let xv = tape.constant(&x);
            let cv = tape.constant(&cond);
            let y = m.forward(tape, xv, cv)?;
            let t = tape.constant(&target6);
            tape.mse(y, t)
        },
        &mut reports,
    );

    // adapter after one real optimizer step, so the zero-FC bridges are no longer zero
    let bcfg = BackboneConfig {
        latent_channels: 3,
        frames: 6,
        hidden: 8,
        blocks: 2,
        heads: 2,
        classes: 4,
        mlp_ratio: 2,
    };
    let mut bb: Backbone<f64> = Backbone::new(&bcfg, &mut rng).unwrap();
    bb.set_trainable(false);
    let acfg = foley_core::adapter::AdapterConfig {
        feature_width: 5,
        ..Default::default()
    };
    let mut ad = Adapter::from_backbone(&bb, &acfg).unwrap();
    let z = Tensor::<f64>::randn(&[6, 3], 1.0, &mut rng);
    let feats = Tensor::<f64>::randn(&[6, 5], 1.0, &mut rng);
    let target = Tensor::<f64>::randn(&[6, 3], 1.0, &mut rng);
    let adapter_loss = |ad: &Adapter<f64>, tape: &mut Tape<f64>| {
        let zv = tape.constant(&z);
        let fv = tape.constant(&feats);
        let c = bb.conditioning(tape, 77, TextCondition::Class(2))?;
        let inj = ad.forward_tape(tape, &bb, zv, &c, fv, None)?;
        let out = bb.forward_conditioned(tape, zv, &c, &inj.as_injections())?;
        let tv = tape.constant(&target);
        tape.mse(out, tv)
    };
    let mut tape = Tape::new();
    let l = adapter_loss(&ad, &mut tape).unwrap();
    let grads = tape.backward(l).unwrap().into_param_map();
    let mut opt = AdamW::new(AdamWConfig {
        lr: 0.05,
        ..AdamWConfig::default()
    })
    .unwrap();
    opt.step(&mut [("adapter", &mut ad)], &grads).unwrap();
    let bridges_moved = !ad.bridges_are_zero();
    check("adapter with zero-FC bridges after one step", &mut ad, adapter_loss, &mut reports);

    let fcfg = foley_core::features::FeatureConfig {
        frames: 7,
        raw_dim: 4,
        hidden_dim: 6,
        ..Default::default()
    };
    let seg = Tensor::<f64>::randn(&[7, 4], 1.0, &mut rng);
    let clip = Tensor::<f64>::randn(&[7, 4], 1.0, &mut rng);
    let ftarget = Tensor::<f64>::randn(&[7, 6], 1.0, &mut rng);
    for (label, variant) in [
        ("segment preprocessing block", FeatureVariant::Segment),
        ("fused preprocessing blocks", FeatureVariant::Fused),
    ] {
        let mut pre = FeaturePreprocessor::<f64>::new(&fcfg, variant, &mut rng).unwrap();
        pre.visit_mut("", &mut |name, p| {
            if name.ends_with("dense.b") {
                *p = Param::new(Tensor::randn(p.value.shape(), 0.5, &mut rng));
            }
        });
        check(
            label,
            &mut pre,
            |m, tape| {
                let s = tape.constant(&seg);
                let c = (variant == FeatureVariant::Fused).then(|| tape.constant(&clip));
                let mut mask = ChaCha8Rng::seed_from_u64(99);
                let y = m.forward(tape, s, c, true, &mut mask)?;
                let t = tape.constant(&ftarget);
                tape.mse(y, t)
            },
            &mut reports,
        );
    }

    let worst = reports.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
    let failing: Vec<&str> = reports
        .iter()
        .filter(|(_, r)| r.max_rel_error >= 1e-4 || r.checked == 0)
        .map(|(n, _)| n.as_str())
        .collect();
    let checked: usize = reports.iter().map(|(_, r)| r.checked).sum();
    ledger.record(
        4,
        "gradient oracle",
        failing.is_empty() && bridges_moved,
        format!(
            "{} components, {checked} parameters, max rel error {worst:.2e} (f64, eps 1e-5); bridges nonzero after step: \
             {bridges_moved}; failing: {failing:?}",
            reports.len()
        ),
    );
}

/// Criterion 6: clip path arithmetic.
fn alignment(cfg: &RunConfig, test: &[RenderedScene], ledger: &mut Ledger) {
    let fcfg = cfg.synth.feature_config();
    let stream = test[0].clip_stream(&cfg.synth);
    let n_in = stream.frames.rows();
    let interp = linear_resample(&stream.frames, fcfg.interp_frames).unwrap();
    let aligned = align_clip_stream(&stream, &fcfg).unwrap();
    let pad = (aligned.rows() - interp.rows()) / 2;
    let left_ok = (0..pad).all(|r| aligned.row(r) == interp.row(0));
    let right_ok = (aligned.rows() - pad..aligned.rows()).all(|r| aligned.row(r) == interp.row(interp.rows() - 1));
    let centre_ok = (0..interp.rows()).all(|r| aligned.row(pad + r) == interp.row(r));
    let ramp: Vec<f32> = (0..n_in).map(|i| i as f32 / (n_in - 1) as f32).collect();
    let ramp = Tensor::from_vec(&[n_in, 1], ramp).unwrap();
    let r = linear_resample(&ramp, fcfg.interp_frames).unwrap();
    let ramp_err = r
        .data()
        .iter()
        .enumerate()
        .map(|(j, &v)| (v as f64 - j as f64 / (fcfg.interp_frames - 1) as f64).abs())
        .fold(0.0, f64::max);
    let shapes = (n_in, interp.rows(), aligned.rows());
    ledger.record(
        6,
        "feature alignment arithmetic",
        shapes == (50, 200, 216) && pad == 8 && left_ok && right_ok && centre_ok && ramp_err < 1e-6,
        format!(
            "{} -> {} -> {} frames, {pad} replicated per side (edges {}), ramp error {ramp_err:.1e}",
            shapes.0,
            shapes.1,
            shapes.2,
            left_ok && right_ok && centre_ok
        ),
    );
}

/// Criterion 9: metric validity before any model evaluation.
fn metric_validity(cfg: &RunConfig, sigs: &[ClassSignature], test: &[RenderedScene], ledger: &mut Ledger) {
    let pre = metric_preflight(test, sigs, &cfg.synth).unwrap();
    let feats: Vec<Vec<f64>> = test.iter().map(|r| pooled_features(&r.latent)).collect();
    let self_fd = frechet_from_features(&feats, &feats).unwrap();
    let delta: Vec<f64> = (0..cfg.synth.latent_channels).map(|c| 0.05 * (c as f64 + 1.0)).collect();
    let shifted: Vec<Vec<f64>> = feats.iter().map(|f| f.iter().zip(&delta).map(|(a, d)| a + d).collect()).collect();
    let expected: f64 = delta.iter().map(|d| d * d).sum();
    let got = frechet_from_features(&feats, &shifted).unwrap();
    let rel = (got - expected).abs() / expected;
    ledger.record(
        9,
        "metric validity preflight",
        pre.passed() && self_fd < 1e-6 && rel < 0.05,
        format!(
            "{} clean renders: classification {:.0}%, max self-offset {} frame(s); FD(set, set) {self_fd:.1e}; \
             mean-shift FD {got:.4} vs closed form {expected:.4} ({:.2}% off)",
            pre.scenes,
            100.0 * pre.classification_rate,
            pre.max_offset_frames,
            100.0 * rel
        ),
    );
}

struct Trained {
    models: Models<f32>,
    pretrained_fingerprint: String,
    adapter_before: String,
    adapter_after: String,
    adapter_steps: u64,
    seconds: f64,
}

fn train(cfg: &RunConfig, scale: &Scale, sigs: &[ClassSignature]) -> Trained {
    let started = Instant::now();
    let scenes = generate_scenes(scale.train_scenes, 0.0, TRAIN_SEED, &cfg.synth).unwrap();
    let rendered = render_all(&scenes, sigs, &cfg.synth).unwrap();
    let items: Vec<_> = rendered.iter().map(|r| r.train_item(&cfg.synth).unwrap()).collect();
    let mut bb = init_backbone(&cfg.backbone, cfg.seed).unwrap();
    let report = |phase: &'static str| {
        move |l: &foley_core::training::StepLog| {
            if l.step % 500 == 0 {
                let _ = writeln!(std::io::stderr(), "  {phase} step {} loss {:.4}", l.step, l.loss);
            }
        }
    };
    let bcfg = TrainConfig {
        steps: scale.steps,
        ..cfg.backbone_training.clone()
    };
    pretrain_backbone(&mut bb, &items, &bcfg, &cfg.schedule, &mut report("backbone")).unwrap();
    let pretrained_fingerprint = bb.fingerprint();
    let (mut ad, mut fp) = init_adapter(&bb, &cfg.adapter, &cfg.features, cfg.variant, cfg.seed + 1).unwrap();
    let acfg = TrainConfig {
        steps: scale.steps,
        ..cfg.adapter_training.clone()
    };
    let summary =
        train_adapter(&mut bb, &mut ad, &mut fp, &items, &[], &acfg, &cfg.schedule, &mut report("adapter")).unwrap();
    Trained {
        pretrained_fingerprint,
        adapter_before: summary.fingerprint_before,
        adapter_after: summary.fingerprint_after,
        adapter_steps: summary.steps,
        models: Models {
            backbone: bb,
            adapter: Some(ad),
            features: Some(fp),
        },
        seconds: started.elapsed().as_secs_f64(),
    }
}

/// Criterion 5.
fn frozen_contract(t: &Trained, ledger: &mut Ledger) {
    let now = t.models.backbone.fingerprint();
    let ok = t.adapter_before == t.pretrained_fingerprint && t.adapter_after == t.pretrained_fingerprint && now == t.adapter_after;
    ledger.record(
        5,
        "frozen-backbone contract",
        ok,
        format!("fingerprint {}… unchanged across {} adapter steps: {ok}", &now[..16], t.adapter_steps),
    );
}

/// Criteria 7 and 8.
fn trends(cfg: &RunConfig, t: &Trained, sigs: &[ClassSignature], test: &[RenderedScene], ledger: &mut Ledger) {
    let sched = schedule(cfg);
    let started = Instant::now();
    let base = EvalSetup {
        guide: GuidanceParams::new(7.0, 0.5).unwrap(),
        steps: 50,
        seed: cfg.seed,
        use_adapter: true,
        asymmetric: true,
    };
    let baseline_setup = EvalSetup {
        use_adapter: false,
        ..base
    };
    let (baseline, _) = disentanglement_eval(&t.models, test, sigs, &baseline_setup, &sched, &cfg.synth).unwrap();
    let alphas = [0.0, 0.25, 0.5, 0.75, 1.0];
    let sweep = alpha_sweep(&t.models, test, sigs, &alphas, &base, &sched, &cfg.synth).unwrap();
    let rows: Vec<SweepRow> = sweep.iter().map(|(r, _)| *r).collect();
    let half = rows.iter().find(|r| r.alpha == 0.5).unwrap();
    let null = null_offsets(cfg.null_trials, cfg.seed, &cfg.synth).unwrap();
    let null_mean = null.iter().sum::<f64>() / null.len() as f64;
    let base_offsets: Vec<f64> = baseline.records.iter().map(|r| r.temporal_offset_s).collect();
    let z = null_z_score(&base_offsets, &null);
    let b = &baseline.aggregates;
    let acc_ok = half.acc >= 0.8;
    let offset_ok = half.mean_offset <= 0.5 * b.mean_offset_s;
    let null_ok = z.abs() < 3.0;
    ledger.record(
        7,
        "end-to-end disentanglement trend",
        acc_ok && offset_ok && null_ok,
        format!(
            "{} conflicted scenes, gamma 7, alpha 0.5, 50 steps: Acc {:.3} (>= 0.80: {acc_ok}); offset {:.3} s vs \
             text-only baseline {:.3} s (ratio {:.2}, <= 0.5: {offset_ok}); baseline vs null mean {null_mean:.3} s: \
             z = {z:.2} (|z| < 3: {null_ok}); baseline Acc {:.3}; training {:.0} s, eval {:.0} s",
            test.len(),
            half.acc,
            half.mean_offset,
            b.mean_offset_s,
            half.mean_offset / b.mean_offset_s,
            b.accuracy,
            t.seconds,
            started.elapsed().as_secs_f64()
        ),
    );

    let one = rows.iter().find(|r| r.alpha == 1.0).unwrap();
    let winner = rows
        .iter()
        .filter(|r| r.alpha < 1.0 && r.mean_offset < one.mean_offset && (r.acc - one.acc).abs() <= 0.05)
        .min_by(|a, b| a.mean_offset.total_cmp(&b.mean_offset));
    let table: Vec<String> = rows
        .iter()
        .map(|r| format!("a={:.2}: acc {:.3} off {:.3}", r.alpha, r.acc, r.mean_offset))
        .collect();
    ledger.record(
        8,
        "alpha-sweep trend",
        winner.is_some(),
        format!(
            "{}; best alpha < 1 within 0.05 Acc of alpha = 1: {}",
            table.join(", "),
            winner.map_or_else(|| "none".to_string(), |w| format!("{:.2}", w.alpha))
        ),
    );
}

fn foley_cli(dir: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_foley"))
        .current_dir(dir)
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn artifacts(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.to_string_lossy().ends_with(".timing.json") {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Criterion 10: every command twice in separate directories, plus in-process reruns.
fn determinism(cfg: &RunConfig, sigs: &[ClassSignature], test: &[RenderedScene], ledger: &mut Ledger) {
    let commands: [&[&str]; 6] = [
        &["gen-data", "--out", "data", "--n", "32", "--conflict-ratio", "0.5", "--seed", "8"],
        &["train", "--phase", "backbone", "--data", "data", "--steps", "6", "--out", "bb.caft"],
        &["train", "--phase", "adapter", "--data", "data", "--backbone", "bb.caft", "--steps", "4", "--finetune-steps", "2", "--out", "ad.caft"],
        &["generate", "--ckpt", "ad.caft", "--scene-file", "data/scenes/000001.caft", "--steps", "5", "--out", "gen/z.caft"],
        &["eval", "--ckpt", "ad.caft", "--data", "data", "--mode", "disentangle", "--steps", "4", "--limit", "4", "--out", "ev"],
        &["eval", "--ckpt", "ad.caft", "--data", "data", "--mode", "alpha-sweep", "--alphas", "0,0.5,1", "--steps", "3", "--limit", "3", "--out", "sweep"],
    ];
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let ran = dirs.iter().all(|d| commands.iter().all(|c| foley_cli(d.path(), c)));
    let (a, b) = (artifacts(dirs[0].path()), artifacts(dirs[1].path()));
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let cli_ok = ran && a.len() == b.len() && differing.is_empty();

    let items: Vec<_> = test.iter().take(16).map(|r| r.train_item(&cfg.synth).unwrap()).collect();
    let run = || {
        let mut bb = init_backbone(&cfg.backbone, 5).unwrap();
        let mut losses = Vec::new();
        pretrain_backbone(&mut bb, &items, &TrainConfig::backbone(5, 5), &cfg.schedule, &mut |l| {
            losses.push(l.loss.to_bits())
        })
        .unwrap();
        (losses, bb.fingerprint())
    };
    let train_ok = run() == run();
    let models = Models {
        backbone: init_backbone(&cfg.backbone, 6).unwrap(),
        adapter: None,
        features: None,
    };
    let sched = schedule(cfg);
    let setup = EvalSetup {
        use_adapter: false,
        steps: 5,
        ..EvalSetup::default()
    };
    let eval = || disentanglement_eval(&models, &test[..4], sigs, &setup, &sched, &cfg.synth).unwrap().0;
    let eval_ok = eval() == eval();
    ledger.record(
        10,
        "determinism",
        cli_ok && train_ok && eval_ok,
        format!(
            "{} CLI artifacts across 6 commands byte-identical: {cli_ok} (differing: {differing:?}); training loss \
             trajectory: {train_ok}; evaluation records: {eval_ok}",
            a.len()
        ),
    );
}

#[test]
fn acceptance() {
    let scale = Scale::from_env();
    let cfg = RunConfig::default();
    cfg.validate().unwrap();
    let mut ledger = Ledger {
        quick: scale.quick,
        ..Ledger::default()
    };
    let sigs = make_signatures(&cfg.synth, cfg.signature_seed).unwrap();
    let test_scenes = generate_scenes(scale.test_scenes, 1.0, TEST_SEED, &cfg.synth).unwrap();
    let test = render_all(&test_scenes, &sigs, &cfg.synth).unwrap();

    zero_init(&cfg, &test, &mut ledger);
    v_round_trip(&cfg, &mut ledger);
    gradient_oracle(&mut ledger);
    alignment(&cfg, &test, &mut ledger);
    metric_validity(&cfg, &sigs, &test, &mut ledger);
    determinism(&cfg, &sigs, &test, &mut ledger);

    let trained = train(&cfg, &scale, &sigs);
    cfg_reductions(&cfg, &trained.models, &test, &mut ledger);
    frozen_contract(&trained, &mut ledger);
    trends(&cfg, &trained, &sigs, &test, &mut ledger);

    ledger.rows.sort_by_key(|r| r.id);
    let mut out = std::io::stderr();
    let _ = writeln!(out, "\nacceptance summary");
    for r in &ledger.rows {
        let _ = writeln!(out, "{}", line(scale.quick, r.id, r.name, r.pass, &r.detail));
    }
    let failed: Vec<usize> = ledger.rows.iter().filter(|r| !r.pass).map(|r| r.id).collect();
    assert_eq!(ledger.rows.len(), 10);
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
