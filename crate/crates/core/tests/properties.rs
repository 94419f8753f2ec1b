use std::sync::OnceLock;

use foley_core::diffusion::{forward_marginal, guided_prediction, recover_z0_eps, v_from, NoiseSchedule, ScheduleKind};
use foley_core::eval::{circular_shift, frechet_from_features, temporal_offset};
use foley_core::features::{linear_resample, pad_symmetric};
use foley_core::layers::{dense_forward, dropout_forward, layer_norm_forward};
use foley_core::optim::{adamw_step, AdamWConfig, Moments};
use foley_core::synth::{make_signatures, render_target_latent, sample_scene, ClassSignature, Scene, SynthConfig};
use foley_core::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, n)
}

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    (1..=max_rows, 1..=max_cols)
        .prop_flat_map(|(r, c)| values(r * c).prop_map(move |v| Tensor::from_vec(&[r, c], v).unwrap()))
}

fn schedule() -> &'static NoiseSchedule {
    static S: OnceLock<NoiseSchedule> = OnceLock::new();
    S.get_or_init(|| NoiseSchedule::new(1000, ScheduleKind::Cosine).unwrap())
}

fn signatures() -> &'static Vec<ClassSignature> {
    static S: OnceLock<Vec<ClassSignature>> = OnceLock::new();
    S.get_or_init(|| make_signatures(&SynthConfig::default(), 11).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tensor_length_must_equal_shape_product(r in 0usize..6, c in 0usize..6, n in 0usize..40) {
        let t = Tensor::<f64>::from_vec(&[r, c], vec![0.0; n]);
        prop_assert_eq!(t.is_ok(), r > 0 && c > 0 && n == r * c);
    }

    #[test]
    fn zero_dense_layer_is_exactly_zero(x in matrix(5, 6), out in 1usize..5) {
        let w = Tensor::zeros(&[x.cols(), out]);
        let y = dense_forward(&x, &w, &Tensor::zeros(&[out])).unwrap();
        prop_assert!(y.data().iter().all(|v| v.to_bits() == 0));
    }

    #[test]
    fn dense_and_norm_stay_finite(x in matrix(5, 6), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::randn(&[x.cols(), 3], 1.0, &mut rng);
        let y = dense_forward(&x, &w, &Tensor::ones(&[3])).unwrap();
        prop_assert!(y.data().iter().all(|v| v.is_finite()));
        let n = layer_norm_forward(&x, &Tensor::ones(&[x.cols()]), &Tensor::zeros(&[x.cols()]), 1e-5).unwrap();
        prop_assert!(n.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn inference_dropout_is_identity(x in matrix(4, 4), rate in 0.0f64..0.99, seed in any::<u64>()) {
        let y = dropout_forward(&x, rate, false, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(y, x);
    }

    #[test]
    fn schedules_are_valid(n in 2usize..1500, cosine in any::<bool>()) {
        let kind = if cosine { ScheduleKind::Cosine } else { ScheduleKind::Linear };
        let s = NoiseSchedule::new(n, kind).unwrap();
        let (a, ab) = (s.alpha(), s.alpha_bar());
        prop_assert_eq!(ab[0], a[0]);
        for t in 1..n {
            prop_assert_eq!(ab[t], ab[t - 1] * a[t]);
            prop_assert!(ab[t] < ab[t - 1]);
        }
        prop_assert!(ab.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn v_parameterization_round_trips(z0 in values(16), eps in values(16), t in 0usize..1000) {
        let s = schedule();
        let z0 = Tensor::from_vec(&[4, 4], z0).unwrap();
        let eps = Tensor::from_vec(&[4, 4], eps).unwrap();
        let zt = forward_marginal(&z0, t, &eps, s).unwrap();
        let v = v_from(&z0, &eps, t, s).unwrap();
        let (z, e) = recover_z0_eps(&zt, &v, t, s).unwrap();
        for (a, b) in z.data().iter().zip(z0.data()).chain(e.data().iter().zip(eps.data())) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn guidance_is_affine_in_gamma(c in values(6), u in values(6), g in 0.0f64..12.0) {
        let c = Tensor::from_vec(&[2, 3], c).unwrap();
        let u = Tensor::from_vec(&[2, 3], u).unwrap();
        prop_assert_eq!(&guided_prediction(&c, &u, 1.0).unwrap(), &c);
        prop_assert_eq!(&guided_prediction(&c, &u, 0.0).unwrap(), &u);
        let y = guided_prediction(&c, &u, g).unwrap();
        for ((y, c), u) in y.data().iter().zip(c.data()).zip(u.data()) {
            prop_assert!((y - (u + g * (c - u))).abs() < 1e-9);
        }
    }

    #[test]
    fn resampling_keeps_constants_and_ramps(n in 2usize..60, m in 2usize..250, k in -5.0f64..5.0, slope in -1.0f64..1.0) {
        let flat = Tensor::full(&[n, 3], k);
        prop_assert!(linear_resample(&flat, m).unwrap().data().iter().all(|&v| v == k));
        let ramp = Tensor::from_vec(&[n, 1], (0..n).map(|i| slope * i as f64 / (n - 1) as f64).collect()).unwrap();
        let r = linear_resample(&ramp, m).unwrap();
        for (j, v) in r.data().iter().enumerate() {
            prop_assert!((v - slope * j as f64 / (m - 1) as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn padding_touches_only_the_border(x in matrix(12, 3), extra in 0usize..10) {
        let m = x.rows();
        let p = pad_symmetric(&x, m + extra).unwrap();
        let left = extra / 2;
        prop_assert_eq!(&p.data()[left * x.cols()..(left + m) * x.cols()], x.data());
        for r in 0..left {
            prop_assert_eq!(p.row(r), x.row(0));
        }
        for r in left + m..m + extra {
            prop_assert_eq!(p.row(r), x.row(m - 1));
        }
    }

    #[test]
    fn sampled_scenes_satisfy_their_invariants(seed in any::<u64>(), conflict in any::<bool>()) {
        let cfg = SynthConfig::default();
        let s = sample_scene(&mut ChaCha8Rng::seed_from_u64(seed), conflict, &cfg);
        prop_assert!(s.validate(&cfg).is_ok());
        prop_assert_eq!(s.is_conflicted(), conflict);
        prop_assert!(s.audio_class < cfg.classes && s.video_class < cfg.classes);
        prop_assert!((1..=cfg.max_events).contains(&s.event_times.len()));
        for w in s.event_times.windows(2) {
            prop_assert!(w[1] - w[0] >= cfg.min_separation);
        }
        let again = sample_scene(&mut ChaCha8Rng::seed_from_u64(seed), conflict, &cfg);
        prop_assert_eq!(s, again);
    }

    #[test]
    fn frechet_is_symmetric_and_order_free(a in prop::collection::vec(values(3), 6..14), b in prop::collection::vec(values(3), 6..14), rot in 0usize..6) {
        let ab = frechet_from_features(&a, &b).unwrap();
        let ba = frechet_from_features(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-6 * (1.0 + ab));
        prop_assert!(frechet_from_features(&a, &a).unwrap() < 1e-6);
        let mut r = a.clone();
        r.rotate_left(rot % a.len());
        r.reverse();
        prop_assert!((frechet_from_features(&r, &b).unwrap() - ab).abs() <= 1e-6 * (1.0 + ab));
    }

    #[test]
    fn adam_without_gradient_or_decay_leaves_parameters(p in values(8), steps in 1u64..20) {
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut q = p.clone();
        let mut st = Moments::default();
        for s in 1..=steps {
            adamw_step(&mut q, &[0.0; 8], &mut st, s, &cfg).unwrap();
        }
        prop_assert_eq!(q, p);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn offset_follows_a_shift(t0 in 3.0f64..7.0, class in 0usize..12, shift in -43isize..=43) {
        let cfg = SynthConfig::default();
        let scene = Scene { scene_id: 0, video_class: class, audio_class: class, event_times: vec![t0], seed: 1 };
        let z = render_target_latent(&scene, signatures(), &cfg).unwrap();
        let frame = 1.0 / cfg.frame_rate();
        prop_assert!(temporal_offset(&z, &scene.event_times, &cfg).unwrap() <= frame + 1e-9);
        let moved = circular_shift(&z, shift);
        let o = temporal_offset(&moved, &scene.event_times, &cfg).unwrap();
        prop_assert!((o - shift.unsigned_abs() as f64 * frame).abs() <= frame + 1e-9, "{} vs {}", o, shift);
    }
}
