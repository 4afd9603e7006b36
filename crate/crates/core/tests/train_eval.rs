//! Metrics, optimiser, training loop, synthetic data and the ablation harness.

mod common;

use common::{psnr_oracle, random_frame, ssim_oracle, tiny_config};
use pahs_core::ablate::{ablate, report_csv, variant_config, AblationOptions, VARIANTS};
use pahs_core::metrics::{psnr, ssim};
use pahs_core::model::{PahsParameters, ParameterStore};
use pahs_core::synth::Scene;
use pahs_core::train::{adam_step, evaluate, loss_and_grads, loss_log_csv, LrSchedule};
use pahs_core::{generate_synthetic, train, AdamState, Dataset, Shape, SynthSpec, Tensor, TrainOptions};
use proptest::prelude::*;

fn image(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Tensor::from_fn(Shape::new(1, c, h, w), |_, _, _, _| {
        rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (rng >> 11) as f64 / (1u64 << 53) as f64
    })
}

#[test]
fn metrics_match_scalar_loops_on_random_images() {
    for seed in 0..20u64 {
        let a = image(3, 16, 16, seed);
        let b = image(3, 16, 16, seed + 1000).map(|v| 0.3 * v);
        let b = Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| 0.7 * x + y).collect()).unwrap();
        let p = psnr(&a, &b, 1.0).unwrap();
        assert!((p - psnr_oracle(a.data(), b.data())).abs() <= 1e-9);
        let s = ssim(&a, &b, 1.0).unwrap();
        assert!((s - ssim_oracle(a.data(), b.data(), 16, 16)).abs() <= 1e-9, "seed {seed}");
    }
    let a = image(1, 24, 19, 7);
    let b = image(1, 24, 19, 8);
    assert!((ssim(&a, &b, 1.0).unwrap() - ssim_oracle(a.data(), b.data(), 24, 19)).abs() <= 1e-9);
}

#[test]
fn identical_images_hit_the_sentinels_exactly() {
    let a = image(3, 16, 16, 3);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    assert_eq!(ssim(&a, &a, 1.0).unwrap(), 1.0);
}

#[test]
fn mirrored_pattern_has_negative_ssim() {
    let pattern = image(1, 16, 16, 4);
    let mean = pattern.sum() / pattern.numel() as f64;
    let a = pattern.map(|v| 0.5 + (v - mean));
    let b = pattern.map(|v| 0.5 - (v - mean));
    let s = ssim(&a, &b, 1.0).unwrap();
    assert!(s < 0.0, "{s}");
    assert!((s - ssim_oracle(a.data(), b.data(), 16, 16)).abs() <= 1e-9);
}

#[test]
fn tiny_noise_on_a_constant_keeps_ssim_high() {
    let flat = Tensor::<f64>::full(Shape::new(1, 3, 16, 16), 0.4);
    let noise = image(3, 16, 16, 5);
    let noisy = Tensor::new(
        flat.shape(),
        flat.data().iter().zip(noise.data()).map(|(f, n)| f + 1e-3 * (n - 0.5)).collect(),
    )
    .unwrap();
    assert!(ssim(&flat, &noisy, 1.0).unwrap() >= 0.99);
}

#[test]
fn psnr_closed_forms() {
    let s = Tensor::<f64>::full(Shape::new(1, 3, 16, 16), 0.25);
    assert!((psnr(&s.map(|v| v + 0.1), &s, 1.0).unwrap() - 20.0).abs() < 1e-9);
    assert!(psnr(&s.map(|v| v + 1.0), &s, 1.0).unwrap().abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in 0u64..10_000) {
        let a = image(2, 12, 14, seed);
        let b = image(2, 12, 14, seed ^ 0xfeed);
        let ab = ssim(&a, &b, 1.0).unwrap();
        let ba = ssim(&b, &a, 1.0).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }
}

fn scalar_store(v: f64) -> ParameterStore<f64> {
    let mut s = ParameterStore::new();
    s.insert("p", Tensor::scalar(v));
    s
}

#[test]
fn adam_matches_closed_form_updates() {
    let mut p = scalar_store(0.5);
    let mut state = AdamState::new(&p);
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 1e-4);
    let (mut m, mut v, mut want) = (0.0, 0.0, 0.5);
    for (k, g) in [1.0, -0.5, 2.0, 0.25].into_iter().enumerate() {
        adam_step(&mut p, &scalar_store(g), &mut state, lr).unwrap();
        let t = (k + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        want -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        let got = p.get("p").unwrap().data()[0];
        assert!((got - want).abs() <= 1e-15, "step {t}: {got} vs {want}");
        if t == 1 {
            assert!((0.5 - got - 1e-4).abs() < 1e-11);
        }
    }
}

#[test]
fn zero_gradients_leave_parameters_and_moments_untouched() {
    let params = PahsParameters::<f64>::init(&tiny_config()).unwrap();
    let mut store = params.store.clone();
    let mut zeros = ParameterStore::new();
    for (name, t) in store.iter() {
        zeros.insert(name, Tensor::zeros(t.shape()));
    }
    let mut state = AdamState::new(&store);
    for _ in 0..3 {
        adam_step(&mut store, &zeros, &mut state, 1e-3).unwrap();
    }
    for (name, t) in store.iter() {
        assert!(t.bit_eq(params.store.get(name).unwrap()), "{name}");
        assert!(state.m.get(name).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(state.v.get(name).unwrap().data().iter().all(|&v| v == 0.0));
    }
}

fn toy_data(seed: u64) -> Dataset<f64> {
    let spec = SynthSpec {
        height: 32,
        width: 32,
        frames: 4,
        shapes: 3,
        seed,
        ..SynthSpec::default()
    };
    let (blur, sharp) = generate_synthetic(&spec).unwrap();
    Dataset::single(blur, sharp).unwrap()
}

fn short_run(lr: f64, iterations: usize) -> TrainOptions {
    TrainOptions {
        iterations,
        schedule: LrSchedule::constant(lr),
        patch: Some(16),
        clip: Some(3),
        seed: 9,
        ..TrainOptions::default()
    }
}

#[test]
fn zero_learning_rate_keeps_parameters_bit_identical() {
    let init = PahsParameters::<f64>::init(&tiny_config()).unwrap();
    let out = train(init.clone(), &toy_data(1), &short_run(0.0, 4), |_| {}).unwrap();
    for (name, t) in out.params.store.iter() {
        assert!(t.bit_eq(init.store.get(name).unwrap()), "{name}");
    }
    assert_eq!(out.log.len(), 4);
}

#[test]
fn training_is_deterministic_and_logs_every_iteration() {
    let data = toy_data(2);
    let go = || {
        let init = PahsParameters::<f32>::init(&tiny_config()).unwrap();
        let data = Dataset::single(
            pahs_core::FrameSequence::from_frames(data.sequences[0].blur.frames().iter().map(|f| f.cast()).collect())
                .unwrap(),
            pahs_core::FrameSequence::from_frames(data.sequences[0].sharp.frames().iter().map(|f| f.cast()).collect())
                .unwrap(),
        )
        .unwrap();
        let mut seen = 0;
        let out = train(init, &data, &short_run(1e-3, 5), |_| seen += 1).unwrap();
        assert_eq!(seen, 5);
        loss_log_csv(&out.log)
    };
    let (a, b) = (go(), go());
    assert_eq!(a.as_bytes(), b.as_bytes());
    assert_eq!(a.lines().count(), 6);
    assert!(a.starts_with("iter,loss,lr\n"));
}

#[test]
fn training_rejects_bad_inputs() {
    let init = PahsParameters::<f64>::init(&tiny_config()).unwrap();
    let mut opts = short_run(1e-3, 1);
    opts.patch = Some(48);
    assert!(train(init.clone(), &toy_data(3), &opts, |_| {}).is_err());
    opts.patch = Some(24);
    assert!(train(init, &toy_data(3), &opts, |_| {}).is_err());
    assert!(Dataset::<f64>::new(Vec::new()).is_err());
}

#[test]
fn loss_gradients_reach_every_parameter() {
    for bidirectional in [false, true] {
        let cfg = pahs_core::ModelConfig {
            bidirectional,
            ..tiny_config()
        };
        let params = PahsParameters::<f64>::init(&cfg).unwrap();
        let blur: Vec<_> = (0..3).map(|t| random_frame(16, 16, 40 + t)).collect();
        let sharp: Vec<_> = (0..3).map(|t| random_frame(16, 16, 50 + t)).collect();
        let (loss, grads) = loss_and_grads(&params, &blur, &sharp).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        for (name, g) in grads.iter() {
            assert!(g.is_finite(), "{name}");
            assert!(g.max_abs() > 0.0, "dead gradient for {name}");
        }
    }
}

#[test]
fn evaluation_reports_input_quality_against_an_independent_loop() {
    let data = toy_data(4);
    let params = PahsParameters::<f64>::init(&pahs_core::ModelConfig {
        bidirectional: false,
        ..tiny_config()
    })
    .unwrap();
    let report = evaluate(&params, &data).unwrap();
    let seq = &data.sequences[0];
    let want: f64 = seq
        .blur
        .frames()
        .iter()
        .zip(seq.sharp.frames())
        .map(|(b, s)| psnr_oracle(b.data(), s.data()))
        .sum::<f64>()
        / seq.len() as f64;
    assert!((report.input_psnr - want).abs() < 1e-9);
    assert_eq!(report.frames, 4);
}

#[test]
fn synthetic_blur_is_the_mean_of_regenerated_substeps() {
    let spec = SynthSpec {
        height: 24,
        width: 40,
        frames: 3,
        seed: 11,
        ..SynthSpec::default()
    };
    let (blur, sharp) = generate_synthetic::<f64>(&spec).unwrap();
    let scene = Scene::new(&spec).unwrap();
    for t in 0..spec.frames {
        let subs = scene.substeps(t);
        let frame = &blur.frames()[t];
        for y in 0..24 {
            for x in 0..40 {
                for c in 0..3 {
                    let i = (y * 40 + x) * 3 + c;
                    let total: u32 = subs.iter().map(|s| s[i] as u32).sum();
                    let want = total as f64 / (255.0 * subs.len() as f64);
                    assert_eq!(frame.at(0, c, y, x), want);
                }
            }
        }
        assert!(frame.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let (blur2, sharp2) = generate_synthetic::<f64>(&spec).unwrap();
    for (a, b) in blur.frames().iter().chain(sharp.frames()).zip(blur2.frames().iter().chain(sharp2.frames())) {
        assert!(a.bit_eq(b));
    }

    let still = SynthSpec {
        max_displacement: 0.0,
        ..spec
    };
    let (b, s) = generate_synthetic::<f64>(&still).unwrap();
    for (x, y) in b.frames().iter().zip(s.frames()) {
        assert!(x.bit_eq(y));
    }
}

#[test]
fn ablation_grid_and_report() {
    let base = PahsParameters::<f64>::init(&pahs_core::ModelConfig {
        bidirectional: false,
        ..tiny_config()
    })
    .unwrap();
    let data = toy_data(5);
    let mut streamed = 0;
    let rows = ablate(
        &base,
        &data,
        &AblationOptions {
            variants: Vec::new(),
            repeats: 1,
        },
        |_| streamed += 1,
    )
    .unwrap();
    assert_eq!(rows.len(), VARIANTS.len());
    assert_eq!(streamed, rows.len());
    let csv = report_csv(&rows);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("variant,psnr,ssim,wall_ms"));
    for (line, name) in lines.zip(VARIANTS) {
        let fields: Vec<_> = line.split(',').collect();
        assert_eq!(fields.len(), 4);
        assert_eq!(fields[0], *name);
        assert!(fields[1..].iter().all(|f| f.parse::<f64>().is_ok()));
    }

    let err = variant_config(&base.config, "bogus").unwrap_err();
    assert!(err.to_string().contains("unknown variant"));
    let bad = AblationOptions {
        variants: vec!["n1".into(), "nope".into()],
        repeats: 1,
    };
    assert!(ablate(&base, &data, &bad, |_| {}).is_err());
}
