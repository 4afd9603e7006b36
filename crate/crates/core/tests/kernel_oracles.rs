//! Kernels against brute-force scalar loops, plus algebraic invariants.

use pahs_core::kernels::{
    self, conv2d, conv2d_transpose, fully_connected, matmul_ex, mean_rows, scale_rows, sigmoid, softmax_rows,
};
use pahs_core::{ConvSpec, Shape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

fn direct_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, spec: &ConvSpec) -> Tensor<f64> {
    let xs = x.shape();
    let (k, s, p) = (spec.kernel as isize, spec.stride as isize, spec.padding as isize);
    let oh = ((xs.h as isize + 2 * p - k) / s + 1) as usize;
    let ow = ((xs.w as isize + 2 * p - k) / s + 1) as usize;
    Tensor::from_fn(Shape::new(xs.n, spec.out_channels, oh, ow), |n, o, y, xo| {
        let mut acc = b.map_or(0.0, |b| b.data()[o]);
        for i in 0..spec.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = y as isize * s - p + ky;
                    let ix = xo as isize * s - p + kx;
                    if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                        acc += w.at(o, i, ky as usize, kx as usize) * x.at(n, i, iy as usize, ix as usize);
                    }
                }
            }
        }
        acc
    })
}

fn transposed_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, spec: &ConvSpec) -> Tensor<f64> {
    let xs = x.shape();
    let (k, s, p) = (spec.kernel, spec.stride as isize, spec.padding as isize);
    let oh = (xs.h - 1) * spec.stride + k + spec.output_padding - 2 * spec.padding;
    let ow = (xs.w - 1) * spec.stride + k + spec.output_padding - 2 * spec.padding;
    let shape = Shape::new(xs.n, spec.out_channels, oh, ow);
    let mut y = Tensor::from_fn(shape, |_, o, _, _| b.map_or(0.0, |b| b.data()[o]));
    for n in 0..xs.n {
        for i in 0..spec.in_channels {
            for iy in 0..xs.h {
                for ix in 0..xs.w {
                    for o in 0..spec.out_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let ty = iy as isize * s - p + ky as isize;
                                let tx = ix as isize * s - p + kx as isize;
                                if ty >= 0 && tx >= 0 && (ty as usize) < oh && (tx as usize) < ow {
                                    let idx = y.index(n, o, ty as usize, tx as usize);
                                    y.data_mut()[idx] += w.at(i, o, ky, kx) * x.at(n, i, iy, ix);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// A random direct conv spec and an input size it accepts.
fn random_spec(rng: &mut ChaCha8Rng) -> (ConvSpec, usize, usize) {
    let k = rng.gen_range(1..=4);
    let s = rng.gen_range(1..=3);
    let p = rng.gen_range(0..k);
    let spec = ConvSpec::new(rng.gen_range(1..=3), rng.gen_range(1..=3), k, s, p);
    let h = rng.gen_range(k.max(1)..k + 7);
    let w = rng.gen_range(k.max(1)..k + 7);
    (spec, h, w)
}

#[test]
fn direct_conv_matches_scalar_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..40 {
        let (spec, h, w) = random_spec(&mut rng);
        let x = random(Shape::new(2, spec.in_channels, h, w), &mut rng);
        let wt = random(spec.weight_shape(), &mut rng);
        let b = random(spec.bias_shape(), &mut rng);
        let got = conv2d(&x, &wt, Some(&b), &spec).unwrap();
        let want = direct_oracle(&x, &wt, Some(&b), &spec);
        assert_eq!(got.shape(), want.shape(), "{spec:?}");
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12, "{spec:?}");
    }
}

#[test]
fn transposed_conv_matches_scatter_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..40 {
        let (direct, _, _) = random_spec(&mut rng);
        let op = rng.gen_range(0..direct.stride);
        let spec = direct.as_transposed().with_output_padding(op);
        let x = random(Shape::new(2, spec.in_channels, rng.gen_range(1..5), rng.gen_range(1..5)), &mut rng);
        let wt = random(spec.weight_shape(), &mut rng);
        let b = random(spec.bias_shape(), &mut rng);
        let Ok(got) = conv2d_transpose(&x, &wt, Some(&b), &spec) else {
            // padding larger than the produced extent
            continue;
        };
        let want = transposed_oracle(&x, &wt, Some(&b), &spec);
        assert_eq!(got.shape(), want.shape(), "{spec:?}");
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12, "{spec:?}");
    }
}

#[test]
fn conv_and_transposed_conv_are_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    while checked < 50 {
        let (spec, h, w) = random_spec(&mut rng);
        let spec = spec.without_bias();
        let xs = Shape::new(2, spec.in_channels, h, w);
        let ys = spec.output_shape(xs).unwrap();
        let op_h = h - ((ys.h - 1) * spec.stride + spec.kernel - 2 * spec.padding);
        let op_w = w - ((ys.w - 1) * spec.stride + spec.kernel - 2 * spec.padding);
        if op_h != op_w {
            continue;
        }
        let t_spec = spec.transpose().with_output_padding(op_h);
        let x = random(xs, &mut rng);
        let y = random(ys, &mut rng);
        let wt = random(spec.weight_shape(), &mut rng);
        let ax = conv2d(&x, &wt, None, &spec).unwrap();
        let aty = conv2d_transpose(&y, &wt, None, &t_spec).unwrap();
        assert_eq!(aty.shape(), xs);
        let lhs = ax.dot(&y).unwrap();
        let rhs = x.dot(&aty).unwrap();
        let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(f64::MIN_POSITIVE);
        assert!(rel <= 1e-10, "{spec:?}: {lhs} vs {rhs}");
        checked += 1;
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let (m, k, p) = (3, 5, 4);
        let a = random(if ta { Shape::matrix(2, k, m) } else { Shape::matrix(2, m, k) }, &mut rng);
        let b = random(if tb { Shape::matrix(2, p, k) } else { Shape::matrix(2, k, p) }, &mut rng);
        let got = matmul_ex(&a, &b, ta, tb).unwrap();
        for n in 0..2 {
            for i in 0..m {
                for j in 0..p {
                    let mut acc = 0.0;
                    for l in 0..k {
                        let av = if ta { a.at(n, 0, l, i) } else { a.at(n, 0, i, l) };
                        let bv = if tb { b.at(n, 0, j, l) } else { b.at(n, 0, l, j) };
                        acc += av * bv;
                    }
                    assert!((got.at(n, 0, i, j) - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn softmax_matches_exp_ratio() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(Shape::matrix(2, 3, 6), &mut rng).map(|v| 5.0 * v);
    let y = softmax_rows(&x);
    for n in 0..2 {
        for r in 0..3 {
            let z: f64 = (0..6).map(|c| x.at(n, 0, r, c).exp()).sum();
            for c in 0..6 {
                assert!((y.at(n, 0, r, c) - x.at(n, 0, r, c).exp() / z).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn softmax_survives_huge_logits() {
    let x = Tensor::<f32>::new(Shape::matrix(1, 1, 3), vec![1000.0, 1000.0, -1000.0]).unwrap();
    let y = softmax_rows(&x);
    assert!(y.is_finite());
    assert!((y.data()[0] - 0.5).abs() < 1e-6);
}

#[test]
fn fully_connected_and_mean_rows_match_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(Shape::matrix(2, 4, 3), &mut rng);
    let w = random(Shape::matrix(1, 5, 3), &mut rng);
    let b = random(Shape::matrix(1, 1, 5), &mut rng);
    let y = fully_connected(&x, &w, &b).unwrap();
    let m = mean_rows(&x);
    for n in 0..2 {
        for r in 0..4 {
            for o in 0..5 {
                let want = b.data()[o] + (0..3).map(|i| w.at(0, 0, o, i) * x.at(n, 0, r, i)).sum::<f64>();
                assert!((y.at(n, 0, r, o) - want).abs() < 1e-14);
            }
            let mean = (0..3).map(|i| x.at(n, 0, r, i)).sum::<f64>() / 3.0;
            assert!((m.at(n, 0, r, 0) - mean).abs() < 1e-15);
        }
    }
}

#[test]
fn l1_loss_matches_elementwise_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(Shape::new(2, 3, 5, 4), &mut rng);
    let b = random(a.shape(), &mut rng);
    let want = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.numel() as f64;
    assert!((kernels::l1_loss(&a, &b).unwrap() - want).abs() < 1e-15);
    assert_eq!(kernels::l1_loss(&a, &a).unwrap(), 0.0);
    let shifted = a.map(|v| v + 0.5);
    assert!((kernels::l1_loss(&shifted, &a).unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn shape_errors_name_the_axis() {
    let x = Tensor::<f32>::zeros(Shape::new(1, 2, 4, 4));
    let w = Tensor::<f32>::zeros(ConvSpec::same(3, 2).weight_shape());
    let err = conv2d(&x, &w, None, &ConvSpec::same(3, 2).without_bias()).unwrap_err();
    assert!(err.to_string().contains("channels"), "{err}");
    let a = Tensor::<f32>::zeros(Shape::matrix(1, 2, 3));
    let err = matmul_ex(&a, &a, false, false).unwrap_err();
    assert!(err.to_string().contains("inner"), "{err}");
}

fn small_tensor(max_n: usize) -> impl Strategy<Value = Tensor<f64>> {
    (1..=max_n, 1..=3usize, 1..=5usize, 1..=5usize).prop_flat_map(|(n, c, h, w)| {
        prop::collection::vec(-10.0f64..10.0, n * c * h * w)
            .prop_map(move |data| Tensor::new(Shape::new(n, c, h, w), data).unwrap())
    })
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in small_tensor(2)) {
        let y = softmax_rows(&x);
        let w = x.shape().w;
        for row in y.data().chunks(w) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn sigmoid_stays_in_unit_interval(x in small_tensor(2)) {
        let y = sigmoid(&x.map(|v| 20.0 * v));
        prop_assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn token_round_trip_is_exact(x in small_tensor(2)) {
        let s = x.shape();
        let back = kernels::from_tokens(&kernels::to_tokens(&x), s.h, s.w).unwrap();
        prop_assert!(back.bit_eq(&x));
    }

    #[test]
    fn unit_row_scaling_is_identity(x in small_tensor(2)) {
        let s = x.shape();
        let ones = Tensor::full(Shape::new(s.n, s.c, s.h, 1), 1.0);
        prop_assert!(scale_rows(&x, &ones).unwrap().bit_eq(&x));
    }

    #[test]
    fn pt4_round_trip_is_bit_exact(x in small_tensor(3)) {
        let bytes = x.to_pt4_bytes();
        let (back, used) = Tensor::<f64>::from_pt4_bytes(&bytes, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert!(back.bit_eq(&x));
    }

    #[test]
    fn concat_preserves_parts(a in small_tensor(1)) {
        let b = a.map(|v| -v);
        let c = kernels::concat_channels(&[&a, &b]).unwrap();
        prop_assert_eq!(c.shape().c, 2 * a.shape().c);
        let item = a.shape().item();
        prop_assert_eq!(&c.data()[..item], a.data());
    }
}
