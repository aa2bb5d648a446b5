mod common;

use common::*;
use parsegrid_core::tensor::kernels::ConvGeom;
use parsegrid_core::tensor::{finite_diff_check, finite_diff_check_many, LabelMap, Shape, Tape, Tensor, TensorError};
use proptest::prelude::*;

fn conv_on_tape(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, g: ConvGeom) -> Tensor<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let bv = b.map(|b| tape.constant(b.clone()));
    let y = tape.conv2d(xv, wv, bv, g).unwrap();
    tape.value(y).clone()
}

#[test]
fn conv2d_identity_kernel() {
    let x = random_tensor(Shape::new(2, 1, 5, 6), 1);
    let w = Tensor::ones(Shape::new(1, 1, 1, 1));
    assert_eq!(conv_on_tape(&x, &w, None, ConvGeom::new(1, 0, 1)), x);
}

#[test]
fn conv2d_constant_field() {
    let x = Tensor::<f64>::ones(Shape::new(1, 1, 5, 5));
    let w = Tensor::ones(Shape::new(1, 1, 3, 3));
    let y = conv_on_tape(&x, &w, None, ConvGeom::new(1, 0, 1));
    assert_eq!(y.shape(), Shape::new(1, 1, 3, 3));
    assert!(y.data().iter().all(|&v| v == 9.0));
}

#[test]
fn conv2d_strided_dilated_matches_direct_loops() {
    let x = random_tensor(Shape::new(1, 2, 7, 7), 2);
    let w = random_tensor(Shape::new(3, 2, 3, 3), 3);
    let b = random_tensor(Shape::vector(3), 4);
    let got = conv_on_tape(&x, &w, Some(&b), ConvGeom::new(2, 1, 2));
    let want = conv2d_direct(&x, &w, Some(b.data()), 2, 1, 2);
    assert_eq!(got.shape(), want.shape());
    assert!(got.max_abs_diff(&want) <= 1e-5);
}

#[test]
fn conv2d_f32_matches_direct_loops_over_grid() {
    for stride in 1..=2 {
        for padding in 0..=2 {
            for dilation in 1..=3 {
                let seed = (stride * 100 + padding * 10 + dilation) as u64;
                let x = random_tensor(Shape::new(2, 4, 9, 9), seed);
                let w = random_tensor(Shape::new(3, 4, 3, 3), seed + 1000);
                let want = conv2d_direct(&x, &w, None, stride, padding, dilation);
                let mut tape = Tape::<f32>::new();
                let xv = tape.constant(x.cast());
                let wv = tape.constant(w.cast());
                let y = tape
                    .conv2d(xv, wv, None, ConvGeom::new(stride, padding, dilation))
                    .unwrap();
                let got: Tensor<f64> = tape.value(y).cast();
                assert_eq!(got.shape(), want.shape());
                assert!(got.max_abs_diff(&want) <= 1e-5, "s={stride} p={padding} d={dilation}");
            }
        }
    }
}

#[test]
fn conv2d_errors() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(Shape::new(1, 2, 4, 4)));
    let w = tape.constant(Tensor::zeros(Shape::new(1, 3, 3, 3)));
    assert!(matches!(
        tape.conv2d(x, w, None, ConvGeom::new(1, 1, 1)),
        Err(TensorError::Shape { .. })
    ));
    let w = tape.constant(Tensor::zeros(Shape::new(1, 2, 3, 3)));
    assert!(matches!(
        tape.conv2d(x, w, None, ConvGeom::new(1, 0, 3)),
        Err(TensorError::Geometry { .. })
    ));
}

#[test]
fn conv_transpose_identity_and_scatter() {
    let x = random_tensor(Shape::new(1, 1, 4, 4), 5);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w1 = tape.constant(Tensor::ones(Shape::new(1, 1, 1, 1)));
    let y = tape.conv_transpose2d(xv, w1, 1, 0, 0).unwrap();
    assert_eq!(tape.value(y), &x);

    let x = random_tensor(Shape::new(1, 1, 3, 3), 6);
    let w = Tensor::ones(Shape::new(1, 1, 2, 2));
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let y = tape.conv_transpose2d(xv, wv, 2, 0, 0).unwrap();
    assert_eq!(tape.shape(y), Shape::new(1, 1, 6, 6));
    let want = conv_transpose2d_scatter(&x, &w, 2, 0, 0);
    assert!(tape.value(y).max_abs_diff(&want) < 1e-12);
}

#[test]
fn conv_transpose_general_scatter() {
    let x = random_tensor(Shape::new(2, 3, 4, 5), 7);
    let w = random_tensor(Shape::new(3, 2, 3, 3), 8);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let y = tape.conv_transpose2d(xv, wv, 2, 1, 1).unwrap();
    assert_eq!(tape.shape(y), Shape::new(2, 2, 8, 10));
    let want = conv_transpose2d_scatter(&x, &w, 2, 1, 1);
    assert!(tape.value(y).max_abs_diff(&want) < 1e-12);
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    for (stride, padding) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        let x = random_tensor(Shape::new(2, 3, 8, 8), 9);
        let w = random_tensor(Shape::new(4, 3, 3, 3), 10);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let cx = tape.conv2d(xv, wv, None, ConvGeom::new(stride, padding, 1)).unwrap();
        let y = random_tensor(tape.shape(cx), 11);
        let yv = tape.constant(y.clone());
        let op = 8 - ((tape.shape(cx).h - 1) * stride + 3 - 2 * padding);
        let ty = tape.conv_transpose2d(yv, wv, stride, padding, op).unwrap();
        assert_eq!(tape.shape(ty), x.shape());
        let lhs = inner(tape.value(cx), &y);
        let rhs = inner(&x, tape.value(ty));
        assert!((lhs - rhs).abs() <= 1e-4 * lhs.abs().max(rhs.abs()));
    }
}

#[test]
fn batch_norm_identity_on_normalised_input() {
    // Each channel holds +-1 in equal numbers: mean 0, biased variance 1.
    let x = Tensor::<f64>::from_fn(
        Shape::new(2, 3, 2, 2),
        |n, _, y, x| if (n + y + x) % 2 == 0 { 1.0 } else { -1.0 },
    );
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let gamma = tape.constant(Tensor::ones(Shape::vector(3)));
    let beta = tape.constant(Tensor::zeros(Shape::vector(3)));
    let (y, _) = tape.batch_norm_train(xv, gamma, beta).unwrap();
    // Only the epsilon in the denominator separates output from input.
    assert!(tape.value(y).max_abs_diff(&x) < 1e-5);
}

#[test]
fn batch_norm_train_statistics() {
    let x = random_tensor(Shape::new(4, 3, 5, 5), 12);
    let mut tape = Tape::<f32>::new();
    let xv = tape.constant(x.cast());
    let gamma = tape.constant(Tensor::ones(Shape::vector(3)));
    let beta = tape.constant(Tensor::zeros(Shape::vector(3)));
    let (y, _) = tape.batch_norm_train(xv, gamma, beta).unwrap();
    let y: Tensor<f64> = tape.value(y).cast();
    for c in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|n| (0..25).map(move |p| (n, p)))
            .map(|(n, p)| y.at(n, c, p / 5, p % 5))
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() <= 1e-5, "channel {c} mean {mean}");
        assert!((var - 1.0).abs() <= 1e-3, "channel {c} var {var}");
    }
}

#[test]
fn max_pool_gradient_matches_finite_differences() {
    // distinct values keep every window away from ties
    let mut x = random_tensor(Shape::new(1, 2, 6, 6), 13);
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        *v += i as f64 * 1e-2;
    }
    let report = finite_diff_check(
        |tape, x| {
            let y = tape.max_pool2d(x, 3, 2, 1)?;
            let w = tape.constant(random_tensor(tape.shape(y), 14));
            let p = tape.mul(y, w)?;
            Ok(tape.sum(p))
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(report.max_relative_error <= 1e-3, "{report:?}");
}

#[test]
fn max_pool_first_index_on_ties() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::ones(Shape::new(1, 1, 2, 2)), true);
    let y = tape.max_pool2d(x, 2, 2, 0).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn global_avg_pool_shape_and_value() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_fn(Shape::new(2, 3, 2, 2), |n, c, y, x| {
        (n + c + y + x) as f64
    }));
    let y = tape.global_avg_pool(x);
    assert_eq!(tape.shape(y), Shape::new(2, 3, 1, 1));
    assert_eq!(tape.value(y).at(1, 2, 0, 0), 4.0);
}

#[test]
fn bilinear_identity_and_constant() {
    let x = random_tensor(Shape::new(1, 2, 5, 3), 15);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tape.bilinear_resize(xv, 5, 3).unwrap();
    assert_eq!(tape.value(y), &x);

    let c = tape.constant(Tensor::full(Shape::new(1, 2, 3, 4), 0.375));
    for (h, w) in [(1, 1), (7, 2), (9, 13)] {
        let r = tape.bilinear_resize(c, h, w).unwrap();
        assert!(tape.value(r).data().iter().all(|&v| (v - 0.375).abs() < 1e-15));
    }
}

#[test]
fn bilinear_two_by_two_to_four_by_four() {
    let x = Tensor::new(Shape::new(1, 1, 2, 2), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let y = tape.bilinear_resize(xv, 4, 4).unwrap();
    let want = bilinear_pixel(&x, 4, 4);
    assert!(tape.value(y).max_abs_diff(&want) <= 1e-6);
    // first row is 0, 0.25, 0.75, 1 under half-pixel sampling
    assert_eq!(&tape.value(y).data()[..4], &[0.0, 0.25, 0.75, 1.0]);
}

#[test]
fn bilinear_downsample_matches_oracle() {
    let x = random_tensor(Shape::new(2, 3, 9, 7), 16);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    for (h, w) in [(4, 3), (13, 20), (1, 5)] {
        let y = tape.bilinear_resize(xv, h, w).unwrap();
        assert!(tape.value(y).max_abs_diff(&bilinear_pixel(&x, h, w)) < 1e-12);
    }
}

#[test]
fn cross_entropy_uniform_logits_is_ln_k() {
    for k in [2usize, 5, 20] {
        let mut tape = Tape::<f32>::new();
        let l = tape.constant(Tensor::full(Shape::new(2, k, 3, 3), 0.7));
        let labels = LabelMap::new(2, 3, 3, (0..18).map(|i| (i % k) as u8).collect()).unwrap();
        let loss = tape.cross_entropy_2d(l, &labels, 255).unwrap();
        assert!((tape.value(loss).item() as f64 - (k as f64).ln()).abs() <= 1e-6);
    }
}

#[test]
fn cross_entropy_margin_limit() {
    let mut last = f64::INFINITY;
    for margin in [1.0, 5.0, 10.0, 30.0] {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::from_fn(Shape::new(1, 3, 2, 2), |_, c, _, _| {
            if c == 1 {
                margin
            } else {
                0.0
            }
        }));
        let labels = LabelMap::filled(1, 2, 2, 1);
        let lv = tape.cross_entropy_2d(l, &labels, 255).unwrap();
        let loss = tape.value(lv).item();
        assert!(loss < last);
        last = loss;
    }
    assert!(last < 1e-12);
}

#[test]
fn cross_entropy_with_ignored_pixels_matches_oracle() {
    let logits = random_tensor(Shape::new(1, 4, 3, 3), 17);
    let labels = vec![0u8, 3, 255, 1, 2, 2, 255, 0, 3];
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(logits.clone());
    let lm = LabelMap::new(1, 3, 3, labels.clone()).unwrap();
    let loss = tape.cross_entropy_2d(l, &lm, 255).unwrap();
    let want = cross_entropy_pixel(&logits, &labels, 255);
    assert!((tape.value(loss).item() - want).abs() <= 1e-5);

    let report = finite_diff_check(|tape, l| tape.cross_entropy_2d(l, &lm, 255), &logits, 1e-5).unwrap();
    assert!(report.max_relative_error <= 1e-3, "{report:?}");

    // ignored pixels receive exactly zero gradient
    let mut tape = Tape::<f64>::new();
    let l = tape.leaf(logits.clone(), true);
    let loss = tape.cross_entropy_2d(l, &lm, 255).unwrap();
    let g = tape.backward(loss).unwrap();
    let g = g.get(l).unwrap();
    for c in 0..4 {
        assert_eq!(g.at(0, c, 0, 2), 0.0);
        assert_eq!(g.at(0, c, 2, 0), 0.0);
    }
}

#[test]
fn finite_diff_check_examples() {
    let x = random_tensor(Shape::new(1, 2, 3, 3), 18);
    let r = finite_diff_check(|tape, x| Ok(tape.sum(x)), &x, 1e-3).unwrap();
    assert!(r.max_relative_error <= 1e-6);
    let r = finite_diff_check(
        |tape, x| {
            let sq = tape.mul(x, x)?;
            Ok(tape.sum(sq))
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(r.max_relative_error <= 1e-4);

    // relu evaluated right at its kink is reported as a large error
    let kink = Tensor::<f64>::zeros(Shape::new(1, 1, 1, 2));
    let r = finite_diff_check(
        |tape, x| {
            let y = tape.relu(x);
            Ok(tape.sum(y))
        },
        &kink,
        1e-3,
    )
    .unwrap();
    assert!(r.max_relative_error > 0.4);
}

#[test]
fn every_op_passes_gradient_check() {
    let eps = 1e-5;
    let tol = 1e-3;
    let x = random_away_from_zero(Shape::new(2, 3, 6, 6), 19, 10.0 * eps);
    let w = random_tensor(Shape::new(4, 3, 3, 3), 20);
    let b = random_tensor(Shape::vector(4), 21);
    let probe = |s: Shape, seed| random_tensor(s, seed);

    let checks: Vec<(&str, f64)> = vec![
        (
            "conv2d",
            finite_diff_check_many(
                |t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), ConvGeom::new(2, 2, 2))?;
                    let p = t.constant(probe(t.shape(y), 22));
                    let m = t.mul(y, p)?;
                    Ok(t.sum(m))
                },
                &[x.clone(), w.clone(), b.clone()],
                eps,
            )
            .unwrap()
            .max_relative_error,
        ),
        (
            "conv_transpose2d",
            finite_diff_check_many(
                |t, v| {
                    let y = t.conv_transpose2d(v[0], v[1], 2, 1, 1)?;
                    let p = t.constant(probe(t.shape(y), 23));
                    let m = t.mul(y, p)?;
                    Ok(t.sum(m))
                },
                &[
                    random_tensor(Shape::new(2, 4, 3, 3), 24),
                    random_tensor(Shape::new(4, 2, 3, 3), 25),
                ],
                eps,
            )
            .unwrap()
            .max_relative_error,
        ),
        (
            "batch_norm",
            finite_diff_check_many(
                |t, v| {
                    let (y, _) = t.batch_norm_train(v[0], v[1], v[2])?;
                    let p = t.constant(probe(t.shape(y), 26));
                    let m = t.mul(y, p)?;
                    Ok(t.sum(m))
                },
                &[
                    x.clone(),
                    random_tensor(Shape::vector(3), 27),
                    random_tensor(Shape::vector(3), 28),
                ],
                eps,
            )
            .unwrap()
            .max_relative_error,
        ),
        (
            "relu",
            finite_diff_check(
                |t, v| {
                    let y = t.relu(v);
                    let p = t.constant(probe(t.shape(y), 29));
                    let m = t.mul(y, p)?;
                    Ok(t.sum(m))
                },
                &x,
                eps,
            )
            .unwrap()
            .max_relative_error,
        ),
        (
            "global_avg_pool",
            finite_diff_check(
                |t, v| {
                    let y = t.global_avg_pool(v);
                    let p = t.constant(probe(t.shape(y), 30));
                    let m = t.mul(y, p)?;
                    Ok(t.sum(m))
                },
                &x,
                eps,
            )
            .unwrap()
            .max_relative_error,
        ),
        (
            "concat_channels",
            finite_diff_check_many(
                |t, v| {
                    let y = t.concat_channels(&[v[0], v[1]])?;
                    let p = t.constant(probe(t.shape(y), 31));
                    let m = t.mul(y, p)?;
                    Ok(t.sum(m))
                },
                &[x.clone(), random_tensor(Shape::new(2, 2, 6, 6), 32)],
                eps,
            )
            .unwrap()
            .max_relative_error,
        ),
        (
            "bilinear_resize",
            finite_diff_check(
                |t, v| {
                    let y = t.bilinear_resize(v, 11, 4)?;
                    let p = t.constant(probe(t.shape(y), 33));
                    let m = t.mul(y, p)?;
                    Ok(t.sum(m))
                },
                &x,
                eps,
            )
            .unwrap()
            .max_relative_error,
        ),
    ];
    for (name, err) in checks {
        assert!(err <= tol, "{name}: {err}");
    }
}

#[test]
fn diamond_graph_sums_both_paths() {
    let x = random_away_from_zero(Shape::new(1, 2, 4, 4), 34, 1e-3);
    let w = random_tensor(Shape::new(2, 2, 3, 3), 35);
    let report = finite_diff_check_many(
        |t, v| {
            // x feeds both a conv branch and a relu branch that re-join
            let a = t.conv2d(v[0], v[1], None, ConvGeom::new(1, 1, 1))?;
            let b = t.relu(v[0]);
            let s = t.add(a, b)?;
            let sq = t.mul(s, s)?;
            Ok(t.sum(sq))
        },
        &[x.clone(), w],
        1e-5,
    )
    .unwrap();
    assert!(report.max_relative_error <= 1e-3, "{report:?}");

    let mut tape = Tape::<f64>::new();
    let xv = tape.leaf(x.clone(), true);
    let s = tape.add(xv, xv).unwrap();
    let l = tape.sum(s);
    let g = tape.backward(l).unwrap();
    assert!(g.get(xv).unwrap().data().iter().all(|&v| v == 2.0));
}

#[test]
fn composite_graph_parameter_gradients() {
    let eps = 1e-5;
    let x = random_tensor(Shape::new(2, 3, 8, 8), 36);
    let labels = LabelMap::new(2, 4, 4, (0..32).map(|i| ((i * 7) % 3) as u8).collect()).unwrap();
    let params = vec![
        random_tensor(Shape::new(4, 3, 3, 3), 37),
        random_tensor(Shape::vector(4), 38),
        random_tensor(Shape::vector(4), 39),
        random_tensor(Shape::new(3, 4, 1, 1), 40),
    ];
    let report = finite_diff_check_many(
        |t, v| {
            let xv = t.constant(x.clone());
            let c = t.conv2d(xv, v[0], None, ConvGeom::new(1, 1, 1))?;
            let (bn, _) = t.batch_norm_train(c, v[1], v[2])?;
            let r = t.relu(bn);
            let p = t.max_pool2d(r, 2, 2, 0)?;
            let logits = t.conv2d(p, v[3], None, ConvGeom::new(1, 0, 1))?;
            t.cross_entropy_2d(logits, &labels, 255)
        },
        &params,
        eps,
    )
    .unwrap();
    assert!(report.max_relative_error <= 1e-3, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv2d_matches_oracle_on_random_geometry(
        n in 1usize..3, cin in 1usize..5, cout in 1usize..4,
        h in 3usize..10, w in 3usize..10, k in 1usize..4,
        stride in 1usize..3, padding in 0usize..3, dilation in 1usize..4,
        seed in 0u64..1000,
    ) {
        prop_assume!(h + 2 * padding > dilation * (k - 1));
        prop_assume!(w + 2 * padding > dilation * (k - 1));
        let x = random_tensor(Shape::new(n, cin, h, w), seed);
        let wt = random_tensor(Shape::new(cout, cin, k, k), seed + 1);
        let got = conv_on_tape(&x, &wt, None, ConvGeom::new(stride, padding, dilation));
        let want = conv2d_direct(&x, &wt, None, stride, padding, dilation);
        prop_assert_eq!(got.shape(), want.shape());
        prop_assert!(got.max_abs_diff(&want) <= 1e-10);
    }

    #[test]
    fn bilinear_same_size_is_bitwise_identity(h in 1usize..8, w in 1usize..8, seed in 0u64..1000) {
        let x: Tensor<f32> = random_tensor(Shape::new(1, 2, h, w), seed).cast();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = tape.bilinear_resize(xv, h, w).unwrap();
        prop_assert_eq!(tape.value(y), &x);
    }
}
