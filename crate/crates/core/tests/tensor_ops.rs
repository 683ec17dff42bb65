mod common;

use attnfd::kernels::PoolKind;
use attnfd::{Error, Tape, Tape64, Tensor};
use common::*;
use proptest::prelude::*;

fn t(dims: &[usize], data: &[f64]) -> Tensor {
    Tensor::from_vec(dims, data.to_vec()).unwrap()
}

#[test]
fn conv_identity_kernel_returns_input() {
    let mut tape = Tape64::new();
    let x = tape.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.])).unwrap();
    let k = tape.constant(t(&[1, 1, 1, 1], &[1.])).unwrap();
    let b = tape.constant(t(&[1], &[0.])).unwrap();
    let y = tape.conv2d(x, k, Some(b), 1, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[1., 2., 3., 4.]);
}

#[test]
fn conv_all_ones_counts_overlap() {
    let mut tape = Tape64::new();
    let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]).unwrap()).unwrap();
    let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]).unwrap()).unwrap();
    let y = tape.conv2d(x, k, None, 1, 1).unwrap();
    // Hand-enumerated overlaps: corners 4, edges 6, center 9.
    assert_eq!(tape.value(y).data(), &[4., 6., 4., 6., 9., 6., 4., 6., 4.]);
}

#[test]
fn conv_errors() {
    let mut tape = Tape64::new();
    let x = tape.constant(Tensor::ones(&[1, 2, 3, 3]).unwrap()).unwrap();
    let k = tape.constant(Tensor::ones(&[1, 3, 3, 3]).unwrap()).unwrap();
    assert!(matches!(
        tape.conv2d(x, k, None, 1, 0),
        Err(Error::Dimension(_))
    ));
    let k = tape.constant(Tensor::ones(&[1, 2, 5, 5]).unwrap()).unwrap();
    assert!(matches!(
        tape.conv2d(x, k, None, 1, 0),
        Err(Error::Geometry(_))
    ));
}

#[test]
fn conv_gradient_matches_finite_differences() {
    let mut r = rng(1);
    let x = uniform(&mut r, &[2, 3, 5, 5], -1.0, 1.0);
    let k = uniform(&mut r, &[4, 3, 3, 3], -1.0, 1.0);
    let b = uniform(&mut r, &[4], -1.0, 1.0);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let err = fd_max_rel_error(&[x.clone(), k.clone(), b.clone()], |tp, v| {
            let y = tp.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap();
            let sq = tp.broadcast_mul(y, y).unwrap();
            tp.sum(sq).unwrap()
        });
        assert!(err < FD_RTOL, "stride {stride} pad {pad}: {err}");
    }
}

#[test]
fn activations() {
    let mut tape = Tape64::new();
    let x = tape.constant(t(&[3], &[-1., 0., 2.])).unwrap();
    let r = tape.relu(x).unwrap();
    assert_eq!(tape.value(r).data(), &[0., 0., 2.]);
}

#[test]
fn sigmoid_value_and_slope_at_zero() {
    let mut tape = Tape64::new();
    let x = tape.leaf(t(&[1], &[0.]), true).unwrap();
    let s = tape.sigmoid(x).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5]);
    let l = tape.sum(s).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.25]);
    let err = fd_max_rel_error(&[t(&[1], &[0.])], |tp, v| {
        let s = tp.sigmoid(v[0]).unwrap();
        tp.sum(s).unwrap()
    });
    assert!(err < FD_RTOL);
}

#[test]
fn sigmoid_stays_inside_open_interval() {
    let mut tape = Tape64::new();
    let x = tape.constant(t(&[4], &[-1e4, -800.0, 40.0, 1e4])).unwrap();
    let s = tape.sigmoid(x).unwrap();
    for v in tape.value(s).data() {
        assert!(*v > 0.0 && *v < 1.0, "{v}");
    }
}

#[test]
fn spatial_pools() {
    let mut tape = Tape64::new();
    let x = tape
        .leaf(t(&[1, 1, 2, 2], &[1., 3., 5., 7.]), true)
        .unwrap();
    let avg = tape.pool_spatial(x, PoolKind::Avg).unwrap();
    let max = tape.pool_spatial(x, PoolKind::Max).unwrap();
    assert_eq!(tape.value(avg).data(), &[4.]);
    assert_eq!(tape.value(max).data(), &[7.]);
    assert_eq!(tape.value(max).dims(), &[1, 1, 1, 1]);
    let l = tape.sum(max).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0., 0., 0., 1.]);
}

#[test]
fn max_pool_ties_route_to_first_in_row_major_order() {
    let mut tape = Tape64::new();
    let x = tape
        .leaf(t(&[1, 1, 2, 2], &[2., 7., 7., 1.]), true)
        .unwrap();
    let m = tape.pool_spatial(x, PoolKind::Max).unwrap();
    let l = tape.sum(m).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0., 1., 0., 0.]);
}

#[test]
fn channel_pools() {
    let mut data = Vec::new();
    data.extend(std::iter::repeat(2.0).take(4));
    data.extend(std::iter::repeat(4.0).take(4));
    let mut tape = Tape64::new();
    let x = tape.constant(t(&[1, 2, 2, 2], &data)).unwrap();
    let avg = tape.pool_channel(x, PoolKind::Avg).unwrap();
    let max = tape.pool_channel(x, PoolKind::Max).unwrap();
    assert_eq!(tape.value(avg).data(), &[3.; 4]);
    assert_eq!(tape.value(max).data(), &[4.; 4]);
}

#[test]
fn channel_pools_match_triple_loop() {
    let mut r = rng(2);
    let x = uniform(&mut r, &[1, 5, 3, 3], -2.0, 2.0);
    let mut tape = Tape64::new();
    let xv = tape.constant(x.clone()).unwrap();
    let avg = tape.pool_channel(xv, PoolKind::Avg).unwrap();
    let max = tape.pool_channel(xv, PoolKind::Max).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let mut s = 0.0;
            let mut m = f64::NEG_INFINITY;
            for c in 0..5 {
                let v = x.data()[(c * 3 + i) * 3 + j];
                s += v;
                m = m.max(v);
            }
            let p = i * 3 + j;
            assert!((tape.value(avg).data()[p] - s / 5.0).abs() < 1e-15);
            assert_eq!(tape.value(max).data()[p], m);
        }
    }
}

#[test]
fn dense_examples() {
    let mut tape = Tape64::new();
    let x = tape.constant(t(&[1, 2], &[1., 2.])).unwrap();
    let w = tape.constant(t(&[1, 2], &[3., 4.])).unwrap();
    let b = tape.constant(t(&[1], &[5.])).unwrap();
    let y = tape.dense(x, w, Some(b)).unwrap();
    assert_eq!(tape.value(y).data(), &[16.]);

    let x = tape
        .constant(t(&[2, 3], &[1., -2., 3., 0.5, 0., -1.]))
        .unwrap();
    let eye = tape
        .constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]))
        .unwrap();
    let zero = tape.constant(Tensor::zeros(&[3]).unwrap()).unwrap();
    let y = tape.dense(x, eye, Some(zero)).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(x).data());

    let bad = tape.constant(Tensor::zeros(&[2, 2]).unwrap()).unwrap();
    assert!(matches!(tape.dense(x, bad, None), Err(Error::Dimension(_))));
}

#[test]
fn dense_gradient_is_tight_at_64_bit() {
    let mut r = rng(3);
    let x = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let w = uniform(&mut r, &[2, 4], -1.0, 1.0);
    let b = uniform(&mut r, &[2], -1.0, 1.0);
    let err = fd_max_rel_error(&[x, w, b], |tp, v| {
        let y = tp.dense(v[0], v[1], Some(v[2])).unwrap();
        let sq = tp.broadcast_mul(y, y).unwrap();
        tp.sum(sq).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn broadcast_mul_examples() {
    let mut tape = Tape64::new();
    let a = tape
        .leaf(Tensor::ones(&[1, 2, 2, 2]).unwrap(), true)
        .unwrap();
    let b = tape.leaf(t(&[1, 2, 1, 1], &[2., 3.]), true).unwrap();
    let y = tape.broadcast_mul(a, b).unwrap();
    assert_eq!(tape.value(y).data(), &[2., 2., 2., 2., 3., 3., 3., 3.]);
    let l = tape.sum(y).unwrap();
    tape.backward(l).unwrap();
    // d/db of sum(a*b) is the per-channel sum of a.
    assert_eq!(tape.grad(b).unwrap(), &[4., 4.]);

    let bad = tape.constant(Tensor::ones(&[1, 3, 1, 1]).unwrap()).unwrap();
    assert!(matches!(
        tape.broadcast_mul(a, bad),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn bilinear_upsample_matches_direct_formula() {
    let src = [[0.0, 1.0], [2.0, 3.0]];
    let mut tape = Tape64::new();
    let x = tape.constant(t(&[1, 1, 2, 2], &[0., 1., 2., 3.])).unwrap();
    let y = tape.bilinear_resize(x, 4, 4).unwrap();
    let coord = |i: usize| ((i as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0);
    for i in 0..4 {
        for j in 0..4 {
            let (cy, cx) = (coord(i), coord(j));
            let (y0, x0) = (cy.floor() as usize, cx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(1), (x0 + 1).min(1));
            let (ly, lx) = (cy - y0 as f64, cx - x0 as f64);
            let want = (1.0 - ly) * (1.0 - lx) * src[y0][x0]
                + (1.0 - ly) * lx * src[y0][x1]
                + ly * (1.0 - lx) * src[y1][x0]
                + ly * lx * src[y1][x1];
            let got = tape.value(y).data()[i * 4 + j];
            assert!((got - want).abs() < 1e-15, "({i},{j}) {got} vs {want}");
        }
    }
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape64::new();
    let uniform_logits = tape
        .constant(Tensor::zeros(&[1, 4, 2, 2]).unwrap())
        .unwrap();
    let l = tape
        .softmax_cross_entropy(uniform_logits, &[0, 1, 2, 3], 255)
        .unwrap();
    assert!((scalar_value(&tape, l) - 4f64.ln()).abs() < 1e-12);

    let mut favored = vec![0.0; 4];
    favored[1] = 1000.0;
    let logits = tape.constant(t(&[1, 4, 1, 1], &favored)).unwrap();
    let l = tape.softmax_cross_entropy(logits, &[1], 255).unwrap();
    assert!(scalar_value(&tape, l).abs() < 1e-12);

    let logits = tape
        .leaf(Tensor::ones(&[1, 4, 1, 2]).unwrap(), true)
        .unwrap();
    let l = tape
        .softmax_cross_entropy(logits, &[255, 255], 255)
        .unwrap();
    assert_eq!(scalar_value(&tape, l), 0.0);
    tape.backward(l).unwrap();
    assert!(tape
        .grad(logits)
        .map_or(true, |g| g.iter().all(|v| *v == 0.0)));

    let logits = tape
        .constant(Tensor::zeros(&[1, 4, 1, 1]).unwrap())
        .unwrap();
    assert!(matches!(
        tape.softmax_cross_entropy(logits, &[4], 255),
        Err(Error::Label {
            label: 4,
            classes: 4
        })
    ));
}

#[test]
fn cross_entropy_gradient_and_ignored_pixels() {
    let mut r = rng(4);
    let logits = uniform(&mut r, &[2, 3, 2, 2], -2.0, 2.0);
    let labels = [0u8, 1, 2, 255, 1, 1, 255, 0];
    let err = fd_max_rel_error(&[logits.clone()], |tp, v| {
        tp.softmax_cross_entropy(v[0], &labels, 255).unwrap()
    });
    assert!(err < FD_RTOL, "{err}");

    let mut tape = Tape64::new();
    let lv = tape.leaf(logits, true).unwrap();
    let l = tape.softmax_cross_entropy(lv, &labels, 255).unwrap();
    tape.backward(l).unwrap();
    let g = tape.grad(lv).unwrap();
    // pixel 3 of sample 0 and pixel 2 of sample 1 are ignored
    for c in 0..3 {
        assert_eq!(g[c * 4 + 3], 0.0);
        assert_eq!(g[12 + c * 4 + 2], 0.0);
    }
}

#[test]
fn backward_basics() {
    let mut r = rng(5);
    let xv = uniform(&mut r, &[2, 3], -1.0, 1.0);
    let mut tape = Tape64::new();
    let x = tape.leaf(xv.clone(), true).unwrap();
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);

    let mut tape = Tape64::new();
    let x = tape.leaf(xv.clone(), true).unwrap();
    let sq = tape.broadcast_mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    tape.backward(s).unwrap();
    let want: Vec<f64> = xv.data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(tape.grad(x).unwrap(), want.as_slice());

    // A second sweep without reset doubles every gradient.
    tape.backward(s).unwrap();
    let doubled: Vec<f64> = want.iter().map(|v| 2.0 * v).collect();
    assert_eq!(tape.grad(x).unwrap(), doubled.as_slice());

    assert!(matches!(tape.backward(sq), Err(Error::Contract(_))));
}

#[test]
fn unreachable_parameters_get_no_gradient() {
    let mut tape = Tape64::new();
    let used = tape.leaf(Tensor::ones(&[2]).unwrap(), true).unwrap();
    let unused = tape.leaf(Tensor::ones(&[2]).unwrap(), true).unwrap();
    let _ = tape.scale(unused, 3.0).unwrap();
    let s = tape.sum(used).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(unused).is_none());
}

#[test]
fn inference_tape_records_nothing() {
    let mut tape = Tape::<f64>::inference();
    let x = tape
        .leaf(Tensor::ones(&[1, 1, 2, 2]).unwrap(), true)
        .unwrap();
    let y = tape.relu(x).unwrap();
    let _ = tape.sum(y).unwrap();
    assert_eq!(tape.recorded_ops(), 0);
    assert!(!tape.requires_grad(x));
}

#[test]
fn checked_mode_rejects_non_finite() {
    let mut tape = Tape64::new();
    assert!(matches!(
        tape.leaf(t(&[1], &[f64::NAN]), true),
        Err(Error::NonFinite { .. })
    ));
    let x = tape.constant(t(&[1], &[1e300])).unwrap();
    assert!(matches!(tape.scale(x, 1e300), Err(Error::NonFinite { .. })));
}

#[test]
fn f32_tape_runs_the_same_ops() {
    let mut tape = Tape::<f32>::new();
    let x = tape
        .leaf(
            Tensor::<f32>::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap(),
            true,
        )
        .unwrap();
    let k = tape
        .constant(Tensor::<f32>::ones(&[1, 1, 1, 1]).unwrap())
        .unwrap();
    let y = tape.conv2d(x, k, None, 1, 0).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0f32, 2., 3., 4.]);
    assert_eq!(tape.grad(x).unwrap(), &[1.0f32; 4]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pointwise_identity_conv_is_identity(data in prop::collection::vec(-10.0f64..10.0, 18)) {
        let mut tape = Tape64::new();
        let x = tape.constant(t(&[1, 2, 3, 3], &data)).unwrap();
        let k = tape.constant(t(&[2, 2, 1, 1], &[1., 0., 0., 1.])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2]).unwrap()).unwrap();
        let y = tape.conv2d(x, k, Some(b), 1, 0).unwrap();
        prop_assert_eq!(tape.value(y).data(), data.as_slice());
    }

    #[test]
    fn broadcast_by_ones_is_exact_and_commutes(data in prop::collection::vec(-10.0f64..10.0, 8)) {
        let mut tape = Tape64::new();
        let a = tape.constant(t(&[1, 2, 2, 2], &data)).unwrap();
        let ones = tape.constant(Tensor::ones(&[1, 2, 1, 1]).unwrap()).unwrap();
        let y = tape.broadcast_mul(a, ones).unwrap();
        prop_assert_eq!(tape.value(y).data(), data.as_slice());
        let b = tape.constant(t(&[1, 2, 2, 2], &data.iter().rev().copied().collect::<Vec<_>>())).unwrap();
        let ab = tape.broadcast_mul(a, b).unwrap();
        let ba = tape.broadcast_mul(b, a).unwrap();
        prop_assert_eq!(tape.value(ab).data(), tape.value(ba).data());
    }

    #[test]
    fn resize_identity_and_constant(
        data in prop::collection::vec(-5.0f64..5.0, 12),
        c in -3.0f64..3.0,
        oh in 1usize..9,
        ow in 1usize..9,
    ) {
        let mut tape = Tape64::new();
        let x = tape.constant(t(&[1, 1, 3, 4], &data)).unwrap();
        let same = tape.bilinear_resize(x, 3, 4).unwrap();
        prop_assert_eq!(tape.value(same).data(), data.as_slice());
        let k = tape.constant(Tensor::full(&[1, 2, 3, 4], c).unwrap()).unwrap();
        let r = tape.bilinear_resize(k, oh, ow).unwrap();
        for v in tape.value(r).data() {
            prop_assert!((v - c).abs() <= 4.0 * f64::EPSILON * c.abs().max(1.0));
        }
    }

    #[test]
    fn cross_entropy_is_nonnegative(logits in prop::collection::vec(-20.0f64..20.0, 12), labels in prop::collection::vec(0u8..3, 4)) {
        let mut tape = Tape64::new();
        let l = tape.constant(t(&[1, 3, 2, 2], &logits)).unwrap();
        let ce = tape.softmax_cross_entropy(l, &labels, 255).unwrap();
        prop_assert!(scalar_value(&tape, ce) >= 0.0);
    }
}
