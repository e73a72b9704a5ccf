use ndtensor::{grad_check, Reduction, Tape, Tensor, TensorError, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape.to_vec(), data)
}

fn sum_weighted(t: &mut Tape, y: Var, seed: u64) -> ndtensor::Result<Var> {
    // Random projection so every output coordinate carries a distinct weight.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let w = randn(&mut rng, t.shape(y));
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    t.reduce_all(p, Reduction::Sum)
}

// ---------------------------------------------------------------- conv2d

#[test]
fn conv_zero_kernel_gives_zero() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_vec(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()));
    let w = t.constant(Tensor::zeros(vec![1, 1, 3, 3]));
    let b = t.constant(Tensor::zeros(vec![1]));
    let y = t.conv2d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(t.value(y).data(), &[0.0]);
}

#[test]
fn conv_identity_kernel_reproduces_input() {
    let mut t = Tape::new();
    let input = Tensor::from_vec(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect());
    let x = t.constant(input.clone());
    let mut k = Tensor::zeros(vec![1, 1, 3, 3]);
    k.data_mut()[4] = 1.0;
    let w = t.constant(k);
    let b = t.constant(Tensor::zeros(vec![1]));
    let y = t.conv2d(x, w, Some(b), 1, 1).unwrap();
    assert_eq!(t.value(y), &input);
}

#[test]
fn conv_rejects_bad_geometry() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(vec![1, 2, 4, 4]));
    let w = t.constant(Tensor::zeros(vec![3, 2, 3, 3]));
    // (4 + 2 - 3) / 2 is not integral.
    assert!(matches!(t.conv2d(x, w, None, 2, 1), Err(TensorError::Geometry { .. })));
    // Trailing-only padding makes the same stride-2 layer exact.
    let y = t.conv2d_padded(x, w, None, 2, (0, 1)).unwrap();
    assert_eq!(t.shape(y), &[1, 3, 2, 2]);
    let w_bad = t.constant(Tensor::zeros(vec![3, 5, 3, 3]));
    assert!(matches!(t.conv2d(x, w_bad, None, 1, 1), Err(TensorError::Shape { .. })));
    let w_even = t.constant(Tensor::zeros(vec![3, 2, 2, 2]));
    assert!(matches!(t.conv2d(x, w_even, None, 1, 0), Err(TensorError::Geometry { .. })));
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = randn(&mut rng, &[2, 3, 5, 5]);
    let w = randn(&mut rng, &[4, 3, 3, 3]);
    let b = randn(&mut rng, &[4]);
    for (stride, pad) in [(1, (1, 1)), (2, (1, 1)), (1, (0, 0)), (2, (0, 0))] {
        let r = grad_check(
            |t, v| {
                let y = t.conv2d_padded(v[0], v[1], Some(v[2]), stride, pad)?;
                sum_weighted(t, y, 1)
            },
            &[x.clone(), w.clone(), b.clone()],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "stride {stride} pad {pad:?}: {r:?}");
    }
}

#[test]
fn pointwise_conv_fast_path_matches_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = randn(&mut rng, &[2, 3, 4, 4]);
    let w = randn(&mut rng, &[5, 3, 1, 1]);
    let r = grad_check(
        |t, v| {
            let y = t.conv2d(v[0], v[1], None, 1, 0)?;
            sum_weighted(t, y, 2)
        },
        &[x, w],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

// ---------------------------------------------------------------- linear

#[test]
fn linear_identity_and_bias_rows() {
    let mut t = Tape::new();
    let input = Tensor::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]);
    let x = t.constant(input.clone());
    let mut eye = Tensor::zeros(vec![3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 3 + i] = 1.0;
    }
    let w = t.constant(eye);
    let zero = t.constant(Tensor::zeros(vec![3]));
    let y = t.linear(x, w, Some(zero)).unwrap();
    assert_eq!(t.value(y), &input);

    let wz = t.constant(Tensor::zeros(vec![2, 3]));
    let b = t.constant(Tensor::from_vec(vec![2], vec![0.25, -4.0]));
    let y = t.linear(x, wz, Some(b)).unwrap();
    assert_eq!(t.value(y).data(), &[0.25, -4.0, 0.25, -4.0]);

    let bad = t.constant(Tensor::zeros(vec![2, 4]));
    assert!(t.linear(x, bad, None).is_err());
}

#[test]
fn linear_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = randn(&mut rng, &[4, 8]);
    let w = randn(&mut rng, &[5, 8]);
    let b = randn(&mut rng, &[5]);
    let r = grad_check(
        |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            sum_weighted(t, y, 3)
        },
        &[x, w, b],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-8, "{r:?}");
}

// ------------------------------------------------------------- pointwise

#[test]
fn pointwise_fixed_points() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_vec(vec![3], vec![0.0, -3.0, 2.0]));
    let s = t.sigmoid(x).unwrap();
    assert_eq!(t.value(s).data()[0], 0.5);
    let r = t.relu(x).unwrap();
    assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
    assert!(matches!(t.log(x), Err(TensorError::Domain { .. })));
    let n = t.neg(x).unwrap();
    let a = t.add_const(n, 1.0).unwrap();
    let m = t.mul_const(a, 2.0).unwrap();
    assert_eq!(t.value(m).data(), &[2.0, 8.0, -2.0]);
}

#[test]
fn pointwise_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // Keep relu inputs away from the kink.
    let data: Vec<f64> = (0..24)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..2.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    let x = Tensor::from_vec(vec![2, 3, 4], data);
    let pos = x.map(|v| v.abs() + 0.1);
    let r = grad_check(
        |t, v| {
            let a = t.relu(v[0])?;
            let b = t.sigmoid(v[0])?;
            let c = t.log(v[1])?;
            let d = t.neg(v[0])?;
            let e = t.add_const(d, 0.3)?;
            let f = t.mul_const(e, -1.7)?;
            let ab = t.add(a, b)?;
            let cf = t.mul(c, f)?;
            let y = t.div(ab, v[1])?;
            let y = t.sub(y, cf)?;
            sum_weighted(t, y, 4)
        },
        &[x, pos],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

// ------------------------------------------------------------------- gap

#[test]
fn gap_is_spatial_mean() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_vec(vec![1, 2, 2, 2], vec![1., 3., 5., 7., 2.5, 2.5, 2.5, 2.5]));
    let g = t.gap(x).unwrap();
    assert_eq!(t.value(g).data(), &[4.0, 2.5]);
}

#[test]
fn gap_gradient_and_mass_conservation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = randn(&mut rng, &[2, 3, 4, 5]);
    let r = grad_check(
        |t, v| {
            let y = t.gap(v[0])?;
            sum_weighted(t, y, 5)
        },
        &[x.clone()],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-8, "{r:?}");

    let mut t = Tape::new();
    let xv = t.param(x);
    let y = t.gap(xv).unwrap();
    let w = t.constant(Tensor::from_vec(vec![2, 3], vec![1., -2., 3., 0.5, 7., -1.]));
    let p = t.mul(y, w).unwrap();
    let s = t.reduce_all(p, Reduction::Sum).unwrap();
    let g = t.backward(s).unwrap().get(xv).unwrap();
    for (c, &wc) in [1., -2., 3., 0.5, 7., -1.].iter().enumerate() {
        let mass: f64 = g.data()[c * 20..(c + 1) * 20].iter().sum();
        assert!((mass - wc).abs() < 1e-12);
    }
}

// ---------------------------------------------------------------- resize

/// Scalar bilinear sampler with half-pixel centres, written without shared code.
fn resize_oracle(x: &Tensor, oh: usize, ow: usize) -> Vec<f64> {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let mut out = Vec::new();
    for p in 0..s[0] * s[1] {
        for oy in 0..oh {
            for ox in 0..ow {
                let sy = f64::max(0.0, (oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5);
                let sx = f64::max(0.0, (ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5);
                let y0 = sy as usize;
                let x0 = sx as usize;
                let y1 = if y0 + 1 < h { y0 + 1 } else { h - 1 };
                let x1 = if x0 + 1 < w { x0 + 1 } else { w - 1 };
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let px = |yy: usize, xx: usize| x.data()[p * h * w + yy * w + xx];
                let v = (1.0 - fy) * ((1.0 - fx) * px(y0, x0) + fx * px(y0, x1))
                    + fy * ((1.0 - fx) * px(y1, x0) + fx * px(y1, x1));
                out.push(v);
            }
        }
    }
    out
}

#[test]
fn resize_same_size_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = randn(&mut rng, &[2, 3, 5, 7]);
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let y = t.resize_bilinear(v, 5, 7).unwrap();
    assert_eq!(t.value(y), &x);
}

#[test]
fn resize_from_single_pixel_is_constant() {
    let mut t = Tape::new();
    let v = t.constant(Tensor::from_vec(vec![1, 1, 1, 1], vec![0.37]));
    let y = t.resize_bilinear(v, 6, 6).unwrap();
    assert!(t.value(y).data().iter().all(|&p| p == 0.37));
}

#[test]
fn resize_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (h, w, oh, ow) in [(2, 2, 4, 4), (4, 4, 2, 2), (3, 5, 7, 2)] {
        let x = randn(&mut rng, &[2, 2, h, w]);
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let y = t.resize_bilinear(v, oh, ow).unwrap();
        let expect = resize_oracle(&x, oh, ow);
        for (a, b) in t.value(y).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }
}

#[test]
fn resize_and_pool_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = randn(&mut rng, &[1, 2, 3, 4]);
    let r = grad_check(
        |t, v| {
            let a = t.resize_bilinear(v[0], 7, 5)?;
            let b = t.adaptive_avg_pool(a, 3, 2)?;
            let c = t.adaptive_avg_pool(v[0], 4, 6)?;
            let sa = sum_weighted(t, b, 6)?;
            let sc = sum_weighted(t, c, 7)?;
            t.add(sa, sc)
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-8, "{r:?}");
}

// ---------------------------------------------------------------- reduce

#[test]
fn population_variance_examples() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::from_vec(vec![2], vec![0.5, 0.5]));
    let va = t.var(a, &[0]).unwrap();
    assert_eq!(t.value(va).item(), Some(0.0));
    let b = t.constant(Tensor::from_vec(vec![2], vec![0.0, 1.0]));
    let vb = t.var(b, &[0]).unwrap();
    assert_eq!(t.value(vb).item(), Some(0.25));
    let e = t.constant(Tensor::zeros(vec![0, 3]));
    assert!(matches!(t.sum(e, &[0]), Err(TensorError::EmptyReduction { .. })));
    assert!(t.sum(b, &[1]).is_err());
}

#[test]
fn reductions_over_axes() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]));
    let s0 = t.sum(x, &[0]).unwrap();
    assert_eq!(t.value(s0).data(), &[5., 7., 9.]);
    let m1 = t.mean(x, &[1]).unwrap();
    assert_eq!(t.value(m1).data(), &[2., 5.]);
    let all = t.reduce_all(x, Reduction::Sum).unwrap();
    assert_eq!(t.value(all).shape(), &[] as &[usize]);
}

#[test]
fn reduction_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = randn(&mut rng, &[3, 4, 2]);
    for kind in [Reduction::Sum, Reduction::Mean, Reduction::Var] {
        for axes in [vec![0], vec![1, 2], vec![0, 2], vec![0, 1, 2]] {
            let r = grad_check(
                |t, v| {
                    let y = t.reduce(v[0], kind, &axes)?;
                    let y = t.mul(y, y)?;
                    t.reduce_all(y, Reduction::Sum)
                },
                &[x.clone()],
                1e-5,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-6, "{kind:?} {axes:?}: {r:?}");
        }
    }
}

// --------------------------------------------------------------- softmax

#[test]
fn softmax_family_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = randn(&mut rng, &[2, 3, 2, 2]);
    let index: Vec<usize> = (0..8).map(|i| (i * 7) % 3).collect();
    let r = grad_check(
        |t, v| {
            let ls = t.log_softmax(v[0])?;
            let picked = t.gather_channels(ls, &index)?;
            let a = sum_weighted(t, picked, 8)?;
            let sm = t.softmax(v[0])?;
            let b = sum_weighted(t, sm, 9)?;
            let cat = t.concat_channels(&[v[0], sm])?;
            let c = sum_weighted(t, cat, 10)?;
            let ab = t.add(a, b)?;
            t.add(ab, c)
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-7, "{r:?}");
}

#[test]
fn broadcast_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let s = randn(&mut rng, &[2]);
    let a = randn(&mut rng, &[2, 3]);
    let x = randn(&mut rng, &[2, 3, 2, 2]);
    let r = grad_check(
        |t, v| {
            let sb = t.broadcast(v[0], &[2, 3])?;
            let g = t.mul(sb, v[1])?;
            let gb = t.broadcast(g, &[2, 3, 2, 2])?;
            let y = t.mul(gb, v[2])?;
            sum_weighted(t, y, 11)
        },
        &[s, a, x],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-8, "{r:?}");
    let mut t = Tape::new();
    let v = t.constant(Tensor::zeros(vec![3]));
    assert!(t.broadcast(v, &[2, 3]).is_err());
}

// -------------------------------------------------------------- backward

#[test]
fn scalar_backward_examples() {
    let mut t = Tape::new();
    let x = t.param(Tensor::scalar(3.0));
    let y = t.mul(x, x).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().item(), Some(6.0));

    let mut t = Tape::new();
    let x = t.param(Tensor::scalar(2.0));
    let y = t.param(Tensor::scalar(5.0));
    let z = t.mul(x, y).unwrap();
    let g = t.backward(z).unwrap();
    assert_eq!(g.get(x).unwrap().item(), Some(5.0));
    assert_eq!(g.get(y).unwrap().item(), Some(2.0));
}

#[test]
fn backward_error_paths() {
    let mut t = Tape::new();
    let x = t.param(Tensor::from_vec(vec![2], vec![1.0, 2.0]));
    let y = t.mul(x, x).unwrap();
    assert!(matches!(t.backward(y), Err(TensorError::NonScalarRoot(_))));
    let s = t.reduce_all(y, Reduction::Sum).unwrap();
    t.backward(s).unwrap();
    assert!(matches!(t.backward(s), Err(TensorError::TapeConsumed)));
    assert!(matches!(Tape::new().backward(x), Err(TensorError::EmptyTape)));
}

#[test]
fn constants_receive_no_gradient() {
    let mut t = Tape::new();
    let c = t.constant(Tensor::scalar(2.0));
    let x = t.param(Tensor::scalar(3.0));
    let y = t.mul(c, x).unwrap();
    let g = t.backward(y).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(x).unwrap().item(), Some(2.0));
}

#[test]
fn composite_chain_gradient() {
    // conv → relu → gap → linear → sigmoid
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = randn(&mut rng, &[2, 3, 6, 6]);
    let w = randn(&mut rng, &[4, 3, 3, 3]);
    let b = randn(&mut rng, &[4]);
    let lw = randn(&mut rng, &[2, 4]);
    let lb = randn(&mut rng, &[2]);
    let r = grad_check(
        |t, v| {
            let h = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            let h = t.relu(h)?;
            let h = t.gap(h)?;
            let h = t.linear(h, v[3], Some(v[4]))?;
            let h = t.sigmoid(h)?;
            sum_weighted(t, h, 12)
        },
        &[x, w, b, lw, lb],
        1e-6,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn every_op_agrees_with_finite_differences_over_ten_seeds() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = randn(&mut rng, &[2, 2, 4, 4]);
        let w = randn(&mut rng, &[3, 2, 3, 3]);
        let lw = randn(&mut rng, &[2, 3]);
        let r = grad_check(
            |t, v| {
                let h = t.conv2d(v[0], v[1], None, 1, 1)?;
                let h = t.sigmoid(h)?;
                let up = t.resize_bilinear(h, 8, 8)?;
                let pooled = t.adaptive_avg_pool(up, 2, 2)?;
                let g = t.gap(pooled)?;
                let l = t.linear(g, v[2], None)?;
                let sm = t.log_softmax(up)?;
                let vv = t.var(sm, &[0, 2, 3])?;
                let a = sum_weighted(t, l, seed)?;
                let b = sum_weighted(t, vv, seed + 1)?;
                t.add(a, b)
            },
            &[x, w, lw],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "seed {seed}: {r:?}");
    }
}

#[test]
fn identity_composition_leaves_gradients_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = randn(&mut rng, &[1, 2, 3, 3]);
    let w = randn(&mut rng, &[2, 2, 3, 3]);
    let grads = |wrap: bool| {
        let mut t = Tape::new();
        let xv = t.param(x.clone());
        let wv = t.param(w.clone());
        let y = t.conv2d(xv, wv, None, 1, 1).unwrap();
        let y = if wrap { t.identity(y).unwrap() } else { y };
        let s = sum_weighted(&mut t, y, 0).unwrap();
        let g = t.backward(s).unwrap();
        (g.get(xv).unwrap(), g.get(wv).unwrap())
    };
    assert_eq!(grads(false), grads(true));
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut t = Tape::new();
        let x = t.constant(randn(&mut rng, &[2, 3, 8, 8]));
        let w = t.constant(randn(&mut rng, &[5, 3, 3, 3]));
        let y = t.conv2d(x, w, None, 1, 1).unwrap();
        let y = t.softmax(y).unwrap();
        t.value(y).checksum()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn relu_and_sigmoid_ranges(v in proptest::collection::vec(-50.0f64..50.0, 1..32)) {
        let n = v.len();
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(vec![n], v.clone()));
        let r = t.relu(x).unwrap();
        let s = t.sigmoid(x).unwrap();
        for i in 0..n {
            prop_assert_eq!(t.value(r).data()[i], v[i].max(0.0));
            let si = t.value(s).data()[i];
            prop_assert!((0.0..=1.0).contains(&si));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(v in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(vec![1, 3, 2, 2], v));
        let s = t.softmax(x).unwrap();
        let tot = t.sum(s, &[1]).unwrap();
        for &p in t.value(tot).data() {
            prop_assert!((p - 1.0).abs() < 1e-12);
        }
    }
}
