use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{grad_check, relative_error, FnFragment, GradCheckOptions};
use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.gen_range(lo..hi)).collect::<Vec<_>>())
}

/// Central-difference oracle over a forward-only closure.
fn fd_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-5;
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            p[i] += h;
            let mut m = x.to_vec();
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        let e = relative_error(x, y);
        assert!(e < tol, "index {i}: analytic {x} vs numeric {y} (rel {e})");
    }
}

/// Checks d sum(w * op(x)) / dx for a random readout w.
fn check_unary(shape: &[usize], lo: f64, hi: f64, seed: u64, op: impl Fn(&mut Graph<f64>, Var) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_t(&mut rng, shape, lo, hi);
    let readout: Vec<f64> = {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let o = op(&mut g, v);
        (0..g.value(o).len()).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };
    let forward = |data: &[f64]| {
        let mut g = Graph::new();
        let v = g.constant(t(shape, data));
        let o = op(&mut g, v);
        g.value(o).data().iter().zip(&readout).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let o = op(&mut g, v);
    let shape_o = g.value(o).shape().to_vec();
    let r = g.constant(t(&shape_o, &readout));
    let prod = g.mul(o, r).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();
    assert_close(g.grad(v).unwrap(), &fd_grad(x.data(), forward), 1e-5);
}

// ------------------------------------------------------------------ conv2d

#[test]
fn conv_identity_filter_on_single_pixel() {
    let mut w = vec![0.0; 9];
    w[4] = 1.0;
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 1, 1], &[0.37]));
    let w = g.constant(t(&[3, 3, 1, 1], &w));
    let b = g.constant(t(&[1], &[0.0]));
    let y = g.conv3x3(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[0.37]);
}

#[test]
fn conv_all_ones_on_2x2_counts_in_bounds_taps() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::ones([1, 2, 2, 1]));
    let w = g.constant(Tensor::ones([3, 3, 1, 1]));
    let y = g.conv3x3(x, w, None).unwrap();
    assert_eq!(g.value(y).data(), &[4.0, 4.0, 4.0, 4.0]);
}

#[test]
fn conv_channel_mismatch_is_structural() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::ones([1, 4, 4, 2]));
    let w = g.constant(Tensor::ones([3, 3, 3, 1]));
    assert!(matches!(g.conv3x3(x, w, None), Err(Error::Structure(_))));
}

#[test]
fn conv_filter_gradient_of_sum_is_sum_of_touched_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_t(&mut rng, &[1, 3, 4, 2], -2.0, 2.0);
    let w = rand_t(&mut rng, &[3, 3, 2, 1], -1.0, 1.0);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.leaf(w.clone());
    let y = g.conv3x3(xv, wv, None).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    let grad = g.grad(wv).unwrap();
    // Hand oracle: tap (ky, kx, ci) touches every input (y+ky-1, x+kx-1, ci) in bounds.
    for ky in 0..3 {
        for kx in 0..3 {
            for ci in 0..2 {
                let mut touched = 0.0;
                for yy in 0..3i64 {
                    for xx in 0..4i64 {
                        let (iy, ix) = (yy + ky as i64 - 1, xx + kx as i64 - 1);
                        if (0..3).contains(&iy) && (0..4).contains(&ix) {
                            touched += x.at4(0, iy as usize, ix as usize, ci);
                        }
                    }
                }
                let got = grad[(ky * 3 + kx) * 2 + ci];
                assert!(relative_error(got, touched) < 1e-12, "{got} vs {touched}");
            }
        }
    }
    let fd = fd_grad(w.data(), |wd| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(t(&[3, 3, 2, 1], wd));
        let y = g.conv3x3(xv, wv, None).unwrap();
        g.value(y).data().iter().sum()
    });
    assert_close(grad, &fd, 1e-6);
}

#[test]
fn conv_input_gradient_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = rand_t(&mut rng, &[3, 3, 2, 3], -1.0, 1.0);
    let b = rand_t(&mut rng, &[3], -1.0, 1.0);
    check_unary(&[2, 4, 3, 2], -2.0, 2.0, 6, move |g, x| {
        let w = g.constant(w.clone());
        let b = g.constant(b.clone());
        g.conv3x3(x, w, Some(b)).unwrap()
    });
}

#[test]
fn patched_conv_equals_partition_conv_assemble() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let k = 2;
    let x = rand_t(&mut rng, &[2, 4, 6, 2], -1.0, 1.0);
    let w = rand_t(&mut rng, &[k * k, 3, 3, 2, 3], -1.0, 1.0);
    let b = rand_t(&mut rng, &[k * k, 3], -1.0, 1.0);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let fused = g.patch_conv3x3(xv, wv, Some(bv), k).unwrap();
    let fused = g.value(fused).clone();

    let per = 9 * 2 * 3;
    let mut outs = Vec::new();
    for (p, patch) in partition_patches(&x, k).unwrap().into_iter().enumerate() {
        let mut g = Graph::new();
        let xv = g.constant(patch);
        let wv = g.constant(t(&[3, 3, 2, 3], &w.data()[p * per..(p + 1) * per]));
        let bv = g.constant(t(&[3], &b.data()[p * 3..(p + 1) * 3]));
        let y = g.conv3x3(xv, wv, Some(bv)).unwrap();
        outs.push(g.value(y).clone());
    }
    let reference = assemble_patches(&outs, k).unwrap();
    assert_close(fused.data(), reference.data(), 1e-14);
}

// --------------------------------------------------------- fully connected

#[test]
fn linear_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2], &[1.0, 2.0]));
    let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 3.0]));
    let y = g.linear(x, w, None).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 6.0]);

    let x = g.constant(t(&[3], &[0.5, -1.0, 2.0]));
    let eye = g.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
    let zb = g.constant(Tensor::zeros([3]));
    let y = g.linear(x, eye, Some(zb)).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, -1.0, 2.0]);

    let zw = g.constant(Tensor::zeros([3, 2]));
    let zb = g.constant(Tensor::zeros([2]));
    let y = g.linear(x, zw, Some(zb)).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0]);

    let bad = g.constant(Tensor::zeros([4, 2]));
    assert!(matches!(g.linear(x, bad, None), Err(Error::Structure(_))));
}

#[test]
fn linear_layer_gradcheck_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = rand_t(&mut rng, &[3, 4], -2.0, 2.0);
    let mut params = ParamSet::new();
    let w = params.add("w", ParamKind::Weight, rand_t(&mut rng, &[4, 2], -1.0, 1.0));
    let b = params.add("b", ParamKind::Bias, rand_t(&mut rng, &[2], -1.0, 1.0));
    let readout = rand_t(&mut rng, &[3, 2], -1.0, 1.0);
    let mut frag = FnFragment {
        params,
        build: move |ps: &ParamSet<f64>| {
            let mut g = Graph::new();
            let bind = ps.bind(&mut g);
            let xv = g.constant(x.clone());
            let y = g.linear(xv, bind.var(w), Some(bind.var(b)))?;
            let r = g.constant(readout.clone());
            let p = g.mul(y, r)?;
            let loss = g.sum(p);
            Ok((g, loss, bind))
        },
    };
    let report = grad_check(&mut frag, GradCheckOptions::default()).unwrap();
    assert_eq!(report.skipped, 0);
    assert!(report.max_rel_err < 1e-8, "{report:?}");
}

// -------------------------------------------------------------- activations

#[test]
fn activation_examples() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[3], &[0.0, -3.0, 3.0]));
    let s = g.sigmoid(x);
    assert_eq!(g.value(s).data()[0], 0.5);
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 3.0]);

    let mut g = Graph::new();
    let x = g.leaf(t(&[1], &[0.0]));
    let s = g.sigmoid(x);
    g.backward(s).unwrap();
    let analytic = g.grad(x).unwrap()[0];
    assert_eq!(analytic, 0.25);
    let fd = fd_grad(&[0.0], |v| crate::tensor::sigmoid(v[0]));
    assert!(relative_error(analytic, fd[0]) < 1e-9);
}

#[test]
fn sigmoid_saturates_inside_open_interval() {
    for v in [-30.0, -10.0, 10.0, 30.0] {
        let s: f64 = crate::tensor::sigmoid(v);
        assert!(s > 0.0 && s < 1.0);
    }
}

#[test]
fn activation_gradients_match_fd() {
    check_unary(&[2, 3, 3, 2], -2.0, 2.0, 31, |g, x| g.sigmoid(x));
    // Inputs kept away from the kink.
    check_unary(&[2, 3, 3, 2], 0.1, 2.0, 32, |g, x| g.relu(x));
    check_unary(&[2, 3, 3, 2], -2.0, -0.1, 33, |g, x| g.relu(x));
}

// -------------------------------------------------------------- batch norm

fn bn_run(
    x: &Tensor<f64>,
    scale: &[f64],
    shift: &[f64],
    state: &mut BatchNormState<f64>,
    mode: NormMode,
) -> Result<Tensor<f64>, Error> {
    let c = scale.len();
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let s = g.constant(t(&[c], scale));
    let b = g.constant(t(&[c], shift));
    let y = g.batch_norm(xv, s, b, state, mode)?;
    Ok(g.value(y).clone())
}

#[test]
fn batch_norm_constant_input_yields_shift() {
    let mut st = BatchNormState::new(2);
    let x = t(&[1, 2, 2, 2], &[3.0, -1.0, 3.0, -1.0, 3.0, -1.0, 3.0, -1.0]);
    let y = bn_run(&x, &[2.0, 5.0], &[0.25, -0.5], &mut st, NormMode::Training).unwrap();
    for pair in y.data().chunks(2) {
        assert_eq!(pair, &[0.25, -0.5]);
    }
}

#[test]
fn batch_norm_unit_variance_pair() {
    let mut st = BatchNormState::new(1);
    let x = t(&[2, 1, 1, 1], &[-1.0, 1.0]);
    let y = bn_run(&x, &[1.0], &[0.0], &mut st, NormMode::Training).unwrap();
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((y.data()[0] + expect).abs() < 1e-15);
    assert!((y.data()[1] - expect).abs() < 1e-15);
    // Moving average with momentum 0.9, unbiased variance 2.
    assert!((st.running_mean[0] - 0.0).abs() < 1e-15);
    assert!((st.running_var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-15);
}

#[test]
fn batch_norm_inference_is_deterministic_affine() {
    let mut st = BatchNormState::new(1);
    st.running_mean[0] = 0.5;
    st.running_var[0] = 4.0;
    let x = t(&[1, 1, 3, 1], &[0.5, 2.5, -1.5]);
    let a = bn_run(&x, &[2.0], &[1.0], &mut st, NormMode::Inference).unwrap();
    let b = bn_run(&x, &[2.0], &[1.0], &mut st, NormMode::Inference).unwrap();
    assert_eq!(a, b);
    assert_eq!(st.running_mean[0], 0.5);
    let sd = (4.0f64 + 1e-5).sqrt();
    assert!((a.data()[1] - (1.0 + 2.0 * 2.0 / sd)).abs() < 1e-14);
}

#[test]
fn batch_norm_needs_two_values_in_training() {
    let mut st = BatchNormState::new(1);
    let x = t(&[1, 1, 1, 1], &[4.0]);
    assert!(matches!(
        bn_run(&x, &[1.0], &[0.0], &mut st, NormMode::Training),
        Err(Error::InvalidState(_))
    ));
    assert!(bn_run(&x, &[1.0], &[0.0], &mut st, NormMode::Inference).is_ok());
}

#[test]
fn batch_norm_gradients_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x = rand_t(&mut rng, &[2, 3, 2, 3], -2.0, 2.0);
    let mut params = ParamSet::new();
    let s = params.add("scale", ParamKind::NormScale, rand_t(&mut rng, &[3], 0.5, 1.5));
    let b = params.add("shift", ParamKind::NormShift, rand_t(&mut rng, &[3], -1.0, 1.0));
    let xin = params.add("x", ParamKind::Weight, x);
    let readout = rand_t(&mut rng, &[2, 3, 2, 3], -1.0, 1.0);
    for mode in [NormMode::Training, NormMode::Inference] {
        let readout = readout.clone();
        let mut frag = FnFragment {
            params: params.clone(),
            build: move |ps: &ParamSet<f64>| {
                let mut st = BatchNormState::new(3);
                st.running_mean = vec![0.1, -0.2, 0.3];
                st.running_var = vec![0.5, 1.5, 2.0];
                let mut g = Graph::new();
                let bind = ps.bind(&mut g);
                let y = g.batch_norm(bind.var(xin), bind.var(s), bind.var(b), &mut st, mode)?;
                let r = g.constant(readout.clone());
                let p = g.mul(y, r)?;
                let loss = g.sum(p);
                Ok((g, loss, bind))
            },
        };
        let report = grad_check(
            &mut frag,
            GradCheckOptions {
                tolerance: 1e-5,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "{mode:?}: {report:?}");
    }
}

// ----------------------------------------------------------------- pooling

#[test]
fn max_pool_examples() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
    let y = g.max_pool2x2(x).unwrap();
    assert_eq!(g.value(y).data(), &[4.0]);
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 0.0, 1.0]);

    let mut g = Graph::new();
    let x = g.leaf(Tensor::full([1, 4, 4, 2], 0.7));
    let y = g.max_pool2x2(x).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 2, 2, 2]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.7));
    // Ties go to the first cell of the window in row-major order.
    let s = g.sum(y);
    g.backward(s).unwrap();
    let gx = g.grad(x).unwrap();
    assert_eq!(gx[0], 1.0);
    assert_eq!(gx[2], 0.0);

    let x = g.constant(Tensor::zeros([1, 3, 2, 1]));
    assert!(matches!(g.max_pool2x2(x), Err(Error::Structure(_))));
}

#[test]
fn max_pool_non_max_cell_has_zero_fd_gradient() {
    let x = t(&[1, 2, 2, 1], &[0.3, 1.2, -0.4, 0.9]);
    let fd = fd_grad(x.data(), |d| {
        let mut g = Graph::new();
        let v = g.constant(t(&[1, 2, 2, 1], d));
        let y = g.max_pool2x2(v).unwrap();
        g.value(y).data()[0]
    });
    assert_eq!(fd[0], 0.0);
    assert_eq!(fd[2], 0.0);
    assert_eq!(fd[3], 0.0);
    assert!((fd[1] - 1.0).abs() < 1e-9);
}

#[test]
fn gap_examples() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
    let y = g.global_avg_pool(x).unwrap();
    assert_eq!(g.value(y).data(), &[2.5]);
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.25; 4]);

    let c = g.constant(Tensor::full([2, 3, 3, 2], -1.5));
    let y = g.global_avg_pool(c).unwrap();
    assert_eq!(g.value(y).shape(), &[2, 2]);
    assert!(g.value(y).data().iter().all(|&v| (v + 1.5).abs() < 1e-15));
}

#[test]
fn pooling_gradients_match_fd() {
    check_unary(&[2, 4, 4, 2], -2.0, 2.0, 51, |g, x| g.max_pool2x2(x).unwrap());
    check_unary(&[2, 3, 5, 2], -2.0, 2.0, 52, |g, x| g.global_avg_pool(x).unwrap());
}

// ------------------------------------------------------------------ resize

#[test]
fn resize_constant_and_identity() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full([1, 3, 5, 2], 0.3));
    for (h, w) in [(1, 1), (7, 2), (12, 20)] {
        let y = g.bilinear_resize(x, h, w).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.3));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let r = g.constant(rand_t(&mut rng, &[2, 4, 3, 2], -1.0, 1.0));
    let y = g.bilinear_resize(r, 4, 3).unwrap();
    assert_eq!(g.value(y), g.value(r));
}

#[test]
fn resize_2x2_to_4x4_matches_hand_formula() {
    let (a, b, c, d) = (1.0, 2.0, 3.0, 5.0);
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 2, 2, 1], &[a, b, c, d]));
    let y = g.bilinear_resize(x, 4, 4).unwrap();
    let out = g.value(y);
    // Source coordinate for dst i: (i + 0.5) * 0.5 - 0.5 = {-0.25, 0.25, 0.75, 1.25}, clamped to [0, 1].
    let coord = [0.0, 0.25, 0.75, 1.0];
    let bil = |sy: f64, sx: f64| a * (1.0 - sy) * (1.0 - sx) + b * (1.0 - sy) * sx + c * sy * (1.0 - sx) + d * sy * sx;
    for (yy, xx) in [(0, 0), (1, 2), (2, 1), (3, 3)] {
        let expect = bil(coord[yy], coord[xx]);
        let got = out.at4(0, yy, xx, 0);
        assert!((got - expect).abs() < 1e-14, "({yy},{xx}) {got} vs {expect}");
    }
}

#[test]
fn resize_gradients_match_fd() {
    check_unary(&[1, 2, 3, 2], -2.0, 2.0, 71, |g, x| g.bilinear_resize(x, 5, 7).unwrap());
    check_unary(&[2, 8, 8, 1], -2.0, 2.0, 72, |g, x| g.bilinear_resize(x, 2, 2).unwrap());
}

// ----------------------------------------------------------------- combine

#[test]
fn combine_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let x = rand_t(&mut rng, &[2, 2, 2, 3], -1.0, 1.0);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let ones = g.constant(Tensor::ones([2, 3]));
    let y = g.channel_scale(ones, xv).unwrap();
    assert_eq!(g.value(y), &x);

    let z = g.constant(Tensor::zeros([2, 2, 2, 3]));
    let y = g.mul(xv, z).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    let y = g.add(xv, z).unwrap();
    assert_eq!(g.value(y), &x);

    let other = rand_t(&mut rng, &[2, 2, 2, 5], -1.0, 1.0);
    let ov = g.constant(other.clone());
    let cat = g.concat_channels(&[xv, ov]).unwrap();
    let cv = g.value(cat);
    assert_eq!(cv.shape(), &[2, 2, 2, 8]);
    for b in 0..2 {
        for yy in 0..2 {
            for xx in 0..2 {
                for c in 0..3 {
                    assert_eq!(cv.at4(b, yy, xx, c), x.at4(b, yy, xx, c));
                }
                for c in 0..5 {
                    assert_eq!(cv.at4(b, yy, xx, 3 + c), other.at4(b, yy, xx, c));
                }
            }
        }
    }
    let bad = g.constant(Tensor::zeros([2, 3, 2, 1]));
    assert!(g.concat_channels(&[xv, bad]).is_err());
    let badv = g.constant(Tensor::zeros([2, 2]));
    assert!(g.channel_scale(badv, xv).is_err());
}

#[test]
fn combine_gradients_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let other = rand_t(&mut rng, &[2, 2, 3, 2], -1.0, 1.0);
    let wide = rand_t(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
    let gate = rand_t(&mut rng, &[2, 2, 3, 1], -1.0, 1.0);
    let vec = rand_t(&mut rng, &[2, 2], -1.0, 1.0);
    let o = other.clone();
    check_unary(&[2, 2, 3, 2], -2.0, 2.0, 92, move |g, x| {
        let c = g.constant(o.clone());
        g.mul(x, c).unwrap()
    });
    check_unary(&[2, 2, 3, 2], -2.0, 2.0, 93, move |g, x| {
        let c = g.constant(wide.clone());
        g.concat_channels(&[c, x, c]).unwrap()
    });
    let gt = gate.clone();
    check_unary(&[2, 2, 3, 2], -2.0, 2.0, 94, move |g, x| {
        let c = g.constant(gt.clone());
        g.spatial_scale(c, x).unwrap()
    });
    let o = other.clone();
    check_unary(&[2, 2, 3, 1], -2.0, 2.0, 95, move |g, x| {
        let c = g.constant(o.clone());
        g.spatial_scale(x, c).unwrap()
    });
    let v = vec.clone();
    check_unary(&[2, 2, 3, 2], -2.0, 2.0, 96, move |g, x| {
        let c = g.constant(v.clone());
        g.channel_scale(c, x).unwrap()
    });
    check_unary(&[2, 2], -2.0, 2.0, 97, move |g, x| {
        let c = g.constant(other.clone());
        g.channel_scale(x, c).unwrap()
    });
}

// ---------------------------------------------------------------- backward

#[test]
fn backward_of_parameter_sum_is_all_ones() {
    let mut g = Graph::new();
    let p = g.leaf(t(&[2, 3], &[0.1, -4.0, 2.0, 7.0, 0.0, -0.5]));
    let unused = g.leaf(t(&[2], &[1.0, 2.0]));
    let s = g.sum(p);
    g.backward(s).unwrap();
    assert_eq!(g.grad(p).unwrap(), &[1.0; 6]);
    assert!(g.grad(unused).is_none());
    assert_eq!(g.grad_or_zeros(unused), vec![0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let p = g.leaf(Tensor::<f64>::zeros([2]));
    assert!(matches!(g.backward(p), Err(Error::Structure(_))));
}

#[test]
fn sigmoid_of_dot_at_zero_weight() {
    let x = [0.7, -1.3, 2.0];
    let mut g = Graph::new();
    let w = g.leaf(Tensor::zeros([3, 1]));
    let xv = g.constant(t(&[3], &x));
    let z = g.linear(xv, w, None).unwrap();
    let s = g.sigmoid(z);
    let loss = g.sum(s);
    g.backward(loss).unwrap();
    let grad = g.grad(w).unwrap();
    for (gv, xv) in grad.iter().zip(x) {
        assert_eq!(*gv, 0.25 * xv);
    }
    let fd = fd_grad(&[0.0, 0.0, 0.0], |wd| {
        let z: f64 = wd.iter().zip(x).map(|(a, b)| a * b).sum();
        crate::tensor::sigmoid(z)
    });
    assert_close(grad, &fd, 1e-8);
}

#[test]
fn two_layer_network_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let x = rand_t(&mut rng, &[2, 4, 4, 2], -2.0, 2.0);
    let mut params = ParamSet::new();
    let w1 = params.add("w1", ParamKind::Weight, rand_t(&mut rng, &[3, 3, 2, 3], -1.0, 1.0));
    let b1 = params.add("b1", ParamKind::Bias, rand_t(&mut rng, &[3], -1.0, 1.0));
    let w2 = params.add("w2", ParamKind::Weight, rand_t(&mut rng, &[3, 2], -1.0, 1.0));
    let b2 = params.add("b2", ParamKind::Bias, rand_t(&mut rng, &[2], -1.0, 1.0));
    let mut frag = FnFragment {
        params,
        build: move |ps: &ParamSet<f64>| {
            let mut g = Graph::new();
            let bind = ps.bind(&mut g);
            let xv = g.constant(x.clone());
            let h = g.conv3x3(xv, bind.var(w1), Some(bind.var(b1)))?;
            let h = g.sigmoid(h);
            let p = g.global_avg_pool(h)?;
            let o = g.linear(p, bind.var(w2), Some(bind.var(b2)))?;
            let o = g.sigmoid(o);
            let loss = g.weighted_bce(o, &[1.0, 0.0, 0.0, 1.0], &[1.0, 2.0])?;
            Ok((g, loss, bind))
        },
    };
    let report = grad_check(
        &mut frag,
        GradCheckOptions {
            tolerance: 1e-6,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn grad_check_skips_relu_kink() {
    let mut params = ParamSet::new();
    let x = params.add("x", ParamKind::Weight, t(&[3], &[0.0, 1.0, -1.0]));
    let mut frag = FnFragment {
        params,
        build: move |ps: &ParamSet<f64>| {
            let mut g = Graph::new();
            let bind = ps.bind(&mut g);
            let r = g.relu(bind.var(x));
            let loss = g.sum(r);
            Ok((g, loss, bind))
        },
    };
    let report = grad_check(&mut frag, GradCheckOptions::default()).unwrap();
    assert_eq!(report.skipped, 1);
    assert_eq!(report.checked, 2);
    assert!(report.passed());
}

#[test]
fn shared_input_accumulates_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let x = rand_t(&mut rng, &[1, 2, 2, 2], -1.0, 1.0);
    let grad_of = |which: u8| {
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let f = g.sigmoid(v);
        let f = g.sum(f);
        let gp = g.global_avg_pool(v).unwrap();
        let gp = g.mul(gp, gp).unwrap();
        let gq = g.sum(gp);
        let loss = match which {
            0 => f,
            1 => gq,
            _ => g.add(f, gq).unwrap(),
        };
        g.backward(loss).unwrap();
        g.grad(v).unwrap().to_vec()
    };
    let (df, dg, both) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..both.len() {
        assert!((both[i] - (df[i] + dg[i])).abs() <= 1e-15 * (1.0 + both[i].abs()));
    }
}

#[test]
fn weighted_bce_examples() {
    let mut g = Graph::new();
    let p = g.leaf(t(&[1, 1], &[0.5]));
    let l = g.weighted_bce(p, &[1.0], &[1.0]).unwrap();
    assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    let p2 = g.leaf(t(&[1, 2], &[1.0, 0.0]));
    let l2 = g.weighted_bce(p2, &[1.0, 0.0], &[1.0, 1.0]).unwrap();
    let v = g.value(l2).data()[0];
    assert!(v > 0.0 && v < 1e-6);
}

// ---------------------------------------------------------------- patches

#[test]
fn partition_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(121);
    let m = rand_t(&mut rng, &[1, 4, 4, 2], -1.0, 1.0);
    let one = partition_patches(&m, 1).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one[0], m);
    let quads = partition_patches(&m, 2).unwrap();
    assert_eq!(quads.len(), 4);
    assert_eq!(quads[3].at4(0, 0, 0, 1), m.at4(0, 2, 2, 1));
    assert_eq!(assemble_patches(&quads, 2).unwrap(), m);

    let idx: Vec<f64> = (0..64).map(f64::from).collect();
    let m = t(&[1, 8, 8, 1], &idx);
    let p = partition_patches(&m, 4).unwrap();
    assert_eq!(p.len(), 16);
    let patch = &p[4 + 2];
    // rows 2-3, cols 4-5
    assert_eq!(patch.data(), &[20.0, 21.0, 28.0, 29.0]);
    assert!(matches!(partition_patches(&m, 3), Err(Error::Structure(_))));
}

proptest! {
    #[test]
    fn partition_roundtrip(b in 1usize..3, ph in 1usize..4, pw in 1usize..4, c in 1usize..3, k in 1usize..4, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rand_t(&mut rng, &[b, ph * k, pw * k, c], -1.0, 1.0);
        let parts = partition_patches(&m, k).unwrap();
        prop_assert_eq!(assemble_patches(&parts, k).unwrap(), m);
    }

    #[test]
    fn channel_scale_ones_and_add_zeros_are_exact(b in 1usize..3, h in 1usize..4, w in 1usize..4, c in 1usize..4, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_t(&mut rng, &[b, h, w, c], -2.0, 2.0);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let ones = g.constant(Tensor::ones([b, c]));
        let zeros = g.constant(Tensor::zeros([b, h, w, c]));
        let s = g.channel_scale(ones, xv).unwrap();
        let a = g.add(xv, zeros).unwrap();
        prop_assert_eq!(g.value(s), &x);
        prop_assert_eq!(g.value(a), &x);
    }

    #[test]
    fn forward_ops_are_bitwise_deterministic(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_t(&mut rng, &[2, 4, 4, 3], -2.0, 2.0);
        let w = rand_t(&mut rng, &[4, 3, 3, 3, 2], -1.0, 1.0);
        let run = || {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.constant(w.clone());
            let c = g.patch_conv3x3(xv, wv, None, 2).unwrap();
            let p = g.max_pool2x2(c).unwrap();
            let r = g.bilinear_resize(p, 3, 5).unwrap();
            let cat = g.concat_channels(&[r, r]).unwrap();
            g.value(cat).clone()
        };
        prop_assert_eq!(run(), run());
    }
}
