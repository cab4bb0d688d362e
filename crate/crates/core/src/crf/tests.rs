use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::gradcheck::{grad_check, FnFragment, GradCheckOptions};
use crate::tensor::{Graph, ParamKind, ParamSet, Tensor};

fn weak(w1: f64) -> CrfHyperParams {
    CrfHyperParams {
        w1,
        w2: 0.0,
        alpha: 1.5,
        beta: 0.3,
        gamma: 1.0,
        iterations: 10,
        damping: 0.0,
    }
}

fn random_instance(rng: &mut ChaCha8Rng, m: usize, hyper: &CrfHyperParams) -> (Vec<f64>, KernelMatrices<f64>) {
    let pos: Vec<(f64, f64)> = (0..m)
        .map(|_| (rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0)))
        .collect();
    let col: Vec<[f64; 3]> = (0..m).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    let unary = (0..m).map(|_| rng.gen_range(0.05..0.95)).collect();
    (unary, KernelMatrices::from_points(&pos, &col, hyper).unwrap())
}

/// Two pixels with `K1[0, 1] = 1` and no smoothness kernel.
fn pair_kernels(k1: f64) -> Arc<KernelMatrices<f64>> {
    Arc::new(KernelMatrices::from_dense(2, vec![0.0, k1, k1, 0.0], vec![0.0; 4]).unwrap())
}

#[test]
fn smoothness_kernel_between_adjacent_pixels() {
    let img = Tensor::new(vec![1, 2, 3], vec![0.3; 6]).unwrap();
    let hyper = CrfHyperParams {
        gamma: 1.0,
        ..CrfHyperParams::for_side(2)
    };
    let k = build_kernels(&img, &hyper).unwrap();
    assert_eq!(k.k2_at(0, 1), (-0.5f64).exp());
    assert!((k.k2_at(0, 1) - 0.6065).abs() < 1e-4);
    assert_eq!(k.k2_at(0, 0), 0.0);
}

#[test]
fn coincident_points_have_unit_kernels() {
    let hyper = CrfHyperParams::for_side(8);
    let k = KernelMatrices::<f64>::from_points(&[(1.0, 1.0), (1.0, 1.0)], &[[0.2; 3], [0.2; 3]], &hyper).unwrap();
    assert_eq!(k.k1_at(0, 1), 1.0);
    assert_eq!(k.k2_at(0, 1), 1.0);
}

#[test]
fn kernels_are_symmetric_bounded_and_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f64> = (0..4 * 4 * 3).map(|_| rng.gen()).collect();
    let img = Tensor::new(vec![4, 4, 3], data).unwrap();
    let k = build_kernels(&img, &CrfHyperParams::for_side(4)).unwrap();
    for j in 0..16 {
        assert_eq!(k.k1_at(j, j), 0.0);
        assert_eq!(k.k2_at(j, j), 0.0);
        for i in 0..16 {
            assert_eq!(k.k1_at(j, i), k.k1_at(i, j));
            assert_eq!(k.k2_at(j, i), k.k2_at(i, j));
            assert!((0.0..=1.0).contains(&k.k1_at(j, i)));
        }
    }
    let hyper = CrfHyperParams::for_side(64);
    let (mut last1, mut last2) = (1.0, 1.0);
    for d in 1..20 {
        let k = KernelMatrices::<f64>::from_points(&[(0.0, 0.0), (0.0, d as f64)], &[[0.5; 3]; 2], &hyper).unwrap();
        assert!(k.k1_at(0, 1) < last1 && k.k2_at(0, 1) < last2);
        (last1, last2) = (k.k1_at(0, 1), k.k2_at(0, 1));
    }
    let far = KernelMatrices::<f64>::from_points(&[(0.0, 0.0), (0.0, 1e3)], &[[0.5; 3]; 2], &hyper).unwrap();
    assert!(far.k1_at(0, 1) < 1e-6 && far.k2_at(0, 1) < 1e-6);
}

#[test]
fn two_pixel_single_step_matches_hand_update() {
    let hyper = CrfHyperParams {
        iterations: 1,
        ..weak(1.0)
    };
    let q = mean_field_values(&[0.9, 0.4], pair_kernels(1.0), &CompatibilityMatrix::potts(), &hyper).unwrap();
    // Pixel 0 sees q1 = 0.4: cost 0.6 for label 1, 0.4 for label 0.
    let e1 = 0.9 * (-0.6f64).exp();
    let e0 = 0.1 * (-0.4f64).exp();
    let q0 = e1 / (e1 + e0);
    // Pixel 1 sees q0 = 0.9: cost 0.1 for label 1, 0.9 for label 0.
    let e1 = 0.4 * (-0.1f64).exp();
    let e0 = 0.6 * (-0.9f64).exp();
    let q1 = e1 / (e1 + e0);
    assert!((q[0] - q0).abs() < 1e-12, "{} vs {q0}", q[0]);
    assert!((q[1] - q1).abs() < 1e-12, "{} vs {q1}", q[1]);
}

#[test]
fn zero_coupling_is_bitwise_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &t in &[1, 10] {
        let hyper = CrfHyperParams {
            w1: 0.0,
            w2: 0.0,
            iterations: t,
            ..CrfHyperParams::for_side(4)
        };
        let data: Vec<f64> = (0..48).map(|_| rng.gen()).collect();
        let img = Tensor::new(vec![4, 4, 3], data).unwrap();
        let k = Arc::new(build_kernels(&img, &hyper).unwrap());
        let mut unary: Vec<f64> = (0..16).map(|_| rng.gen()).collect();
        unary[0] = 0.0;
        unary[1] = 1.0;
        unary[2] = 0.5;
        let q = mean_field_values(&unary, k.clone(), &CompatibilityMatrix::potts(), &hyper).unwrap();
        let clamped: Vec<f64> = unary.iter().map(|&v| clamp_unary(v).0).collect();
        assert_eq!(q, clamped);
        let exact = brute_force_marginals(&clamped, &k, &CompatibilityMatrix::potts(), 0.0, 0.0).unwrap();
        for (e, c) in exact.iter().zip(&clamped) {
            assert!((e - c).abs() < 1e-12);
        }
    }
}

#[test]
fn uniform_unary_is_a_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let hyper = CrfHyperParams::for_side(4);
    let data: Vec<f64> = (0..48).map(|_| rng.gen()).collect();
    let k = Arc::new(build_kernels(&Tensor::new(vec![4, 4, 3], data).unwrap(), &hyper).unwrap());
    let q = mean_field_values(&[0.5; 16], k, &CompatibilityMatrix::potts(), &hyper).unwrap();
    assert!(q.iter().all(|&v| v == 0.5));
}

#[test]
fn single_pixel_marginal_is_unary() {
    let k = KernelMatrices::from_dense(1, vec![0.0], vec![0.0]).unwrap();
    let m = brute_force_marginals(&[0.3], &k, &CompatibilityMatrix::potts(), 1.0, 1.0).unwrap();
    assert!((m[0] - 0.3).abs() < 1e-15);
}

#[test]
fn oracle_refuses_large_instances() {
    let k = KernelMatrices::from_dense(17, vec![0.0; 289], vec![0.0; 289]).unwrap();
    let err = brute_force_marginals(&[0.5; 17], &k, &CompatibilityMatrix::potts(), 0.0, 0.0).unwrap_err();
    assert!(matches!(err, crate::Error::Refused(_)));
}

#[test]
fn weak_coupling_mean_field_tracks_exact_marginals() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let hyper = weak(0.1);
        let (unary, k) = random_instance(&mut rng, 6, &hyper);
        let exact = brute_force_marginals(&unary, &k, &CompatibilityMatrix::potts(), hyper.w1, hyper.w2).unwrap();
        let q = mean_field_values(&unary, Arc::new(k), &CompatibilityMatrix::potts(), &hyper).unwrap();
        for (a, b) in q.iter().zip(&exact) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst < 0.05, "worst deviation {worst}");
}

#[test]
fn three_pixel_energy_by_hand() {
    let k1 = vec![0.0, 0.5, 0.2, 0.5, 0.0, 0.1, 0.2, 0.1, 0.0];
    let k2 = vec![0.0, 0.3, 0.0, 0.3, 0.0, 0.4, 0.0, 0.4, 0.0];
    let k = KernelMatrices::from_dense(3, k1, k2).unwrap();
    let unary = [0.8, 0.3, 0.6];
    let mu = CompatibilityMatrix([[0.0, 1.0], [2.0, 0.5]]);
    let e = crf_energy(&[true, false, true], &unary, &k, &mu, 1.0, 2.0).unwrap();
    // Pairs: (0,1) labels (1,0) mu 2.0, kernel 0.5 + 0.6; (0,2) (1,1) mu 0.5, kernel 0.2;
    // (1,2) (0,1) mu 1.0, kernel 0.1 + 0.8.
    let expected = -(0.8f64.ln()) - 0.7f64.ln() - 0.6f64.ln() + 2.0 * 1.1 + 0.5 * 0.2 + 0.9;
    assert!((e - expected).abs() < 1e-12);
    let potts = CompatibilityMatrix::potts();
    for y in [false, true] {
        let e = crf_energy(&[y; 3], &unary, &k, &potts, 1.0, 2.0).unwrap();
        let pure = crf_energy(&[y; 3], &unary, &k, &potts, 0.0, 0.0).unwrap();
        assert_eq!(e, pure);
    }
}

#[test]
fn expected_energy_degenerate_and_enumerated() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let hyper = CrfHyperParams::for_side(4);
    let mu = CompatibilityMatrix([[0.1, 0.9], [1.2, -0.2]]);
    let (unary, k) = random_instance(&mut rng, 5, &hyper);
    for bits in 0..32usize {
        let y: Vec<bool> = (0..5).map(|j| bits >> j & 1 == 1).collect();
        let q: Vec<f64> = y.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let e = expected_energy_value(&q, &unary, &k, &mu, 0.7, 1.3).unwrap();
        let direct = crf_energy(&y, &unary, &k, &mu, 0.7, 1.3).unwrap();
        assert!((e - direct).abs() < 1e-12);
    }
    // Two pixels: the expectation over the four labellings weighted by Q.
    let (unary, k) = random_instance(&mut rng, 2, &hyper);
    let q = [0.3, 0.85];
    let mut sum = 0.0;
    for bits in 0..4usize {
        let y = [bits & 1 == 1, bits & 2 == 2];
        let prob: f64 = y
            .iter()
            .zip(&q)
            .map(|(&b, &qj)| if b { qj } else { 1.0 - qj })
            .product();
        sum += prob * crf_energy(&y, &unary, &k, &mu, 0.7, 1.3).unwrap();
    }
    let e = expected_energy_value(&q, &unary, &k, &mu, 0.7, 1.3).unwrap();
    assert!((e - sum).abs() < 1e-12);
    // Zero coupling with Q equal to the unary: a per-pixel entropy.
    let e = expected_energy_value(&unary, &unary, &k, &mu, 0.0, 0.0).unwrap();
    let h: f64 = unary.iter().map(|&p| -(p * p.ln()) - (1.0 - p) * (1.0 - p).ln()).sum();
    assert!((e - h).abs() < 1e-12);
}

/// Loss `sum c_j Q_j + sum_b E_b` through mean field and expected energy.
fn crf_gradcheck(seed: u64, side: usize, batch: usize, damping: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = side * side;
    let hyper = CrfHyperParams {
        w1: 0.8,
        w2: 0.6,
        alpha: 1.2,
        beta: 0.5,
        gamma: 0.8,
        iterations: 3,
        damping,
    };
    let kernels: Vec<_> = (0..batch)
        .map(|_| {
            let data: Vec<f64> = (0..m * 3).map(|_| rng.gen()).collect();
            Arc::new(build_kernels(&Tensor::new(vec![side, side, 3], data).unwrap(), &hyper).unwrap())
        })
        .collect();
    let coef: Vec<f64> = (0..batch * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut params = ParamSet::new();
    let unary: Vec<f64> = (0..batch * m).map(|_| rng.gen_range(0.1..0.9)).collect();
    params.add(
        "unary",
        ParamKind::Weight,
        Tensor::new(vec![batch, side, side, 1], unary).unwrap(),
    );
    params.add(
        "mu",
        ParamKind::Compatibility,
        Tensor::new(vec![2, 2], vec![0.1, 1.1, 0.9, -0.1]).unwrap(),
    );
    params.add(
        "w",
        ParamKind::Weight,
        Tensor::new(vec![2], vec![hyper.w1, hyper.w2]).unwrap(),
    );
    let mut frag = FnFragment {
        params,
        build: move |ps: &ParamSet<f64>| {
            let mut g = Graph::new();
            let bind = ps.bind(&mut g);
            let ids: Vec<_> = ps.ids().collect();
            let (v, mu, w) = (bind.var(ids[0]), bind.var(ids[1]), bind.var(ids[2]));
            let q = mean_field(&mut g, v, mu, w, kernels.clone(), &hyper)?;
            let c = g.constant(Tensor::new(vec![batch, side, side, 1], coef.clone())?);
            let cq = g.mul(c, q)?;
            let lin = g.sum(cq);
            let e = expected_crf_energy(&mut g, q, v, mu, w, kernels.clone())?;
            let e = g.sum(e);
            let loss = g.add(lin, e)?;
            Ok((g, loss, bind))
        },
    };
    let report = grad_check(&mut frag, GradCheckOptions::default()).unwrap();
    assert_eq!(report.skipped, 0);
    assert!(report.max_rel_err < 1e-5, "{report:#?}");
}

#[test]
fn crf_gradients_match_fd_on_3x3() {
    crf_gradcheck(1, 3, 1, 0.0);
}

#[test]
fn crf_gradients_match_fd_batched_and_damped() {
    crf_gradcheck(2, 2, 2, 0.3);
}

#[test]
fn clamped_unary_gets_no_gradient() {
    let hyper = CrfHyperParams {
        iterations: 2,
        ..weak(1.0)
    };
    let mut g = Graph::<f64>::new();
    let v = g.leaf(Tensor::new(vec![2], vec![0.0, 0.4]).unwrap());
    let mu = g.constant(Tensor::new(vec![2, 2], CompatibilityMatrix::potts().flat().to_vec()).unwrap());
    let w = g.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
    let q = mean_field(&mut g, v, mu, w, vec![pair_kernels(1.0)], &hyper).unwrap();
    let s = g.sum(q);
    g.backward(s).unwrap();
    let dv = g.grad(v).unwrap();
    assert_eq!(dv[0], 0.0);
    assert!(dv[1] != 0.0);
}

#[test]
fn mismatched_batch_is_structural() {
    let mut g = Graph::<f64>::new();
    let v = g.leaf(Tensor::new(vec![3], vec![0.5; 3]).unwrap());
    let mu = g.constant(Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap());
    let w = g.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
    assert!(mean_field(&mut g, v, mu, w, vec![pair_kernels(1.0)], &weak(1.0)).is_err());
}

#[test]
fn marginal_rows_stay_normalised() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let hyper = CrfHyperParams {
        w1: 5.0,
        w2: 3.0,
        ..CrfHyperParams::for_side(4)
    };
    let data: Vec<f64> = (0..48).map(|_| rng.gen()).collect();
    let k = Arc::new(build_kernels(&Tensor::new(vec![4, 4, 3], data).unwrap(), &hyper).unwrap());
    let unary: Vec<f64> = (0..16).map(|_| rng.gen()).collect();
    for t in 1..6 {
        let h = CrfHyperParams { iterations: t, ..hyper };
        let q = mean_field_values(&unary, k.clone(), &CompatibilityMatrix::potts(), &h).unwrap();
        assert!(q
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v) && ((1.0 - v) + v - 1.0).abs() < 1e-9));
    }
}
