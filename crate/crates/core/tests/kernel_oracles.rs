mod common;

use common::*;
use msflow_core::kernels::*;
use msflow_core::Tensor;
use proptest::prelude::*;

#[test]
fn conv_matches_loop_oracle() {
    let mut r = rng(1);
    let input = rand_tensor(&mut r, &[3, 4, 4], 1.0);
    let weight = rand_tensor(&mut r, &[2, 3, 3, 3], 1.0);
    let bias = rand_tensor(&mut r, &[2], 1.0);
    let fast = conv2d(&input, &weight, &bias, 1).unwrap();
    let slow = conv_oracle(&input, &weight, &bias, 1);
    assert!(fast.max_abs_diff(&slow) < 1e-6, "{}", fast.max_abs_diff(&slow));

    // Unpadded and non-square spatial extents take the same path.
    let input = rand_tensor(&mut r, &[2, 5, 7], 1.0);
    let weight = rand_tensor(&mut r, &[4, 2, 3, 3], 1.0);
    let bias = rand_tensor(&mut r, &[4], 1.0);
    let fast = conv2d(&input, &weight, &bias, 0).unwrap();
    assert_eq!(fast.dims(), &[4, 3, 5]);
    assert!(fast.max_abs_diff(&conv_oracle(&input, &weight, &bias, 0)) < 1e-5);
}

/// Scalar objective `sum(out * probe)` used to finite-difference every input.
fn probe_sum(out: &Tensor, probe: &Tensor) -> f64 {
    out.data().iter().zip(probe.data()).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum()
}

fn check_fd(name: &str, analytic: &Tensor, mut f: impl FnMut(&mut Tensor, usize, f32) -> f64, base: &Tensor) {
    let h = 1e-3f32;
    for i in 0..base.len() {
        let num = fd_scalar(
            |v| {
                let mut x = base.clone();
                f(&mut x, i, v)
            },
            base.data()[i],
            h,
        );
        let a = f64::from(analytic.data()[i]);
        let err = rel_err(a, num, 1e-2);
        assert!(err < 1e-2, "{name}[{i}]: analytic {a} vs numeric {num} (rel {err})");
    }
}

#[test]
fn conv_backward_matches_finite_differences() {
    let mut r = rng(2);
    let input = rand_tensor(&mut r, &[2, 4, 3], 1.0);
    let weight = rand_tensor(&mut r, &[3, 2, 3, 3], 1.0);
    let bias = rand_tensor(&mut r, &[3], 1.0);
    let probe = rand_tensor(&mut r, &[3, 4, 3], 1.0);
    let (gi, gw, gb) = conv2d_backward(&probe, &input, &weight, 1).unwrap();

    check_fd(
        "input",
        &gi,
        |x, i, v| {
            x.data_mut()[i] = v;
            probe_sum(&conv2d(x, &weight, &bias, 1).unwrap(), &probe)
        },
        &input,
    );
    check_fd(
        "weight",
        &gw,
        |w, i, v| {
            w.data_mut()[i] = v;
            probe_sum(&conv2d(&input, w, &bias, 1).unwrap(), &probe)
        },
        &weight,
    );
    check_fd(
        "bias",
        &gb,
        |b, i, v| {
            b.data_mut()[i] = v;
            probe_sum(&conv2d(&input, &weight, b, 1).unwrap(), &probe)
        },
        &bias,
    );
}

#[test]
fn avg_pool_matches_oracle_for_all_heights() {
    let mut r = rng(3);
    for h in 1..=64 {
        let x = rand_tensor(&mut r, &[1, h, 3], 1.0);
        let out = avg_pool2d(&x, 3, 2, 1).unwrap();
        assert_eq!(out.dims()[1], (h + 2 - 3) / 2 + 1, "H = {h}");
        assert!(out.max_abs_diff(&avg_pool_oracle(&x, 3, 2, 1)) < 1e-6);
    }
    let x = rand_tensor(&mut r, &[2, 8, 8], 1.0);
    let out = avg_pool2d(&x, 3, 2, 1).unwrap();
    assert_eq!(out.dims(), &[2, 4, 4]);
    assert!(out.max_abs_diff(&avg_pool_oracle(&x, 3, 2, 1)) < 1e-6);
}

#[test]
fn layer_norm_statistics_and_backward() {
    let mut r = rng(4);
    let x = rand_tensor(&mut r, &[6, 3, 4], 3.0);
    let (out, cache) = layer_norm(&x, &Tensor::full(&[6], 1.0), &Tensor::zeros(&[6])).unwrap();
    for p in 0..12 {
        let col: Vec<f64> = (0..6).map(|c| f64::from(out.data()[c * 12 + p])).collect();
        let mean = col.iter().sum::<f64>() / 6.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-5, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "var {var}");
    }
    let _ = cache;

    let gain = rand_tensor(&mut r, &[6], 1.0);
    let bias = rand_tensor(&mut r, &[6], 1.0);
    let probe = rand_tensor(&mut r, &[6, 3, 4], 1.0);
    let (_, cache) = layer_norm(&x, &gain, &bias).unwrap();
    let (gi, gg, gb) = layer_norm_backward(&probe, &cache, &gain).unwrap();
    let f = |x: &Tensor, g: &Tensor, b: &Tensor| probe_sum(&layer_norm(x, g, b).unwrap().0, &probe);
    check_fd("ln input", &gi, |t, i, v| { t.data_mut()[i] = v; f(t, &gain, &bias) }, &x);
    check_fd("ln gain", &gg, |t, i, v| { t.data_mut()[i] = v; f(&x, t, &bias) }, &gain);
    check_fd("ln bias", &gb, |t, i, v| { t.data_mut()[i] = v; f(&x, &gain, t) }, &bias);
}

#[test]
fn resize_backwards_match_finite_differences() {
    let mut r = rng(5);
    let x = rand_tensor(&mut r, &[2, 3, 4], 1.0);
    let probe = rand_tensor(&mut r, &[2, 7, 9], 1.0);
    let g = bilinear_upsample_backward(&probe, 3, 4).unwrap();
    check_fd("bilinear", &g, |t, i, v| { t.data_mut()[i] = v; probe_sum(&bilinear_upsample(t, 7, 9).unwrap(), &probe) }, &x);

    let x = rand_tensor(&mut r, &[2, 7, 5], 1.0);
    let probe = rand_tensor(&mut r, &[2, 3, 2], 1.0);
    let g = adaptive_avg_pool2d_backward(&probe, 7, 5).unwrap();
    check_fd("adaptive", &g, |t, i, v| { t.data_mut()[i] = v; probe_sum(&adaptive_avg_pool2d(t, 3, 2).unwrap(), &probe) }, &x);

    let x = rand_tensor(&mut r, &[3, 2, 2], 1.0);
    let probe = rand_tensor(&mut r, &[3, 2, 2], 1.0);
    let g = relu_backward(&probe, &x).unwrap();
    check_fd("relu", &g, |t, i, v| { t.data_mut()[i] = v; probe_sum(&relu(t), &probe) }, &x);
}

#[test]
fn positional_encoding_scan() {
    let pe = pos_encoding_2d(64, 16, 16).unwrap();
    assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    let vecs: Vec<Vec<u32>> = (0..256)
        .map(|p| (0..64).map(|c| pe.data()[c * 256 + p].to_bits()).collect())
        .collect();
    for a in 0..256 {
        for b in a + 1..256 {
            assert_ne!(vecs[a], vecs[b], "positions {a} and {b} collide");
        }
    }
    // Row half depends on the row only.
    assert_eq!(pe.data()[0], pe.data()[15]);
    assert_eq!(pe.data()[32 * 256 + 16], pe.data()[32 * 256]);
}

#[test]
fn kernels_are_bitwise_deterministic() {
    let mut r = rng(6);
    let x = rand_tensor(&mut r, &[4, 6, 6], 1.0);
    let w = rand_tensor(&mut r, &[5, 4, 3, 3], 1.0);
    let b = rand_tensor(&mut r, &[5], 1.0);
    let a1 = conv2d(&x, &w, &b, 1).unwrap();
    let a2 = conv2d(&x, &w, &b, 1).unwrap();
    assert_eq!(a1.data(), a2.data());
    let g1 = conv2d_backward(&a1, &x, &w, 1).unwrap();
    let g2 = conv2d_backward(&a2, &x, &w, 1).unwrap();
    assert_eq!(g1.1.data(), g2.1.data());
}

proptest! {
    #[test]
    fn identity_kernel_is_identity(c in 1usize..4, h in 1usize..9, w in 1usize..9, seed in 0u64..1000) {
        let mut r = rng(seed);
        let x = rand_tensor(&mut r, &[c, h, w], 2.0);
        let mut k = Tensor::zeros(&[c, c, 3, 3]);
        for i in 0..c {
            k.data_mut()[((i * c + i) * 3 + 1) * 3 + 1] = 1.0;
        }
        let out = conv2d(&x, &k, &Tensor::zeros(&[c]), 1).unwrap();
        prop_assert_eq!(out, x);
    }
}
