//! Kernels against naive reference implementations.

mod common;

use common::*;
use parformer::tensor::kernels::{self, dense, norm};
use parformer::Tensor;

const F32_TOL: f64 = 1e-6;

#[test]
fn conv2d_matches_loop_nest() {
    let x = randn::<f64>(&[2, 3, 9, 9], 1);
    let w = randn::<f64>(&[4, 3, 3, 3], 2);
    let b = randn::<f64>(&[4], 3);
    let want = conv2d_naive(&x, &w, &b, 2, 1, 1);
    let got64 = kernels::conv2d(&x, &w, &b, 2, 1).unwrap();
    assert!(got64.max_abs_diff(&want) < 1e-12);

    let (x, w, b) = (randu::<f32>(&[2, 3, 9, 9], 1), randu::<f32>(&[4, 3, 3, 3], 2), randu::<f32>(&[4], 3));
    let got = kernels::conv2d(&x, &w, &b, 2, 1).unwrap();
    assert_eq!(got.shape(), &[2, 4, 5, 5]);
    let want = conv2d_naive(&x.cast(), &w.cast(), &b.cast(), 2, 1, 1);
    assert!(got.cast::<f64>().max_abs_diff(&want) < F32_TOL);
}

#[test]
fn conv2d_identity_and_patch_embedding_shape() {
    let x = Tensor::<f32>::full(vec![1, 1, 1, 1], 3.25);
    let w = Tensor::full(vec![1, 1, 1, 1], 1.0);
    let y = kernels::conv2d(&x, &w, &Tensor::zeros(vec![1]), 1, 0).unwrap();
    assert_eq!(y.data(), &[3.25]);

    let x = Tensor::<f32>::zeros(vec![1, 3, 224, 224]);
    let w = Tensor::zeros(vec![48, 3, 7, 7]);
    let y = kernels::conv2d(&x, &w, &Tensor::zeros(vec![48]), 4, 3).unwrap();
    assert_eq!(y.shape(), &[1, 48, 56, 56]);
}

#[test]
fn conv2d_rejects_bad_arguments() {
    let x = Tensor::<f32>::zeros(vec![1, 3, 8, 8]);
    let w = Tensor::zeros(vec![4, 2, 3, 3]);
    assert!(kernels::conv2d(&x, &w, &Tensor::zeros(vec![4]), 1, 1).is_err());
    let w = Tensor::zeros(vec![4, 3, 3, 3]);
    assert!(kernels::conv2d(&x, &w, &Tensor::zeros(vec![4]), 0, 1).is_err());
}

#[test]
fn depthwise_matches_per_channel_loops() {
    let x = randn::<f64>(&[1, 6, 8, 8], 4);
    let w = randn::<f64>(&[6, 1, 3, 3], 5);
    let b = randn::<f64>(&[6], 6);
    let want = conv2d_naive(&x, &w, &b, 1, 1, 6);
    assert!(kernels::depthwise_conv2d(&x, &w, &b, 1, 1).unwrap().max_abs_diff(&want) < 1e-12);
    let (x32, w32, b32) = (randu::<f32>(&[1, 6, 8, 8], 4), randu::<f32>(&[6, 1, 3, 3], 5), randu::<f32>(&[6], 6));
    let got = kernels::depthwise_conv2d(&x32, &w32, &b32, 1, 1).unwrap();
    let want32 = conv2d_naive(&x32.cast(), &w32.cast(), &b32.cast(), 1, 1, 6);
    assert!(got.cast::<f64>().max_abs_diff(&want32) < F32_TOL);
    let want = conv2d_naive(&x, &w, &b, 2, 0, 6);
    let got = kernels::depthwise_conv2d(&x, &w, &b, 2, 0).unwrap();
    assert!(got.max_abs_diff(&want) < 1e-12);
}

#[test]
fn depthwise_trivial_cases() {
    let x = randn::<f32>(&[2, 4, 5, 5], 7);
    let z = kernels::depthwise_conv2d(&x, &Tensor::zeros(vec![4, 1, 3, 3]), &Tensor::zeros(vec![4]), 1, 1).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0));
    let id = kernels::depthwise_conv2d(&x, &Tensor::full(vec![4, 1, 1, 1], 1.0), &Tensor::zeros(vec![4]), 1, 0).unwrap();
    assert_eq!(id, x);
}

#[test]
fn pointwise_equals_1x1_conv() {
    let x = randn::<f32>(&[2, 5, 6, 7], 8);
    let w = randn::<f32>(&[3, 5], 9);
    let b = randn::<f32>(&[3], 10);
    let p = kernels::pointwise(&x, &w, &b).unwrap();
    let c = kernels::conv2d(&x, &w.clone().reshape(vec![3, 5, 1, 1]).unwrap(), &b, 1, 0).unwrap();
    assert!(p.max_abs_diff(&c) < 1e-6);

    let eye = Tensor::<f32>::from_fn(vec![5, 5], |i| if i / 5 == i % 5 { 1.0 } else { 0.0 });
    assert_eq!(kernels::pointwise(&x, &eye, &Tensor::zeros(vec![5])).unwrap(), x);

    let x = Tensor::<f32>::zeros(vec![1, 256, 14, 14]);
    let y = kernels::pointwise(&x, &Tensor::zeros(vec![512, 256]), &Tensor::zeros(vec![512])).unwrap();
    assert_eq!(y.shape(), &[1, 512, 14, 14]);
}

#[test]
fn matmul_matches_triple_loop() {
    let a = randn::<f64>(&[7, 5], 11);
    let b = randn::<f64>(&[5, 9], 12);
    let want = matmul_naive(&a, &b);
    assert!(dense::matmul(&a, &b).unwrap().max_abs_diff(&want) < 1e-12);
    let (a, b) = (randu::<f32>(&[7, 5], 11), randu::<f32>(&[5, 9], 12));
    let got = dense::matmul(&a, &b).unwrap();
    assert!(got.cast::<f64>().max_abs_diff(&matmul_naive(&a.cast(), &b.cast())) < F32_TOL);
}

#[test]
fn batchnorm_train_stats_match_two_pass() {
    let x = randn::<f64>(&[3, 4, 5, 5], 13).map(|v| 2.0 * v + 0.7);
    let (n, c, hw) = (3, 4, 25);
    let (g, b) = (Tensor::full(vec![c], 1.0), Tensor::zeros(vec![c]));
    let (rm, rv) = (Tensor::zeros(vec![c]), Tensor::full(vec![c], 1.0));
    let (y, stats) = norm::batchnorm_train(&x, &g, &b, &rm, &rv, 1e-5, 0.1).unwrap();
    for ch in 0..c {
        let vals: Vec<f64> = (0..n).flat_map(|i| x.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw].to_vec()).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
        assert!((stats.mean[ch] - m).abs() < 1e-12);
        assert!((stats.var[ch] - v).abs() < 1e-12);
        let unbiased = v * vals.len() as f64 / (vals.len() - 1) as f64;
        assert!((stats.running_mean.data()[ch] - 0.1 * m).abs() < 1e-12);
        assert!((stats.running_var.data()[ch] - (0.9 + 0.1 * unbiased)).abs() < 1e-12);
        for i in 0..n {
            for p in 0..hw {
                let idx = (i * c + ch) * hw + p;
                assert!((y.data()[idx] - (x.data()[idx] - m) / (v + 1e-5).sqrt()).abs() < 1e-12);
            }
        }
    }
    let x32 = x.cast::<f32>();
    let (g32, b32) = (g.cast::<f32>(), b.cast::<f32>());
    let (y32, s32) = norm::batchnorm_train(&x32, &g32, &b32, &rm.cast(), &rv.cast(), 1e-5, 0.1).unwrap();
    let (y_ref, s_ref) = norm::batchnorm_train(&x32.cast(), &g32.cast(), &b32.cast(), &rm, &rv, 1e-5, 0.1).unwrap();
    assert!(y32.cast::<f64>().max_abs_diff(&y_ref) < F32_TOL);
    assert!((s32.mean[0] as f64 - s_ref.mean[0]).abs() < F32_TOL);
}

#[test]
fn batchnorm_train_on_standardized_input_is_identity() {
    let mut x = randn::<f64>(&[4, 2, 6, 6], 14);
    let (m, v) = norm::channel_stats(&x).unwrap();
    let hw = 36;
    for (idx, val) in x.data_mut().iter_mut().enumerate() {
        let ch = (idx / hw) % 2;
        *val = (*val - m[ch]) / v[ch].sqrt();
    }
    let (y, _) = norm::batchnorm_train(
        &x,
        &Tensor::full(vec![2], 1.0),
        &Tensor::zeros(vec![2]),
        &Tensor::zeros(vec![2]),
        &Tensor::full(vec![2], 1.0),
        1e-5,
        0.1,
    )
    .unwrap();
    // Unit variance, so the only change left is the eps shrink.
    let shrink = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!(y.max_abs_diff(&x.map(|v| v * shrink)) < 1e-12);
    assert!(y.max_abs_diff(&x) < 1e-4);
}

#[test]
fn softmax_cases() {
    let z = kernels::softmax_lastdim(&Tensor::<f64>::zeros(vec![2, 5])).unwrap();
    assert!(z.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    let big = kernels::softmax_lastdim(&Tensor::<f32>::new(vec![1, 2], vec![1000.0, 1000.0]).unwrap()).unwrap();
    assert_eq!(big.data(), &[0.5, 0.5]);
    let x = randn::<f64>(&[3, 7], 15);
    let y = kernels::softmax_lastdim(&x).unwrap();
    for r in 0..3 {
        let row = &x.data()[r * 7..(r + 1) * 7];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for (got, v) in y.data()[r * 7..(r + 1) * 7].iter().zip(row) {
            assert!((got - v.exp() / z).abs() < 1e-12);
        }
    }
}

#[test]
fn activations_match_formulas() {
    let x = randn::<f64>(&[100], 16).map(|v| 3.0 * v);
    let g = kernels::gelu(&x);
    let s = kernels::sigmoid(&x);
    for i in 0..100 {
        assert!((g.data()[i] - gelu_ref(x.data()[i])).abs() < 1e-12);
        assert!((s.data()[i] - sigmoid_ref(x.data()[i])).abs() < 1e-12);
    }
    let zero = Tensor::<f32>::zeros(vec![1]);
    assert_eq!(kernels::sigmoid(&zero).data(), &[0.5]);
    assert_eq!(kernels::gelu(&zero).data(), &[0.0]);
    let x32 = randu::<f32>(&[100], 16).map(|v| 3.0 * v);
    let want = x32.cast::<f64>().map(gelu_ref);
    assert!(kernels::gelu(&x32).cast::<f64>().max_abs_diff(&want) < F32_TOL);
}

#[test]
fn pooling_linear_and_loss() {
    let x = Tensor::<f32>::full(vec![2, 3, 4, 4], 1.75);
    assert!(dense::global_avg_pool(&x).unwrap().data().iter().all(|&v| v == 1.75));

    let xi = randn::<f64>(&[4, 6], 17);
    let w = randn::<f64>(&[3, 6], 18);
    let b = randn::<f64>(&[3], 19);
    let y = dense::linear(&xi, &w, &b).unwrap();
    for n in 0..4 {
        for o in 0..3 {
            let want: f64 = b.data()[o] + (0..6).map(|i| xi.data()[n * 6 + i] * w.data()[o * 6 + i]).sum::<f64>();
            assert!((y.data()[n * 3 + o] - want).abs() < 1e-12);
        }
    }

    let (l, _) = dense::cross_entropy(&Tensor::<f64>::zeros(vec![5, 10]), &[0, 3, 9, 1, 2]).unwrap();
    assert!((l.item() - 10f64.ln()).abs() < 1e-12);
}

#[test]
fn attention_matches_explicit_weights() {
    let q = randn::<f64>(&[2, 9, 4], 20);
    let k = randn::<f64>(&[2, 9, 4], 21);
    let v = randn::<f64>(&[2, 9, 3], 22);
    let want = attention_naive(&q, &k, &v);
    let got = kernels::single_head_attention(&q, &k, &v).unwrap();
    assert!(got.max_abs_diff(&want) < 1e-12);
    let (q, k, v) = (randu::<f32>(&[1, 9, 4], 20), randu::<f32>(&[1, 9, 4], 21), randu::<f32>(&[1, 9, 3], 22));
    let got = kernels::single_head_attention(&q, &k, &v).unwrap();
    assert!(got.cast::<f64>().max_abs_diff(&attention_naive(&q.cast(), &k.cast(), &v.cast())) < F32_TOL);
}

#[test]
fn attention_with_zero_query_key_averages_values() {
    let z = Tensor::<f64>::zeros(vec![1, 6, 2]);
    let v = randn::<f64>(&[1, 6, 3], 23);
    let out = kernels::single_head_attention(&z, &z, &v).unwrap();
    for c in 0..3 {
        let mean: f64 = (0..6).map(|t| v.data()[t * 3 + c]).sum::<f64>() / 6.0;
        for t in 0..6 {
            assert!((out.data()[t * 3 + c] - mean).abs() < 1e-12);
        }
    }
    let q = randn::<f64>(&[1, 1, 2], 24);
    let v1 = randn::<f64>(&[1, 1, 3], 25);
    assert_eq!(kernels::single_head_attention(&q, &q, &v1).unwrap(), v1);
}

#[test]
fn scale_and_affine_channels() {
    let x = randn::<f64>(&[2, 3, 2, 2], 26);
    let g = randn::<f64>(&[2, 3], 27);
    let y = dense::scale_channels(&x, &g).unwrap();
    for (i, v) in y.data().iter().enumerate() {
        assert_eq!(*v, x.data()[i] * g.data()[i / 4]);
    }
    let s = randn::<f64>(&[3], 28);
    let t = randn::<f64>(&[3], 29);
    let y = dense::channel_affine(&x, &s, Some(&t)).unwrap();
    for (i, v) in y.data().iter().enumerate() {
        let c = (i / 4) % 3;
        assert!((v - (x.data()[i] * s.data()[c] + t.data()[c])).abs() < 1e-15);
    }
}
