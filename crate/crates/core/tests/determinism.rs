//! Parallel and sequential execution agree bit for bit. Kept in its own test
//! binary because the sequential switch is process-wide.

mod common;

use common::*;
use parformer::arch::{build_model_as, ModelConfig};
use parformer::harness::{gradcheck, synth_dataset, train, GradcheckOptions, TrainConfig};
use parformer::par;
use parformer::tensor::kernels;
use parformer::{build_model, Tensor};

fn both<R>(f: impl Fn() -> R) -> (R, R) {
    par::force_sequential(false);
    let a = f();
    par::force_sequential(true);
    let b = f();
    par::force_sequential(false);
    (a, b)
}

#[test]
fn all_paths_agree() {
    // One test function so the global switch is never flipped concurrently.
    let x = randn::<f32>(&[3, 5, 17, 17], 1);
    let w = randn::<f32>(&[7, 5, 3, 3], 2);
    let b = randn::<f32>(&[7], 3);
    let (p, s) = both(|| kernels::conv2d(&x, &w, &b, 2, 1).unwrap());
    assert_eq!(p, s);

    let g = build_model(&ModelConfig::micro(), 4).unwrap();
    let x: Tensor<f32> = randn(&[4, 3, 32, 32], 5);
    let (p, s) = both(|| g.infer(&x).unwrap());
    assert_eq!(p, s);

    let data = synth_dataset(4, 8, 32, 6).unwrap();
    let cfg = TrainConfig { steps: 3, batch_size: 8, ..TrainConfig::default() };
    let (p, s) = both(|| {
        let mut g = build_model(&ModelConfig::micro(), 7).unwrap();
        let out = train(&mut g, &data, &cfg).unwrap();
        (out.curve, g.named_tensors().into_iter().map(|(k, v)| (k, v.clone())).collect::<Vec<_>>())
    });
    assert_eq!(p, s);

    let g64 = build_model_as::<f64>(&ModelConfig::micro_gradcheck().truncated(1), 8).unwrap();
    let x: Tensor<f64> = randn(&[2, 3, 16, 16], 9);
    let (p, s) = both(|| gradcheck(&g64, &x, &[0, 1], GradcheckOptions::default()).unwrap().max_rel_err);
    assert_eq!(p.to_bits(), s.to_bits());
}
