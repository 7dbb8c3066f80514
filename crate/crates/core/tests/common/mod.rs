#![allow(dead_code)]

use parformer::tensor::autodiff::{Tape, Var};
use parformer::tensor::Tensor;
use parformer::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn<T: parformer::tensor::Element>(shape: &[usize], seed: u64) -> Tensor<T> {
    Tensor::randn(shape.to_vec(), 1.0, &mut rng(seed))
}

/// Cross-correlation by seven nested loops, in f64.
pub fn conv2d_naive(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize, groups: usize) -> Tensor<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cpg, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let opg = cout / groups;
    assert_eq!(cpg * groups, cin);
    let mut out = vec![0.0; n * cout * ho * wo];
    for ni in 0..n {
        for o in 0..cout {
            let g = o / opg;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[o];
                    for ci in 0..cpg {
                        let c = g * cpg + ci;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((ni * cin + c) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((o * cpg + ci) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((ni * cout + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, ho, wo], out).unwrap()
}

pub fn matmul_naive(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    Tensor::from_fn(vec![m, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        (0..k).map(|p| a.data()[i * k + p] * b.data()[p * n + j]).sum()
    })
}

/// Explicit-weights attention on token-major inputs `[N,T,C]`.
pub fn attention_naive(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Tensor<f64> {
    let (n, t, cq) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let ca = v.shape()[2];
    let mut out = vec![0.0; n * t * ca];
    for b in 0..n {
        for i in 0..t {
            let mut s: Vec<f64> = (0..t)
                .map(|j| (0..cq).map(|c| q.data()[(b * t + i) * cq + c] * k.data()[(b * t + j) * cq + c]).sum::<f64>())
                .map(|v| v / (cq as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            s.iter_mut().for_each(|v| *v = (*v - m).exp());
            let z: f64 = s.iter().sum();
            for c in 0..ca {
                out[(b * t + i) * ca + c] = (0..t).map(|j| s[j] / z * v.data()[(b * t + j) * ca + c]).sum();
            }
        }
    }
    Tensor::new(vec![n, t, ca], out).unwrap()
}

pub fn gelu_ref(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn sigmoid_ref(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// The fourth-order stencil tolerates a coarse step, which keeps roundoff in
/// the loss sum near 1e-11.
pub const FD_STEP: f64 = 1e-3;

/// Relative error that turns absolute below 1e-3, where stencil roundoff
/// would otherwise dominate.
pub fn fd_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Fourth-order central difference of `f` at 0 with step `h`.
pub fn five_point(h: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
}

/// Max elementwise relative error between reverse-mode and
/// five-point difference gradients of `Σ f(inputs) ⊙ r` for a fixed random `r`, over all inputs.
pub fn fd_check(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> f64 {
    let eval = |ins: &[Tensor<f64>], want_grads: bool| -> (f64, Vec<Tensor<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let y = f(&mut tape, &vars).unwrap();
        let shape = tape.value(y).shape().to_vec();
        let r = tape.leaf(randn(&shape, 99), false);
        let p = tape.mul(y, r).unwrap();
        let l = tape.sum(p).unwrap();
        let loss = tape.value(l).item();
        if !want_grads {
            return (loss, vec![]);
        }
        tape.backward(l).unwrap();
        let grads = vars
            .iter()
            .zip(ins)
            .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect();
        (loss, grads)
    };
    let (_, grads) = eval(inputs, true);
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let theta = t.data()[j];
            let h = FD_STEP * theta.abs().max(1.0);
            let mut ins = inputs.to_vec();
            let n = five_point(h, |d| {
                ins[i].data_mut()[j] = theta + d;
                eval(&ins, false).0
            });
            worst = worst.max(fd_err(grads[i].data()[j], n));
        }
    }
    worst
}

/// Uniform on [-1, 1); keeps f32 oracle comparisons in the O(1) range.
pub fn randu<T: parformer::tensor::Element>(shape: &[usize], seed: u64) -> Tensor<T> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut rng(seed))
}
