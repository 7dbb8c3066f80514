//! Batch normalization over the N×H×W extent of each channel.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    Train,
    Infer,
}

/// Batch statistics from a train-mode pass and the updated running estimates.
#[derive(Clone, Debug)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    /// Biased variance, the one used for normalization.
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

fn check<T: Element>(x: &Tensor<T>, params: [&Tensor<T>; 4], eps: f64) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4("batchnorm")?;
    for p in params {
        if p.shape() != [c] {
            return Err(Error::shape("batchnorm", format!("parameter {:?} for {c} channels", p.shape())));
        }
    }
    if eps <= 0.0 {
        return Err(Error::arg("batchnorm", "eps must be positive"));
    }
    Ok((n, c, h * w))
}

/// Per-channel `(mean, biased variance)` via Welford updates in f64.
pub fn channel_stats<T: Element>(x: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = x.dims4("channel_stats")?;
    let hw = h * w;
    let xd = x.data();
    let stats = par::map(c, |ch| {
        let (mut count, mut mean, mut m2) = (0f64, 0f64, 0f64);
        for i in 0..n {
            for &v in &xd[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                let v = v.to_f64().unwrap();
                count += 1.0;
                let d = v - mean;
                mean += d / count;
                m2 += d * (v - mean);
            }
        }
        (mean, if count > 0.0 { m2 / count } else { 0.0 })
    });
    Ok(stats.into_iter().unzip())
}

fn apply_affine<T: Element>(x: &Tensor<T>, c: usize, hw: usize, scale: &[T], shift: &[T]) -> Vec<T> {
    let xd = x.data();
    let mut out = vec![T::zero(); x.len()];
    par::for_each_chunk_mut(&mut out, hw, |idx, y| {
        let ch = idx % c;
        let src = &xd[idx * hw..(idx + 1) * hw];
        for (o, &v) in y.iter_mut().zip(src) {
            *o = v * scale[ch] + shift[ch];
        }
    });
    out
}

/// Inference-mode normalization with running statistics.
pub fn batchnorm_infer<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let (_, c, hw) = check(x, [gamma, beta, running_mean, running_var], eps)?;
    let eps = T::from_f64(eps).unwrap();
    let scale: Vec<T> = (0..c)
        .map(|i| gamma.data()[i] / (running_var.data()[i] + eps).sqrt())
        .collect();
    let shift: Vec<T> = (0..c)
        .map(|i| beta.data()[i] - running_mean.data()[i] * scale[i])
        .collect();
    Tensor::new(x.shape().to_vec(), apply_affine(x, c, hw, &scale, &shift))
}

/// Train-mode normalization with batch statistics; running estimates move
/// by `momentum` towards the batch mean and unbiased batch variance.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_train<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
    momentum: f64,
) -> Result<(Tensor<T>, BnStats<T>)> {
    let (n, c, hw) = check(x, [gamma, beta, running_mean, running_var], eps)?;
    let count = n * hw;
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    let (mean, var) = channel_stats(x)?;
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let scale: Vec<T> = (0..c)
        .map(|i| gamma.data()[i] * T::from_f64(inv_std[i]).unwrap())
        .collect();
    let shift: Vec<T> = (0..c)
        .map(|i| beta.data()[i] - T::from_f64(mean[i]).unwrap() * scale[i])
        .collect();
    let y = Tensor::new(x.shape().to_vec(), apply_affine(x, c, hw, &scale, &shift))?;

    let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
    let m = momentum;
    let rm = Tensor::from_fn(vec![c], |i| {
        T::from_f64((1.0 - m) * running_mean.data()[i].to_f64().unwrap() + m * mean[i]).unwrap()
    });
    let rv = Tensor::from_fn(vec![c], |i| {
        T::from_f64((1.0 - m) * running_var.data()[i].to_f64().unwrap() + m * var[i] * unbias).unwrap()
    });
    let cast = |v: &[f64]| v.iter().map(|&x| T::from_f64(x).unwrap()).collect::<Vec<T>>();
    let stats = BnStats {
        mean: cast(&mean),
        var: cast(&var),
        inv_std: cast(&inv_std),
        running_mean: rm,
        running_var: rv,
    };
    Ok((y, stats))
}

/// Gradients `(dx, dgamma, dbeta)` given the per-channel mean and inverse
/// standard deviation used in the forward pass. In train mode the statistics
/// depend on `x`; in infer mode they are constants.
pub fn batchnorm_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    dy: &Tensor<T>,
    mode: BnMode,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = x.dims4("batchnorm_backward")?;
    let hw = h * w;
    if dy.shape() != x.shape() {
        return Err(Error::shape("batchnorm_backward", format!("grad {:?}", dy.shape())));
    }
    let (xd, dyd) = (x.data(), dy.data());
    // Per-channel sums of dy and dy·x̂, reduced in batch order.
    let sums = par::map(c, |ch| {
        let (mut sdy, mut sdyx) = (T::zero(), T::zero());
        for i in 0..n {
            let base = (i * c + ch) * hw;
            for j in 0..hw {
                let xhat = (xd[base + j] - mean[ch]) * inv_std[ch];
                sdy += dyd[base + j];
                sdyx += dyd[base + j] * xhat;
            }
        }
        (sdy, sdyx)
    });
    let count = T::from_usize(n * hw).unwrap();
    let mut dx = vec![T::zero(); x.len()];
    par::for_each_chunk_mut(&mut dx, hw, |idx, d| {
        let ch = idx % c;
        let g = gamma.data()[ch] * inv_std[ch];
        let (sdy, sdyx) = sums[ch];
        let base = idx * hw;
        for (j, o) in d.iter_mut().enumerate() {
            *o = match mode {
                BnMode::Infer => g * dyd[base + j],
                BnMode::Train => {
                    let xhat = (xd[base + j] - mean[ch]) * inv_std[ch];
                    g * (dyd[base + j] - sdy / count - xhat * sdyx / count)
                }
            };
        }
    });
    let dgamma = Tensor::from_fn(vec![c], |ch| sums[ch].1);
    let dbeta = Tensor::from_fn(vec![c], |ch| sums[ch].0);
    Ok((Tensor::new(x.shape().to_vec(), dx)?, dgamma, dbeta))
}
