use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Element, Tensor};

/// `sqrt(2/pi)` in the tanh approximation of GELU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient in the tanh approximation of GELU.
pub const GELU_CUBIC: f64 = 0.044_715;

/// Elements per work item for the elementwise maps.
const CHUNK: usize = 1 << 14;

/// GELU, tanh approximation: `0.5·x·(1 + tanh(u))`, `u = √(2/π)·(x + 0.044715·x³)`.
/// Evaluated as `x·σ(2u)`, which is the same function with a single `exp`.
pub fn gelu_scalar<T: Element>(x: T) -> T {
    x * sigmoid_scalar(gelu_inner(x) * T::from_f64(2.0).unwrap())
}

fn gelu_inner<T: Element>(x: T) -> T {
    let c = T::from_f64(GELU_SQRT_2_OVER_PI).unwrap();
    let a = T::from_f64(GELU_CUBIC).unwrap();
    c * (x + a * x * x * x)
}

pub fn gelu_grad_scalar<T: Element>(x: T) -> T {
    let c = T::from_f64(GELU_SQRT_2_OVER_PI).unwrap();
    let a = T::from_f64(GELU_CUBIC).unwrap();
    let two = T::from_f64(2.0).unwrap();
    let three = T::from_f64(3.0).unwrap();
    // 0.5·(1 + tanh u) = s and 0.5·(1 − tanh²u) = 2·s·(1 − s).
    let s = sigmoid_scalar(two * gelu_inner(x));
    s + two * x * s * (T::one() - s) * c * (T::one() + three * a * x * x)
}

pub fn sigmoid_scalar<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn map_par<T: Element>(x: &Tensor<T>, f: impl Fn(T) -> T + Send + Sync) -> Tensor<T> {
    let mut out = x.clone();
    par::for_each_chunk_mut(out.data_mut(), CHUNK, |_, c| c.iter_mut().for_each(|v| *v = f(*v)));
    out
}

fn zip_par<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T + Send + Sync) -> Tensor<T> {
    let mut out = b.clone();
    let ad = a.data();
    par::for_each_chunk_mut(out.data_mut(), CHUNK, |i, c| {
        for (v, &p) in c.iter_mut().zip(&ad[i * CHUNK..]) {
            *v = f(p, *v);
        }
    });
    out
}

pub fn gelu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    map_par(x, gelu_scalar)
}

pub fn gelu_backward<T: Element>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    zip_par(x, dy, |v, g| gelu_grad_scalar(v) * g)
}

pub fn sigmoid<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    map_par(x, sigmoid_scalar)
}

/// Gradient of sigmoid expressed through its output `y`.
pub fn sigmoid_backward<T: Element>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    zip_par(y, dy, |s, g| g * s * (T::one() - s))
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_row<T: Element>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Softmax along the last axis.
pub fn softmax_lastdim<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = *x
        .shape()
        .last()
        .ok_or_else(|| Error::shape("softmax_lastdim", "scalar input"))?;
    let mut out = x.clone();
    if n > 0 {
        out.data_mut().chunks_mut(n).for_each(softmax_row);
    }
    Ok(out)
}

/// `dx = y ⊙ (dy − Σ dy·y)` row-wise.
pub fn softmax_lastdim_backward<T: Element>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let n = *y.shape().last().unwrap();
    let mut dx = vec![T::zero(); y.len()];
    for ((d, yr), gr) in dx.chunks_mut(n).zip(y.data().chunks(n)).zip(dy.data().chunks(n)) {
        let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&s, &g)| a + s * g);
        for ((o, &s), &g) in d.iter_mut().zip(yr).zip(gr) {
            *o = s * (g - dot);
        }
    }
    Tensor::new(y.shape().to_vec(), dx).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_points() {
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!(sigmoid_scalar(-800.0f64).is_finite());
        assert!((sigmoid_scalar(100.0f32) - 1.0).abs() < 1e-7);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let x = Tensor::<f64>::zeros(vec![2, 5]);
        let y = softmax_lastdim(&x).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let x = Tensor::<f32>::new(vec![2], vec![1000.0, 1000.0]).unwrap();
        assert_eq!(softmax_lastdim(&x).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn gelu_agrees_with_tanh_form() {
        for i in -400..=400 {
            let x = i as f64 * 0.025;
            let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
            assert!((gelu_scalar(x) - 0.5 * x * (1.0 + u.tanh())).abs() < 1e-14, "{x}");
        }
        assert_eq!(gelu_scalar(-100.0f32), 0.0);
        assert_eq!(gelu_scalar(100.0f32), 100.0);
        assert!(gelu_scalar(f32::NAN).is_nan());
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5f64] {
            let h = 1e-6;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad_scalar(x)).abs() < 1e-8);
        }
    }
}
