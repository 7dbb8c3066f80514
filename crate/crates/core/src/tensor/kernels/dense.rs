//! Matrix products, pooling, loss and channel-wise elementwise kernels.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::kernels::activation::softmax_row;
use crate::tensor::{Element, Mat, Tensor};

pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let mut c = vec![T::zero(); m * n];
    T::gemm(T::one(), Mat::new(a.data(), m, k), Mat::new(b.data(), k, n), T::zero(), &mut c, n);
    Tensor::new(vec![m, n], c)
}

/// `(da, db)` for `c = a·b`.
pub fn matmul_backward<T: Element>(a: &Tensor<T>, b: &Tensor<T>, dc: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, k) = a.dims2("matmul_backward")?;
    let (_, n) = b.dims2("matmul_backward")?;
    let mut da = vec![T::zero(); m * k];
    T::gemm(T::one(), Mat::new(dc.data(), m, n), Mat::transposed(b.data(), k, n), T::zero(), &mut da, k);
    let mut db = vec![T::zero(); k * n];
    T::gemm(T::one(), Mat::transposed(a.data(), m, k), Mat::new(dc.data(), m, n), T::zero(), &mut db, n);
    Ok((Tensor::new(vec![m, k], da)?, Tensor::new(vec![k, n], db)?))
}

/// `x [N,Cin]`, `w [Cout,Cin]`, `b [Cout]` → `x·wᵀ + b`.
pub fn linear<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, cin) = x.dims2("linear")?;
    let (cout, wcin) = w.dims2("linear")?;
    if wcin != cin || b.shape() != [cout] {
        return Err(Error::shape(
            "linear",
            format!("x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    let mut y: Vec<T> = (0..n).flat_map(|_| b.data().iter().copied()).collect();
    T::gemm(T::one(), Mat::new(x.data(), n, cin), Mat::transposed(w.data(), cout, cin), T::one(), &mut y, cout);
    Tensor::new(vec![n, cout], y)
}

pub fn linear_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, cin) = x.dims2("linear_backward")?;
    let (cout, _) = w.dims2("linear_backward")?;
    let mut dx = vec![T::zero(); n * cin];
    T::gemm(T::one(), Mat::new(dy.data(), n, cout), Mat::new(w.data(), cout, cin), T::zero(), &mut dx, cin);
    let mut dw = vec![T::zero(); cout * cin];
    T::gemm(T::one(), Mat::transposed(dy.data(), n, cout), Mat::new(x.data(), n, cin), T::zero(), &mut dw, cin);
    let mut db = vec![T::zero(); cout];
    for row in dy.data().chunks(cout) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    Ok((Tensor::new(vec![n, cin], dx)?, Tensor::new(vec![cout, cin], dw)?, Tensor::new(vec![cout], db)?))
}

/// Mean over H×W: `[N,C,H,W]` → `[N,C]`.
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("global_avg_pool")?;
    let hw = h * w;
    if hw == 0 {
        return Err(Error::shape("global_avg_pool", "empty spatial extent"));
    }
    let denom = T::from_usize(hw).unwrap();
    let out = x
        .data()
        .chunks(hw)
        .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) / denom)
        .collect();
    Tensor::new(vec![n, c], out)
}

pub fn global_avg_pool_backward<T: Element>(shape: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    let hw = shape[2] * shape[3];
    let denom = T::from_usize(hw).unwrap();
    let data = dy
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g / denom, hw))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

fn check_labels<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<(usize, usize)> {
    let (n, k) = logits.dims2("cross_entropy")?;
    if labels.len() != n {
        return Err(Error::shape("cross_entropy", format!("{n} rows but {} labels", labels.len())));
    }
    if n == 0 {
        return Err(Error::shape("cross_entropy", "empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::arg("cross_entropy", format!("label {bad} >= {k} classes")));
    }
    Ok((n, k))
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
/// Also returns the softmax probabilities for the backward pass.
pub fn cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, k) = check_labels(logits, labels)?;
    let mut probs = logits.clone();
    let mut total = T::zero();
    for (row, (p, &l)) in logits.data().chunks(k).zip(probs.data_mut().chunks_mut(k).zip(labels)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln() + max;
        total += lse - row[l];
        softmax_row(p);
    }
    Ok((Tensor::scalar(total / T::from_usize(n).unwrap()), probs))
}

pub fn cross_entropy_backward<T: Element>(probs: &Tensor<T>, labels: &[usize], dloss: T) -> Tensor<T> {
    let k = probs.shape()[1];
    let scale = dloss / T::from_usize(labels.len()).unwrap();
    let mut d = probs.clone();
    for (row, &l) in d.data_mut().chunks_mut(k).zip(labels) {
        row[l] -= T::one();
        row.iter_mut().for_each(|v| *v *= scale);
    }
    d
}

/// `x [N,C,H,W] ⊙ g [N,C]` broadcast over H×W.
pub fn scale_channels<T: Element>(x: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("scale_channels")?;
    if g.shape() != [n, c] {
        return Err(Error::shape("scale_channels", format!("gate {:?} for {:?}", g.shape(), x.shape())));
    }
    let hw = h * w;
    let (xd, gd) = (x.data(), g.data());
    let mut out = vec![T::zero(); x.len()];
    par::for_each_chunk_mut(&mut out, hw, |idx, y| {
        for (o, &v) in y.iter_mut().zip(&xd[idx * hw..(idx + 1) * hw]) {
            *o = v * gd[idx];
        }
    });
    Tensor::new(x.shape().to_vec(), out)
}

pub fn scale_channels_backward<T: Element>(x: &Tensor<T>, g: &Tensor<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let hw = x.shape()[2] * x.shape()[3];
    let dx = scale_channels(dy, g)?;
    let dg = x
        .data()
        .chunks(hw)
        .zip(dy.data().chunks(hw))
        .map(|(a, b)| a.iter().zip(b).fold(T::zero(), |s, (&u, &v)| s + u * v))
        .collect();
    Ok((dx, Tensor::new(g.shape().to_vec(), dg)?))
}

/// Per-channel `x·scale + shift` with `scale, shift [C]`.
pub fn channel_affine<T: Element>(x: &Tensor<T>, scale: &Tensor<T>, shift: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (_, c, h, w) = x.dims4("channel_affine")?;
    if scale.shape() != [c] || shift.is_some_and(|s| s.shape() != [c]) {
        return Err(Error::shape("channel_affine", format!("parameters for {c} channels")));
    }
    let hw = h * w;
    let (xd, sd) = (x.data(), scale.data());
    let td = shift.map(|s| s.data());
    let mut out = vec![T::zero(); x.len()];
    par::for_each_chunk_mut(&mut out, hw, |idx, y| {
        let ch = idx % c;
        let t = td.map_or(T::zero(), |t| t[ch]);
        for (o, &v) in y.iter_mut().zip(&xd[idx * hw..(idx + 1) * hw]) {
            *o = v * sd[ch] + t;
        }
    });
    Tensor::new(x.shape().to_vec(), out)
}

/// `(dx, dscale, dshift)` for [`channel_affine`].
pub fn channel_affine_backward<T: Element>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = x.dims4("channel_affine_backward")?;
    let hw = h * w;
    let dx = channel_affine(dy, scale, None)?;
    let (xd, dyd) = (x.data(), dy.data());
    let sums = par::map(c, |ch| {
        let (mut ds, mut dt) = (T::zero(), T::zero());
        for i in 0..n {
            let base = (i * c + ch) * hw;
            for j in base..base + hw {
                ds += dyd[j] * xd[j];
                dt += dyd[j];
            }
        }
        (ds, dt)
    });
    let ds = Tensor::from_fn(vec![c], |i| sums[i].0);
    let dt = Tensor::from_fn(vec![c], |i| sums[i].1);
    Ok((dx, ds, dt))
}

/// Channels `[start, start+len)` of an NCHW tensor.
pub fn slice_channels<T: Element>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("slice_channels")?;
    if start + len > c {
        return Err(Error::shape("slice_channels", format!("[{start}, {}) of {c} channels", start + len)));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * len * hw);
    for i in 0..n {
        out.extend_from_slice(&x.data()[(i * c + start) * hw..(i * c + start + len) * hw]);
    }
    Tensor::new(vec![n, len, h, w], out)
}

/// Scatter a channel-slice gradient back into a zero tensor of `shape`.
pub fn slice_channels_backward<T: Element>(shape: &[usize], start: usize, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let len = dy.shape()[1];
    let mut dx = Tensor::zeros(shape.to_vec());
    for i in 0..n {
        dx.data_mut()[(i * c + start) * hw..(i * c + start + len) * hw]
            .copy_from_slice(&dy.data()[i * len * hw..(i + 1) * len * hw]);
    }
    Ok(dx)
}

/// Concatenate NCHW tensors along channels.
pub fn concat_channels<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::arg("concat_channels", "no inputs"))?;
    let (n, _, h, w) = first.dims4("concat_channels")?;
    let mut total = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4("concat_channels")?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::shape("concat_channels", format!("{:?} vs {:?}", p.shape(), first.shape())));
        }
        total += pc;
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * total * hw);
    for i in 0..n {
        for p in parts {
            let pc = p.shape()[1];
            out.extend_from_slice(&p.data()[i * pc * hw..(i + 1) * pc * hw]);
        }
    }
    Tensor::new(vec![n, total, h, w], out)
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", format!("{:?} + {:?}", a.shape(), b.shape())));
    }
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect())
}

pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mul", format!("{:?} * {:?}", a.shape(), b.shape())));
    }
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect())
}
