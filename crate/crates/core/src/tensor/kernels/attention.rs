//! Single-head spatial attention.
//!
//! The core kernels take channel-major token maps `[N, C, T]` (an NCHW tensor
//! with `T = H·W`), so the mixer never reshapes its feature maps. The
//! token-major entry point [`single_head_attention`] transposes in and out.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::kernels::activation::softmax_row;
use crate::tensor::{Element, Mat, Tensor};

fn dims<T: Element>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let flat = |t: &Tensor<T>| -> Result<(usize, usize, usize)> {
        match *t.shape() {
            [n, c, h, w] => Ok((n, c, h * w)),
            [n, c, l] => Ok((n, c, l)),
            _ => Err(Error::shape("attention", format!("expected [N,C,H,W] or [N,C,T], got {:?}", t.shape()))),
        }
    };
    let (nq, cq, tq) = flat(q)?;
    let (nk, ck, tk) = flat(k)?;
    let (nv, ca, tv) = flat(v)?;
    if cq != ck {
        return Err(Error::shape("attention", format!("query dim {cq} != key dim {ck}")));
    }
    if cq == 0 {
        return Err(Error::shape("attention", "query/key dim is zero"));
    }
    if nq != nk || nq != nv || tq != tk || tq != tv {
        return Err(Error::shape(
            "attention",
            format!("q {:?}, k {:?}, v {:?} disagree on batch or tokens", q.shape(), k.shape(), v.shape()),
        ));
    }
    Ok((nq, cq, ca, tq))
}

/// `out[:, i] = Σ_j P[i,j]·v[:, j]` with `P = softmax_rows(qᵀk / √C_q)`.
///
/// Returns the output (same shape as `v`) and the attention weights `[N,T,T]`.
pub fn attention_channel_major<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, cq, ca, t) = dims(q, k, v)?;
    let scale = T::one() / T::from_usize(cq).unwrap().sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut probs = vec![T::zero(); n * t * t];
    let mut out = vec![T::zero(); n * ca * t];
    par::for_each_chunk_mut2(&mut probs, t * t, &mut out, ca * t, |i, p, o| {
        let qi = &qd[i * cq * t..(i + 1) * cq * t];
        let ki = &kd[i * cq * t..(i + 1) * cq * t];
        T::gemm(scale, Mat::transposed(qi, cq, t), Mat::new(ki, cq, t), T::zero(), p, t);
        p.chunks_mut(t).for_each(softmax_row);
        T::gemm(
            T::one(),
            Mat::new(&vd[i * ca * t..(i + 1) * ca * t], ca, t),
            Mat::transposed(p, t, t),
            T::zero(),
            o,
            t,
        );
    });
    Ok((Tensor::new(v.shape().to_vec(), out)?, Tensor::new(vec![n, t, t], probs)?))
}

/// Gradients `(dq, dk, dv)` of [`attention_channel_major`].
pub fn attention_channel_major_backward<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &Tensor<T>,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, cq, ca, t) = dims(q, k, v)?;
    let scale = T::one() / T::from_usize(cq).unwrap().sqrt();
    let (qd, kd, vd, pd, dod) = (q.data(), k.data(), v.data(), probs.data(), dout.data());
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    // One batch item per task; each writes only its own slices.
    let grads = par::map(n, |i| {
        let p = &pd[i * t * t..(i + 1) * t * t];
        let dov = &dod[i * ca * t..(i + 1) * ca * t];
        let vi = &vd[i * ca * t..(i + 1) * ca * t];
        let qi = &qd[i * cq * t..(i + 1) * cq * t];
        let ki = &kd[i * cq * t..(i + 1) * cq * t];

        let mut dvi = vec![T::zero(); ca * t];
        T::gemm(T::one(), Mat::new(dov, ca, t), Mat::new(p, t, t), T::zero(), &mut dvi, t);

        let mut ds = vec![T::zero(); t * t];
        T::gemm(T::one(), Mat::transposed(dov, ca, t), Mat::new(vi, ca, t), T::zero(), &mut ds, t);
        for (drow, prow) in ds.chunks_mut(t).zip(p.chunks(t)) {
            let dot = drow.iter().zip(prow).fold(T::zero(), |a, (&g, &s)| a + g * s);
            for (g, &s) in drow.iter_mut().zip(prow) {
                *g = s * (*g - dot) * scale;
            }
        }
        let mut dqi = vec![T::zero(); cq * t];
        T::gemm(T::one(), Mat::new(ki, cq, t), Mat::transposed(&ds, t, t), T::zero(), &mut dqi, t);
        let mut dki = vec![T::zero(); cq * t];
        T::gemm(T::one(), Mat::new(qi, cq, t), Mat::new(&ds, t, t), T::zero(), &mut dki, t);
        (dqi, dki, dvi)
    });
    for (i, (a, b, c)) in grads.into_iter().enumerate() {
        dq[i * cq * t..(i + 1) * cq * t].copy_from_slice(&a);
        dk[i * cq * t..(i + 1) * cq * t].copy_from_slice(&b);
        dv[i * ca * t..(i + 1) * ca * t].copy_from_slice(&c);
    }
    Ok((
        Tensor::new(q.shape().to_vec(), dq)?,
        Tensor::new(k.shape().to_vec(), dk)?,
        Tensor::new(v.shape().to_vec(), dv)?,
    ))
}

fn swap_last_two<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let (n, a, b) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = x.data();
    let mut out = vec![T::zero(); d.len()];
    for i in 0..n {
        for r in 0..a {
            for c in 0..b {
                out[i * a * b + c * a + r] = d[i * a * b + r * b + c];
            }
        }
    }
    Tensor::new(vec![n, b, a], out).unwrap()
}

/// Token-major attention: `q [N,T,C_q]`, `k [N,T,C_k]`, `v [N,T,C_a]` →
/// `softmax_rows(q·kᵀ/√C_q)·v` of shape `[N,T,C_a]`.
pub fn single_head_attention<T: Element>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    for t in [q, k, v] {
        if t.rank() != 3 {
            return Err(Error::shape("single_head_attention", format!("expected [N,T,C], got {:?}", t.shape())));
        }
    }
    let (out, _) = attention_channel_major(&swap_last_two(q), &swap_last_two(k), &swap_last_two(v))?;
    Ok(swap_last_two(&out))
}
