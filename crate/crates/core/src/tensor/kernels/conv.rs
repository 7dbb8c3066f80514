//! Dense, depthwise and pointwise convolutions on NCHW tensors.
//!
//! Dense convolution lowers each image to a column matrix and runs one GEMM
//! per image. Batch items are independent, so forward and input-gradient
//! passes split over the batch; weight gradients accumulate over the batch in
//! index order to keep the reduction order fixed.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Element, Mat, Tensor};

/// Output extent of a strided window: `floor((len + 2·pad − k) / stride) + 1`.
pub fn out_extent(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || len + 2 * pad < kernel {
        return None;
    }
    Some((len + 2 * pad - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn cols_rows(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
    fn in_image(&self) -> usize {
        self.cin * self.h * self.w
    }
}

fn geometry<T: Element>(
    op: &'static str,
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
    depthwise: bool,
) -> Result<Geometry> {
    let (n, cin, h, wd) = x.dims4(op)?;
    let (cout, wcin, kh, kw) = w.dims4(op)?;
    if stride == 0 {
        return Err(Error::arg(op, "stride must be positive"));
    }
    if kh != kw || kh == 0 {
        return Err(Error::shape(op, format!("kernel must be square and non-empty, got {kh}x{kw}")));
    }
    if depthwise {
        if wcin != 1 || cout != cin {
            return Err(Error::shape(op, format!("weight {:?} for {cin} channels", w.shape())));
        }
    } else if wcin != cin {
        return Err(Error::shape(op, format!("input has {cin} channels, weight expects {wcin}")));
    }
    if b.shape() != [cout] {
        return Err(Error::shape(op, format!("bias {:?} for {cout} output channels", b.shape())));
    }
    let (Some(ho), Some(wo)) = (out_extent(h, kh, stride, pad), out_extent(wd, kw, stride, pad)) else {
        return Err(Error::shape(op, format!("input {h}x{wd} with pad {pad} smaller than kernel {kh}")));
    };
    Ok(Geometry { n, cin, h, w: wd, cout, k: kh, stride, pad, ho, wo })
}

/// Unfold one image `[cin, h, w]` into `[cin·k·k, ho·wo]`.
fn im2col<T: Element>(g: &Geometry, img: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.cin {
        let src = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize { T::zero() } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Fold `[cin·k·k, ho·wo]` back onto one image, accumulating overlaps.
fn col2im<T: Element>(g: &Geometry, cols: &[T], img: &mut [T]) {
    let plane = g.out_plane();
    img.fill(T::zero());
    for ci in 0..g.cin {
        let dst = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x [N,Cin,H,W]` with `w [Cout,Cin,k,k]` plus bias.
pub fn conv2d<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let g = geometry("conv2d", x, w, b, stride, pad, false)?;
    let plane = g.out_plane();
    let mut out = vec![T::zero(); g.n * g.cout * plane];
    let xd = x.data();
    // Dense convolutions accumulate in f64: the reduction runs over Cin·k²
    // terms and these layers are a small share of the network's MACs.
    let wide = |v: &[T]| v.iter().map(|e| e.to_f64().unwrap()).collect::<Vec<f64>>();
    let (wd, bd) = (wide(w.data()), wide(b.data()));
    par::for_each_chunk_mut(&mut out, g.cout * plane, |n, y| {
        let img = &xd[n * g.in_image()..(n + 1) * g.in_image()];
        let mut cols = vec![T::zero(); g.cols_rows() * plane];
        im2col(&g, img, &mut cols);
        let cols = wide(&cols);
        let mut acc = vec![0.0; g.cout * plane];
        for (co, row) in acc.chunks_mut(plane).enumerate() {
            row.fill(bd[co]);
        }
        f64::gemm(1.0, Mat::new(&wd, g.cout, g.cols_rows()), Mat::new(&cols, g.cols_rows(), plane), 1.0, &mut acc, plane);
        for (o, a) in y.iter_mut().zip(acc) {
            *o = T::from_f64(a).unwrap();
        }
    });
    Tensor::new(vec![g.n, g.cout, g.ho, g.wo], out)
}

/// Gradients of [`conv2d`] w.r.t. input, weight and bias.
pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let cout = w.shape()[0];
    let bias = Tensor::zeros(vec![cout]);
    let g = geometry("conv2d_backward", x, w, &bias, stride, pad, false)?;
    let plane = g.out_plane();
    if dy.shape() != [g.n, g.cout, g.ho, g.wo] {
        return Err(Error::shape("conv2d_backward", format!("grad {:?}", dy.shape())));
    }
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    let ckk = g.cols_rows();

    let mut dw = vec![T::zero(); g.cout * ckk];
    let mut db = vec![T::zero(); g.cout];
    let mut cols = vec![T::zero(); ckk * plane];
    for n in 0..g.n {
        let img = &xd[n * g.in_image()..(n + 1) * g.in_image()];
        let dyn_ = &dyd[n * g.cout * plane..(n + 1) * g.cout * plane];
        im2col(&g, img, &mut cols);
        T::gemm(
            T::one(),
            Mat::new(dyn_, g.cout, plane),
            Mat::transposed(&cols, ckk, plane),
            T::one(),
            &mut dw,
            ckk,
        );
        for (co, row) in dyn_.chunks(plane).enumerate() {
            db[co] += row.iter().fold(T::zero(), |a, &v| a + v);
        }
    }

    let mut dx = vec![T::zero(); x.len()];
    par::for_each_chunk_mut(&mut dx, g.in_image(), |n, dimg| {
        let dyn_ = &dyd[n * g.cout * plane..(n + 1) * g.cout * plane];
        let mut dcols = vec![T::zero(); ckk * plane];
        T::gemm(
            T::one(),
            Mat::transposed(wd, g.cout, ckk),
            Mat::new(dyn_, g.cout, plane),
            T::zero(),
            &mut dcols,
            plane,
        );
        col2im(&g, &dcols, dimg);
    });

    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(w.shape().to_vec(), dw)?,
        Tensor::new(vec![g.cout], db)?,
    ))
}

/// Per-channel convolution: `w [C,1,k,k]`, groups == C.
pub fn depthwise_conv2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = geometry("depthwise_conv2d", x, w, b, stride, pad, true)?;
    let plane_in = g.h * g.w;
    let plane_out = g.out_plane();
    let kk = g.k * g.k;
    let mut out = vec![T::zero(); g.n * g.cin * plane_out];
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    par::for_each_chunk_mut(&mut out, plane_out, |idx, y| {
        let c = idx % g.cin;
        let src = &xd[idx * plane_in..(idx + 1) * plane_in];
        let ker = &wd[c * kk..(c + 1) * kk];
        y.fill(bd[c]);
        for oy in 0..g.ho {
            let yrow = &mut y[oy * g.wo..(oy + 1) * g.wo];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                for kx in 0..g.k {
                    let wv = ker[ky * g.k + kx];
                    for (ox, o) in yrow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *o += wv * srow[ix as usize];
                        }
                    }
                }
            }
        }
    });
    Tensor::new(vec![g.n, g.cin, g.ho, g.wo], out)
}

pub fn depthwise_conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let c_total = w.shape()[0];
    let bias = Tensor::zeros(vec![c_total]);
    let g = geometry("depthwise_conv2d_backward", x, w, &bias, stride, pad, true)?;
    let plane_in = g.h * g.w;
    let plane_out = g.out_plane();
    let kk = g.k * g.k;
    if dy.shape() != [g.n, g.cin, g.ho, g.wo] {
        return Err(Error::shape("depthwise_conv2d_backward", format!("grad {:?}", dy.shape())));
    }
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());

    // Visit every (output, tap) pair that lands inside the input plane.
    let taps = |f: &mut dyn FnMut(usize, usize, usize)| {
        for oy in 0..g.ho {
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            f(oy * g.wo + ox, ky * g.k + kx, iy as usize * g.w + ix as usize);
                        }
                    }
                }
            }
        }
    };

    let mut dx = vec![T::zero(); x.len()];
    par::for_each_chunk_mut(&mut dx, plane_in, |idx, dplane| {
        let c = idx % g.cin;
        let ker = &wd[c * kk..(c + 1) * kk];
        let dyp = &dyd[idx * plane_out..(idx + 1) * plane_out];
        taps(&mut |o, t, i| dplane[i] += ker[t] * dyp[o]);
    });

    let mut dw = vec![T::zero(); g.cin * kk];
    let mut db = vec![T::zero(); g.cin];
    par::for_each_chunk_mut2(&mut dw, kk, &mut db, 1, |c, dker, dbias| {
        for n in 0..g.n {
            let idx = n * g.cin + c;
            let src = &xd[idx * plane_in..(idx + 1) * plane_in];
            let dyp = &dyd[idx * plane_out..(idx + 1) * plane_out];
            taps(&mut |o, t, i| dker[t] += src[i] * dyp[o]);
            dbias[0] += dyp.iter().fold(T::zero(), |a, &v| a + v);
        }
    });

    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(w.shape().to_vec(), dw)?,
        Tensor::new(vec![g.cin], db)?,
    ))
}

fn pointwise_dims<T: Element>(op: &'static str, x: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let (n, cin, h, wd) = x.dims4(op)?;
    let (cout, wcin) = w.dims2(op)?;
    if wcin != cin {
        return Err(Error::shape(op, format!("input has {cin} channels, weight {:?}", w.shape())));
    }
    Ok((n, cin, cout, h * wd))
}

/// Per-position linear map `w [Cout,Cin]` over channels; a 1×1 convolution.
pub fn pointwise<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, cin, cout, hw) = pointwise_dims("pointwise", x, w)?;
    if b.shape() != [cout] {
        return Err(Error::shape("pointwise", format!("bias {:?} for {cout} outputs", b.shape())));
    }
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![T::zero(); n * cout * hw];
    par::for_each_chunk_mut(&mut out, cout * hw, |i, y| {
        for (co, row) in y.chunks_mut(hw).enumerate() {
            row.fill(bd[co]);
        }
        T::gemm(
            T::one(),
            Mat::new(wd, cout, cin),
            Mat::new(&xd[i * cin * hw..(i + 1) * cin * hw], cin, hw),
            T::one(),
            y,
            hw,
        );
    });
    let s = x.shape();
    Tensor::new(vec![n, cout, s[2], s[3]], out)
}

pub fn pointwise_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, cin, cout, hw) = pointwise_dims("pointwise_backward", x, w)?;
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    if dy.len() != n * cout * hw {
        return Err(Error::shape("pointwise_backward", format!("grad {:?}", dy.shape())));
    }
    let mut dw = vec![T::zero(); cout * cin];
    let mut db = vec![T::zero(); cout];
    for i in 0..n {
        let dyi = &dyd[i * cout * hw..(i + 1) * cout * hw];
        T::gemm(
            T::one(),
            Mat::new(dyi, cout, hw),
            Mat::transposed(&xd[i * cin * hw..(i + 1) * cin * hw], cin, hw),
            T::one(),
            &mut dw,
            cin,
        );
        for (co, row) in dyi.chunks(hw).enumerate() {
            db[co] += row.iter().fold(T::zero(), |a, &v| a + v);
        }
    }
    let mut dx = vec![T::zero(); x.len()];
    par::for_each_chunk_mut(&mut dx, cin * hw, |i, d| {
        T::gemm(
            T::one(),
            Mat::transposed(wd, cout, cin),
            Mat::new(&dyd[i * cout * hw..(i + 1) * cout * hw], cout, hw),
            T::zero(),
            d,
            hw,
        );
    });
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(w.shape().to_vec(), dw)?,
        Tensor::new(vec![cout], db)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_extent_formula() {
        assert_eq!(out_extent(224, 7, 4, 3), Some(56));
        assert_eq!(out_extent(56, 3, 2, 1), Some(28));
        assert_eq!(out_extent(7, 3, 2, 1), Some(4));
        assert_eq!(out_extent(1, 3, 2, 0), None);
        assert_eq!(out_extent(5, 3, 0, 0), None);
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_zero_stride() {
        let x = Tensor::<f32>::zeros(vec![1, 3, 8, 8]);
        let w = Tensor::<f32>::zeros(vec![4, 2, 3, 3]);
        let b = Tensor::<f32>::zeros(vec![4]);
        assert!(matches!(conv2d(&x, &w, &b, 1, 1), Err(Error::Shape { .. })));
        let w = Tensor::<f32>::zeros(vec![4, 3, 3, 3]);
        assert!(matches!(conv2d(&x, &w, &b, 0, 1), Err(Error::InvalidArgument { .. })));
    }

    #[test]
    fn depthwise_rejects_grouped_weight() {
        let x = Tensor::<f32>::zeros(vec![1, 4, 8, 8]);
        let w = Tensor::<f32>::zeros(vec![4, 2, 3, 3]);
        let b = Tensor::<f32>::zeros(vec![4]);
        assert!(depthwise_conv2d(&x, &w, &b, 1, 1).is_err());
    }

    #[test]
    fn pointwise_shape() {
        let x = Tensor::<f32>::zeros(vec![1, 256, 14, 14]);
        let w = Tensor::<f32>::zeros(vec![512, 256]);
        let b = Tensor::<f32>::zeros(vec![512]);
        assert_eq!(pointwise(&x, &w, &b).unwrap().shape(), &[1, 512, 14, 14]);
    }
}
