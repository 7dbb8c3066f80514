use crate::arch::{LayerOp, ModuleGraph};
use crate::error::{Error, Result};
use crate::tensor::kernels::conv::out_extent;
use crate::tensor::Element;

fn four(op: &'static str, s: &[usize]) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(s).map_err(|_| Error::shape(op, format!("expected rank 4, got {s:?}")))
}

fn channels(op: &'static str, s: &[usize], want: usize) -> Result<()> {
    match s.get(1) {
        Some(&c) if c == want => Ok(()),
        _ => Err(Error::shape(op, format!("expected {want} channels, got {s:?}"))),
    }
}

fn conv_out(op: &'static str, x: &[usize], cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Result<Vec<usize>> {
    let [n, _, h, w] = four(op, x)?;
    channels(op, x, cin)?;
    if stride == 0 {
        return Err(Error::arg(op, "stride must be positive"));
    }
    let (ho, wo) = out_extent(h, k, stride, pad)
        .zip(out_extent(w, k, stride, pad))
        .ok_or_else(|| Error::shape(op, format!("{h}×{w} input too small for kernel {k} pad {pad}")))?;
    Ok(vec![n, cout, ho, wo])
}

/// Output shape of every layer, by symbolic propagation from `input`.
pub fn infer_shapes<T: Element>(graph: &ModuleGraph<T>, input: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(graph.layers().len() + 1);
    shapes.push(input.to_vec());
    channels("input", input, graph.in_channels())?;
    for l in graph.layers() {
        let x = &shapes[l.inputs[0]];
        let out = match l.op {
            LayerOp::Conv2d { in_ch, out_ch, kernel, stride, padding } => {
                conv_out("conv2d", x, in_ch, out_ch, kernel, stride, padding)?
            }
            LayerOp::DepthwiseConv2d { channels: c, kernel, stride, padding } => {
                conv_out("depthwise_conv2d", x, c, c, kernel, stride, padding)?
            }
            LayerOp::Pointwise { in_ch, out_ch } => {
                let [n, _, h, w] = four("pointwise", x)?;
                channels("pointwise", x, in_ch)?;
                vec![n, out_ch, h, w]
            }
            LayerOp::Linear { in_features, out_features } => match x.as_slice() {
                &[n, c] if c == in_features => vec![n, out_features],
                _ => return Err(Error::shape("linear", format!("expected [N, {in_features}], got {x:?}"))),
            },
            LayerOp::BatchNorm { channels: c, .. }
            | LayerOp::ChannelAffine { channels: c }
            | LayerOp::LayerScale { channels: c } => {
                channels(l.op.kind(), x, c)?;
                x.clone()
            }
            LayerOp::Scam { channels: c } => {
                four("scam", x)?;
                channels("scam", x, c)?;
                x.clone()
            }
            LayerOp::Gelu => x.clone(),
            LayerOp::SliceChannels { start, len } => {
                let [n, c, h, w] = four("slice_channels", x)?;
                if start + len > c || len == 0 {
                    return Err(Error::shape("slice_channels", format!("[{start}, {}) outside {c} channels", start + len)));
                }
                vec![n, len, h, w]
            }
            LayerOp::ConcatChannels => {
                let [n, _, h, w] = four("concat_channels", x)?;
                let mut c = 0;
                for &v in &l.inputs {
                    let [n2, c2, h2, w2] = four("concat_channels", &shapes[v])?;
                    if (n2, h2, w2) != (n, h, w) {
                        return Err(Error::shape("concat_channels", format!("{:?} vs {x:?}", shapes[v])));
                    }
                    c += c2;
                }
                vec![n, c, h, w]
            }
            LayerOp::Attention { qk_dim, v_dim } => {
                let [n, _, h, w] = four("attention", x)?;
                let k = &shapes[l.inputs[1]];
                let v = &shapes[l.inputs[2]];
                if x.as_slice() != [n, qk_dim, h, w] || k != x || v.as_slice() != [n, v_dim, h, w] {
                    return Err(Error::shape("attention", format!("q {x:?}, k {k:?}, v {v:?}")));
                }
                v.clone()
            }
            LayerOp::Add => {
                let y = &shapes[l.inputs[1]];
                if x != y {
                    return Err(Error::shape("add", format!("{x:?} vs {y:?}")));
                }
                x.clone()
            }
            LayerOp::GlobalAvgPool => {
                let [n, c, _, _] = four("global_avg_pool", x)?;
                vec![n, c]
            }
        };
        shapes.push(out);
    }
    shapes.remove(0);
    Ok(shapes)
}
