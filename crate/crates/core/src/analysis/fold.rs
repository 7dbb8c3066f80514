//! Inference-time batch-norm folding.
//!
//! A BN computes `y = s·x + t` per channel with `s = γ/√(σ² + ε)` and
//! `t = β − μ·s`. It is absorbed, in order of preference:
//!
//! * into the conv / depthwise / pointwise / linear layer that produces its
//!   input, when that output has no other reader: `W[o] ← s[o]·W[o]`,
//!   `b ← s·b + t`;
//! * into a single pointwise / linear reader: `W[:, i] ← W[:, i]·s[i]`,
//!   `b ← b + W·t` (padded spatial convolutions are skipped, since padding
//!   would see the shift);
//! * otherwise it becomes a standalone per-channel affine layer.

use std::collections::HashMap;

use crate::arch::{Layer, LayerOp, ModuleGraph, Param, ValueId};
use crate::error::{Error, Result};
use crate::tensor::kernels::BnMode;
use crate::tensor::{Element, Tensor};

struct Affine {
    scale: Vec<f64>,
    shift: Vec<f64>,
}

fn bn_affine<T: Element>(l: &Layer<T>, eps: f64) -> Affine {
    let f = |i: usize| l.params[i].tensor.data().iter().map(|v| v.to_f64().unwrap()).collect::<Vec<f64>>();
    let (g, b, m, v) = (f(0), f(1), f(2), f(3));
    let scale: Vec<f64> = g.iter().zip(&v).map(|(g, v)| g / (v + eps).sqrt()).collect();
    let shift = b.iter().zip(&m).zip(&scale).map(|((b, m), s)| b - m * s).collect();
    Affine { scale, shift }
}

fn absorbs_output(op: &LayerOp) -> bool {
    matches!(
        op,
        LayerOp::Conv2d { .. } | LayerOp::DepthwiseConv2d { .. } | LayerOp::Pointwise { .. } | LayerOp::Linear { .. }
    )
}

fn absorbs_input(op: &LayerOp) -> bool {
    matches!(op, LayerOp::Pointwise { .. } | LayerOp::Linear { .. })
}

fn to_f64<T: Element>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64().unwrap()).collect()
}

fn from_f64<T: Element>(shape: &[usize], v: &[f64]) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |i| T::from_f64(v[i]).unwrap())
}

/// Scale output channel `o` of a weight/bias pair by `s[o]` and add `t[o]`.
fn fold_into_producer<T: Element>(l: &mut Layer<T>, a: &Affine) {
    let w = &l.params[0].tensor;
    let per_out = w.len() / a.scale.len();
    let mut wv = to_f64(w);
    for (o, chunk) in wv.chunks_mut(per_out).enumerate() {
        chunk.iter_mut().for_each(|v| *v *= a.scale[o]);
    }
    let bv: Vec<f64> = to_f64(&l.params[1].tensor)
        .iter()
        .enumerate()
        .map(|(o, b)| b * a.scale[o] + a.shift[o])
        .collect();
    l.params[0].tensor = from_f64(w.shape(), &wv);
    l.params[1].tensor = from_f64(&[bv.len()], &bv);
}

/// Fold a per-input-channel affine into a `[Cout, Cin]` weight.
fn fold_into_consumer<T: Element>(l: &mut Layer<T>, a: &Affine) {
    let w = &l.params[0].tensor;
    let (cout, cin) = (w.shape()[0], w.shape()[1]);
    let mut wv = to_f64(w);
    let mut bv = to_f64(&l.params[1].tensor);
    for o in 0..cout {
        let row = &mut wv[o * cin..(o + 1) * cin];
        bv[o] += row.iter().zip(&a.shift).map(|(w, t)| w * t).sum::<f64>();
        row.iter_mut().zip(&a.scale).for_each(|(w, s)| *w *= s);
    }
    l.params[0].tensor = from_f64(&[cout, cin], &wv);
    l.params[1].tensor = from_f64(&[cout], &bv);
}

/// Remove every batch norm from an inference-mode graph.
pub fn fold_batchnorm<T: Element>(graph: &ModuleGraph<T>) -> Result<ModuleGraph<T>> {
    if graph.mode() == BnMode::Train {
        return Err(Error::TrainModeFold);
    }
    let layers = graph.layers();
    let n = layers.len();
    let mut readers: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
    for (i, l) in layers.iter().enumerate() {
        for &v in &l.inputs {
            readers[v].push(i);
        }
    }
    // The graph output counts as an extra reader.
    let sole_reader = |v: ValueId| (v != n && readers[v].len() == 1).then(|| readers[v][0]);

    let mut out: Vec<Layer<T>> = Vec::with_capacity(n);
    let mut remap: Vec<ValueId> = vec![0; n + 1];
    let mut pending: HashMap<usize, Vec<Affine>> = HashMap::new();

    for (i, l) in layers.iter().enumerate() {
        let inputs: Vec<ValueId> = l.inputs.iter().map(|&v| remap[v]).collect();
        if let LayerOp::BatchNorm { channels, eps, .. } = l.op {
            let a = bn_affine(l, eps);
            let src = l.inputs[0];
            if src > 0 && absorbs_output(&layers[src - 1].op) && sole_reader(src) == Some(i) {
                fold_into_producer(&mut out[remap[src] - 1], &a);
                remap[i + 1] = remap[src];
                continue;
            }
            if let Some(j) = sole_reader(i + 1).filter(|&j| absorbs_input(&layers[j].op)) {
                pending.entry(j).or_default().push(a);
                remap[i + 1] = remap[src];
                continue;
            }
            let scale = Param {
                name: format!("{}.scale", l.path),
                tensor: from_f64(&[channels], &a.scale),
                learned: true,
            };
            let shift = Param {
                name: format!("{}.shift", l.path),
                tensor: from_f64(&[channels], &a.shift),
                learned: true,
            };
            out.push(Layer {
                path: l.path.clone(),
                op: LayerOp::ChannelAffine { channels },
                inputs,
                params: vec![scale, shift],
            });
        } else {
            let mut nl = Layer { path: l.path.clone(), op: l.op.clone(), inputs, params: l.params.clone() };
            for a in pending.remove(&i).unwrap_or_default() {
                fold_into_consumer(&mut nl, &a);
            }
            out.push(nl);
        }
        remap[i + 1] = out.len();
    }
    ModuleGraph::new(graph.name(), graph.in_channels(), out, BnMode::Infer)
}
