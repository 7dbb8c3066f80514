//! Execution backends for the model graph.
//!
//! [`Exec`] is the operator set a model forward pass needs. [`Eval`] runs the
//! kernels directly and keeps nothing, so a frozen graph can be evaluated from
//! many threads at once; [`crate::tensor::autodiff::Tape`] records every op
//! for a later backward pass.

use std::borrow::Cow;

use crate::error::Result;
use crate::tensor::kernels::{self, BnMode};
use crate::tensor::{Element, Tensor};

/// Identifies a parameter slot in a model graph: layer index and slot index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub layer: usize,
    pub slot: usize,
}

/// Running-statistics update emitted by a train-mode batchnorm.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub layer: usize,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct BnArgs<'g, T> {
    pub running_mean: &'g Tensor<T>,
    pub running_var: &'g Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
    pub mode: BnMode,
    pub layer: usize,
}

pub trait Exec<'g, T: Element> {
    type V;

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<T>;
    fn input(&mut self, t: Tensor<T>) -> Self::V;
    fn param(&mut self, id: ParamId, t: &'g Tensor<T>) -> Self::V;

    fn conv2d(&mut self, x: &Self::V, w: &Self::V, b: &Self::V, stride: usize, pad: usize) -> Result<Self::V>;
    fn depthwise_conv2d(&mut self, x: &Self::V, w: &Self::V, b: &Self::V, stride: usize, pad: usize)
        -> Result<Self::V>;
    fn pointwise(&mut self, x: &Self::V, w: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn batchnorm(&mut self, x: &Self::V, gamma: &Self::V, beta: &Self::V, args: BnArgs<'g, T>) -> Result<Self::V>;
    fn gelu(&mut self, x: &Self::V) -> Result<Self::V>;
    fn sigmoid(&mut self, x: &Self::V) -> Result<Self::V>;
    fn global_avg_pool(&mut self, x: &Self::V) -> Result<Self::V>;
    fn linear(&mut self, x: &Self::V, w: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale_channels(&mut self, x: &Self::V, gate: &Self::V) -> Result<Self::V>;
    fn channel_affine(&mut self, x: &Self::V, scale: &Self::V, shift: Option<&Self::V>) -> Result<Self::V>;
    fn slice_channels(&mut self, x: &Self::V, start: usize, len: usize) -> Result<Self::V>;
    fn concat_channels(&mut self, parts: &[&Self::V]) -> Result<Self::V>;
    fn attention(&mut self, q: &Self::V, k: &Self::V, v: &Self::V) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;

    /// Running-statistics updates produced since the last call.
    fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>>;
}

/// Direct evaluation without recording.
#[derive(Debug, Default)]
pub struct Eval<T> {
    bn_updates: Vec<BnUpdate<T>>,
}

impl<T> Eval<T> {
    pub fn new() -> Self {
        Eval { bn_updates: Vec::new() }
    }
}

fn owned<'g, T: Element>(t: Result<Tensor<T>>, op: &'static str) -> Result<Cow<'g, Tensor<T>>> {
    Ok(Cow::Owned(t?.check_finite(op)?))
}

impl<'g, T: Element> Exec<'g, T> for Eval<T> {
    type V = Cow<'g, Tensor<T>>;

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<T> {
        v
    }

    fn input(&mut self, t: Tensor<T>) -> Self::V {
        Cow::Owned(t)
    }

    fn param(&mut self, _id: ParamId, t: &'g Tensor<T>) -> Self::V {
        Cow::Borrowed(t)
    }

    fn conv2d(&mut self, x: &Self::V, w: &Self::V, b: &Self::V, stride: usize, pad: usize) -> Result<Self::V> {
        owned(kernels::conv2d(x, w, b, stride, pad), "conv2d")
    }

    fn depthwise_conv2d(&mut self, x: &Self::V, w: &Self::V, b: &Self::V, stride: usize, pad: usize) -> Result<Self::V> {
        owned(kernels::depthwise_conv2d(x, w, b, stride, pad), "depthwise_conv2d")
    }

    fn pointwise(&mut self, x: &Self::V, w: &Self::V, b: &Self::V) -> Result<Self::V> {
        owned(kernels::pointwise(x, w, b), "pointwise")
    }

    fn batchnorm(&mut self, x: &Self::V, gamma: &Self::V, beta: &Self::V, a: BnArgs<'g, T>) -> Result<Self::V> {
        match a.mode {
            BnMode::Infer => owned(
                kernels::batchnorm_infer(x, gamma, beta, a.running_mean, a.running_var, a.eps),
                "batchnorm",
            ),
            BnMode::Train => {
                let (y, stats) =
                    kernels::batchnorm_train(x, gamma, beta, a.running_mean, a.running_var, a.eps, a.momentum)?;
                self.bn_updates.push(BnUpdate {
                    layer: a.layer,
                    running_mean: stats.running_mean,
                    running_var: stats.running_var,
                });
                owned(Ok(y), "batchnorm")
            }
        }
    }

    fn gelu(&mut self, x: &Self::V) -> Result<Self::V> {
        owned(Ok(kernels::gelu(x)), "gelu")
    }

    fn sigmoid(&mut self, x: &Self::V) -> Result<Self::V> {
        owned(Ok(kernels::sigmoid(x)), "sigmoid")
    }

    fn global_avg_pool(&mut self, x: &Self::V) -> Result<Self::V> {
        owned(kernels::global_avg_pool(x), "global_avg_pool")
    }

    fn linear(&mut self, x: &Self::V, w: &Self::V, b: &Self::V) -> Result<Self::V> {
        owned(kernels::linear(x, w, b), "linear")
    }

    fn scale_channels(&mut self, x: &Self::V, gate: &Self::V) -> Result<Self::V> {
        owned(kernels::scale_channels(x, gate), "scale_channels")
    }

    fn channel_affine(&mut self, x: &Self::V, scale: &Self::V, shift: Option<&Self::V>) -> Result<Self::V> {
        owned(kernels::channel_affine(x, scale, shift.map(|s| s.as_ref())), "channel_affine")
    }

    fn slice_channels(&mut self, x: &Self::V, start: usize, len: usize) -> Result<Self::V> {
        Ok(Cow::Owned(kernels::slice_channels(x, start, len)?))
    }

    fn concat_channels(&mut self, parts: &[&Self::V]) -> Result<Self::V> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|p| p.as_ref()).collect();
        Ok(Cow::Owned(kernels::concat_channels(&refs)?))
    }

    fn attention(&mut self, q: &Self::V, k: &Self::V, v: &Self::V) -> Result<Self::V> {
        owned(kernels::attention_channel_major(q, k, v).map(|(o, _)| o), "attention")
    }

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        owned(kernels::add(a, b), "add")
    }

    fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }
}
