//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in execution order, so the tape is already a
//! topological order; [`Tape::backward`] walks it once in reverse. A tape is
//! single-use: after `backward` the trace is consumed.

use crate::error::{Error, Result};
use crate::tensor::exec::{BnArgs, BnUpdate, Exec, ParamId};
use crate::tensor::kernels::{self, activation, attention, conv, dense, norm, BnMode};
use crate::tensor::{Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Depthwise { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Pointwise { x: Var, w: Var, b: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T>, mode: BnMode },
    Gelu { x: Var },
    Sigmoid { x: Var },
    Softmax { x: Var },
    Gap { x: Var },
    Linear { x: Var, w: Var, b: Var },
    Matmul { a: Var, b: Var },
    ScaleChannels { x: Var, g: Var },
    ChannelAffine { x: Var, scale: Var, shift: Option<Var> },
    Slice { x: Var, start: usize },
    Concat { parts: Vec<Var> },
    Attention { q: Var, k: Var, v: Var, probs: Tensor<T> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Sum { x: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
    grad: Option<Tensor<T>>,
}

#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false, bn_updates: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf value.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_node(value, Op::Leaf, requires_grad, None)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by [`Tape::backward`], if `v` required one.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradients of every parameter leaf, in recording order.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.nodes
            .iter()
            .filter_map(|n| Some((n.param?, n.grad.as_ref()?)))
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node { value, op, requires_grad, param, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &'static str) -> Result<Var> {
        let value = value.check_finite(name)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_node(value, op, rg, None))
    }

    fn v(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let y = kernels::softmax_lastdim(self.v(x))?;
        self.push(y, Op::Softmax { x }, &[x], "softmax")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = dense::matmul(self.v(a), self.v(b))?;
        self.push(y, Op::Matmul { a, b }, &[a, b], "matmul")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = dense::mul(self.v(a), self.v(b))?;
        self.push(y, Op::Mul { a, b }, &[a, b], "mul")
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.v(x).sum());
        self.push(y, Op::Sum { x }, &[x], "sum")
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = dense::cross_entropy(self.v(logits), labels)?;
        self.push(loss, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, &[logits], "cross_entropy")
    }

    /// Back-propagate from a scalar `loss`, filling the gradient of every node
    /// that requires one. Consumes the trace.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TraceConsumed);
        }
        if self.v(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.v(loss).shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.v(loss).shape().to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            for (input, dg) in self.vjp(i, &op, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.data_mut().iter_mut().zip(dg.data()).for_each(|(a, &d)| *a += d),
                    slot @ None => *slot = Some(dg),
                }
            }
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for each of its inputs.
    fn vjp(&self, i: usize, op: &Op<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let y = &self.nodes[i].value;
        Ok(match op {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = conv::conv2d_backward(self.v(*x), self.v(*w), g, *stride, *pad)?;
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::Depthwise { x, w, b, stride, pad } => {
                let (dx, dw, db) = conv::depthwise_conv2d_backward(self.v(*x), self.v(*w), g, *stride, *pad)?;
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::Pointwise { x, w, b } => {
                let (dx, dw, db) = conv::pointwise_backward(self.v(*x), self.v(*w), g)?;
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, mode } => {
                let (dx, dgm, dbt) = norm::batchnorm_backward(self.v(*x), self.v(*gamma), mean, inv_std, g, *mode)?;
                vec![(*x, dx), (*gamma, dgm), (*beta, dbt)]
            }
            Op::Gelu { x } => vec![(*x, activation::gelu_backward(self.v(*x), g))],
            Op::Sigmoid { x } => vec![(*x, activation::sigmoid_backward(y, g))],
            Op::Softmax { x } => vec![(*x, activation::softmax_lastdim_backward(y, g))],
            Op::Gap { x } => vec![(*x, dense::global_avg_pool_backward(self.v(*x).shape(), g)?)],
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = dense::linear_backward(self.v(*x), self.v(*w), g)?;
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::Matmul { a, b } => {
                let (da, db) = dense::matmul_backward(self.v(*a), self.v(*b), g)?;
                vec![(*a, da), (*b, db)]
            }
            Op::ScaleChannels { x, g: gate } => {
                let (dx, dg) = dense::scale_channels_backward(self.v(*x), self.v(*gate), g)?;
                vec![(*x, dx), (*gate, dg)]
            }
            Op::ChannelAffine { x, scale, shift } => {
                let (dx, ds, dt) = dense::channel_affine_backward(self.v(*x), self.v(*scale), g)?;
                let mut out = vec![(*x, dx), (*scale, ds)];
                if let Some(t) = shift {
                    out.push((*t, dt));
                }
                out
            }
            Op::Slice { x, start } => vec![(*x, dense::slice_channels_backward(self.v(*x).shape(), *start, g)?)],
            Op::Concat { parts } => {
                let mut start = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let c = self.v(*p).shape()[1];
                    out.push((*p, dense::slice_channels(g, start, c)?));
                    start += c;
                }
                out
            }
            Op::Attention { q, k, v, probs } => {
                let (dq, dk, dv) =
                    attention::attention_channel_major_backward(self.v(*q), self.v(*k), self.v(*v), probs, g)?;
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul { a, b } => vec![(*a, dense::mul(g, self.v(*b))?), (*b, dense::mul(g, self.v(*a))?)],
            Op::Sum { x } => vec![(*x, Tensor::full(self.v(*x).shape().to_vec(), g.item()))],
            Op::CrossEntropy { logits, labels, probs } => {
                vec![(*logits, dense::cross_entropy_backward(probs, labels, g.item()))]
            }
        })
    }
}

impl<'g, T: Element> Exec<'g, T> for Tape<T> {
    type V = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }

    fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    fn param(&mut self, id: ParamId, t: &'g Tensor<T>) -> Var {
        self.push_node(t.clone(), Op::Leaf, true, Some(id))
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: &Var, stride: usize, pad: usize) -> Result<Var> {
        let y = conv::conv2d(self.v(*x), self.v(*w), self.v(*b), stride, pad)?;
        self.push(y, Op::Conv2d { x: *x, w: *w, b: *b, stride, pad }, &[*x, *w, *b], "conv2d")
    }

    fn depthwise_conv2d(&mut self, x: &Var, w: &Var, b: &Var, stride: usize, pad: usize) -> Result<Var> {
        let y = conv::depthwise_conv2d(self.v(*x), self.v(*w), self.v(*b), stride, pad)?;
        self.push(y, Op::Depthwise { x: *x, w: *w, b: *b, stride, pad }, &[*x, *w, *b], "depthwise_conv2d")
    }

    fn pointwise(&mut self, x: &Var, w: &Var, b: &Var) -> Result<Var> {
        let y = conv::pointwise(self.v(*x), self.v(*w), self.v(*b))?;
        self.push(y, Op::Pointwise { x: *x, w: *w, b: *b }, &[*x, *w, *b], "pointwise")
    }

    fn batchnorm(&mut self, x: &Var, gamma: &Var, beta: &Var, a: BnArgs<'g, T>) -> Result<Var> {
        let (y, mean, inv_std) = match a.mode {
            BnMode::Infer => {
                let y = norm::batchnorm_infer(self.v(*x), self.v(*gamma), self.v(*beta), a.running_mean, a.running_var, a.eps)?;
                let eps = T::from_f64(a.eps).unwrap();
                let inv = a.running_var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (y, a.running_mean.data().to_vec(), inv)
            }
            BnMode::Train => {
                let (y, s) = norm::batchnorm_train(
                    self.v(*x),
                    self.v(*gamma),
                    self.v(*beta),
                    a.running_mean,
                    a.running_var,
                    a.eps,
                    a.momentum,
                )?;
                self.bn_updates.push(BnUpdate {
                    layer: a.layer,
                    running_mean: s.running_mean,
                    running_var: s.running_var,
                });
                (y, s.mean, s.inv_std)
            }
        };
        let op = Op::BatchNorm { x: *x, gamma: *gamma, beta: *beta, mean, inv_std, mode: a.mode };
        self.push(y, op, &[*x, *gamma, *beta], "batchnorm")
    }

    fn gelu(&mut self, x: &Var) -> Result<Var> {
        let y = kernels::gelu(self.v(*x));
        self.push(y, Op::Gelu { x: *x }, &[*x], "gelu")
    }

    fn sigmoid(&mut self, x: &Var) -> Result<Var> {
        let y = kernels::sigmoid(self.v(*x));
        self.push(y, Op::Sigmoid { x: *x }, &[*x], "sigmoid")
    }

    fn global_avg_pool(&mut self, x: &Var) -> Result<Var> {
        let y = dense::global_avg_pool(self.v(*x))?;
        self.push(y, Op::Gap { x: *x }, &[*x], "global_avg_pool")
    }

    fn linear(&mut self, x: &Var, w: &Var, b: &Var) -> Result<Var> {
        let y = dense::linear(self.v(*x), self.v(*w), self.v(*b))?;
        self.push(y, Op::Linear { x: *x, w: *w, b: *b }, &[*x, *w, *b], "linear")
    }

    fn scale_channels(&mut self, x: &Var, gate: &Var) -> Result<Var> {
        let y = dense::scale_channels(self.v(*x), self.v(*gate))?;
        self.push(y, Op::ScaleChannels { x: *x, g: *gate }, &[*x, *gate], "scale_channels")
    }

    fn channel_affine(&mut self, x: &Var, scale: &Var, shift: Option<&Var>) -> Result<Var> {
        let y = dense::channel_affine(self.v(*x), self.v(*scale), shift.map(|s| self.v(*s)))?;
        let mut inputs = vec![*x, *scale];
        inputs.extend(shift.copied());
        self.push(y, Op::ChannelAffine { x: *x, scale: *scale, shift: shift.copied() }, &inputs, "channel_affine")
    }

    fn slice_channels(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        let y = dense::slice_channels(self.v(*x), start, len)?;
        self.push(y, Op::Slice { x: *x, start }, &[*x], "slice_channels")
    }

    fn concat_channels(&mut self, parts: &[&Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|p| self.v(**p)).collect();
        let y = dense::concat_channels(&vals)?;
        let parts: Vec<Var> = parts.iter().map(|p| **p).collect();
        let inputs = parts.clone();
        self.push(y, Op::Concat { parts }, &inputs, "concat_channels")
    }

    fn attention(&mut self, q: &Var, k: &Var, v: &Var) -> Result<Var> {
        let (y, probs) = attention::attention_channel_major(self.v(*q), self.v(*k), self.v(*v))?;
        self.push(y, Op::Attention { q: *q, k: *k, v: *v, probs }, &[*q, *k, *v], "attention")
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = dense::add(self.v(*a), self.v(*b))?;
        self.push(y, Op::Add { a: *a, b: *b }, &[*a, *b], "add")
    }

    fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }
}
