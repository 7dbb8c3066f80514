//! Elaborated model: an ordered list of layers in execution order.
//!
//! Values are numbered: `0` is the graph input and `i + 1` is the output of
//! layer `i`. Every layer reads earlier values only, so the list order is a
//! topological order and the interpreter, the analysis walks and BN folding
//! all traverse it front to back.

use std::collections::{BTreeMap, HashSet};

use crate::error::{Error, Result};
use crate::tensor::exec::{BnArgs, BnUpdate, Eval, Exec, ParamId};
use crate::tensor::kernels::BnMode;
use crate::tensor::{Element, Tensor};

pub type ValueId = usize;

/// Value id of the graph input.
pub const INPUT: ValueId = 0;

#[derive(Clone, Debug, PartialEq)]
pub enum LayerOp {
    Conv2d { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize },
    DepthwiseConv2d { channels: usize, kernel: usize, stride: usize, padding: usize },
    Pointwise { in_ch: usize, out_ch: usize },
    Linear { in_features: usize, out_features: usize },
    BatchNorm { channels: usize, eps: f64, momentum: f64 },
    /// Per-channel `x·scale + shift`, what a BN becomes when nothing absorbs it.
    ChannelAffine { channels: usize },
    /// GAP → dense C×C → sigmoid gate → channel rescale.
    Scam { channels: usize },
    /// Learned per-channel residual scale.
    LayerScale { channels: usize },
    Gelu,
    SliceChannels { start: usize, len: usize },
    ConcatChannels,
    /// Inputs: query, key, value.
    Attention { qk_dim: usize, v_dim: usize },
    Add,
    GlobalAvgPool,
}

/// Shape and trainability of one parameter slot.
#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub suffix: &'static str,
    pub shape: Vec<usize>,
    pub learned: bool,
}

fn spec(suffix: &'static str, shape: Vec<usize>) -> ParamSpec {
    ParamSpec { suffix, shape, learned: true }
}

impl LayerOp {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerOp::Conv2d { .. } => "conv2d",
            LayerOp::DepthwiseConv2d { .. } => "dwconv2d",
            LayerOp::Pointwise { .. } => "pointwise",
            LayerOp::Linear { .. } => "linear",
            LayerOp::BatchNorm { .. } => "batchnorm",
            LayerOp::ChannelAffine { .. } => "affine",
            LayerOp::Scam { .. } => "scam",
            LayerOp::LayerScale { .. } => "layerscale",
            LayerOp::Gelu => "gelu",
            LayerOp::SliceChannels { .. } => "slice",
            LayerOp::ConcatChannels => "concat",
            LayerOp::Attention { .. } => "attention",
            LayerOp::Add => "add",
            LayerOp::GlobalAvgPool => "gap",
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        match *self {
            LayerOp::Conv2d { in_ch, out_ch, kernel, .. } => {
                vec![spec("weight", vec![out_ch, in_ch, kernel, kernel]), spec("bias", vec![out_ch])]
            }
            LayerOp::DepthwiseConv2d { channels, kernel, .. } => {
                vec![spec("weight", vec![channels, 1, kernel, kernel]), spec("bias", vec![channels])]
            }
            LayerOp::Pointwise { in_ch, out_ch } => vec![spec("weight", vec![out_ch, in_ch]), spec("bias", vec![out_ch])],
            LayerOp::Linear { in_features, out_features } => {
                vec![spec("weight", vec![out_features, in_features]), spec("bias", vec![out_features])]
            }
            LayerOp::BatchNorm { channels, .. } => vec![
                spec("gamma", vec![channels]),
                spec("beta", vec![channels]),
                ParamSpec { suffix: "running_mean", shape: vec![channels], learned: false },
                ParamSpec { suffix: "running_var", shape: vec![channels], learned: false },
            ],
            LayerOp::ChannelAffine { channels } => vec![spec("scale", vec![channels]), spec("shift", vec![channels])],
            LayerOp::Scam { channels } => vec![spec("weight", vec![channels, channels]), spec("bias", vec![channels])],
            LayerOp::LayerScale { channels } => vec![spec("scale", vec![channels])],
            _ => vec![],
        }
    }

    pub fn arity(&self) -> Option<usize> {
        match self {
            LayerOp::ConcatChannels => None,
            LayerOp::Attention { .. } => Some(3),
            LayerOp::Add => Some(2),
            _ => Some(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub learned: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub path: String,
    pub op: LayerOp,
    pub inputs: Vec<ValueId>,
    pub params: Vec<Param<T>>,
}

impl<T: Element> Layer<T> {
    pub fn param(&self, suffix: &str) -> Option<&Tensor<T>> {
        let name = format!("{}.{suffix}", self.path);
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModuleGraph<T = f32> {
    name: String,
    in_channels: usize,
    layers: Vec<Layer<T>>,
    mode: BnMode,
}

impl<T: Element> ModuleGraph<T> {
    /// Assemble a graph, checking wiring, parameter shapes and name uniqueness.
    pub fn new(name: impl Into<String>, in_channels: usize, layers: Vec<Layer<T>>, mode: BnMode) -> Result<Self> {
        let mut names = HashSet::new();
        for (i, l) in layers.iter().enumerate() {
            if l.inputs.iter().any(|&v| v > i) {
                return Err(Error::Config(format!("layer {} ({}) reads a later value", i, l.path)));
            }
            if let Some(a) = l.op.arity() {
                if l.inputs.len() != a {
                    return Err(Error::Config(format!("layer {} expects {a} inputs, has {}", l.path, l.inputs.len())));
                }
            } else if l.inputs.is_empty() {
                return Err(Error::Config(format!("layer {} has no inputs", l.path)));
            }
            let specs = l.op.param_specs();
            if specs.len() != l.params.len() {
                return Err(Error::Config(format!("layer {} has {} params, wants {}", l.path, l.params.len(), specs.len())));
            }
            for (s, p) in specs.iter().zip(&l.params) {
                if p.tensor.shape() != s.shape.as_slice() || p.name != format!("{}.{}", l.path, s.suffix) {
                    return Err(Error::Config(format!(
                        "param {} {:?} does not match slot {}.{} {:?}",
                        p.name,
                        p.tensor.shape(),
                        l.path,
                        s.suffix,
                        s.shape
                    )));
                }
                if !names.insert(p.name.clone()) {
                    return Err(Error::Config(format!("duplicate parameter name {}", p.name)));
                }
            }
        }
        if layers.is_empty() {
            return Err(Error::Config("graph has no layers".into()));
        }
        Ok(ModuleGraph { name: name.into(), in_channels, layers, mode })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        self.mode = mode;
    }

    pub fn count_kind(&self, kind: &str) -> usize {
        self.layers.iter().filter(|l| l.op.kind() == kind).count()
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.layers.iter().enumerate().flat_map(|(layer, l)| {
            l.params.iter().enumerate().map(move |(slot, p)| (ParamId { layer, slot }, p))
        })
    }

    pub fn param_by_id(&self, id: ParamId) -> &Param<T> {
        &self.layers[id.layer].params[id.slot]
    }

    pub fn param_by_id_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.layers[id.layer].params[id.slot]
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params().find(|(_, p)| p.name == name).map(|(_, p)| &p.tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params.iter_mut())
            .find(|p| p.name == name)
            .map(|p| &mut p.tensor)
    }

    /// Overwrite a parameter, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .param_mut(name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape("set_param", format!("{name}: {:?} vs {:?}", slot.shape(), value.shape())));
        }
        *slot = value;
        Ok(())
    }

    /// Every stored tensor by name, learned parameters and running statistics.
    pub fn named_tensors(&self) -> BTreeMap<String, &Tensor<T>> {
        self.params().map(|(_, p)| (p.name.clone(), &p.tensor)).collect()
    }

    /// Replace stored tensors from a name → tensor map; every slot must be present.
    pub fn load_named(&mut self, tensors: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        let known: HashSet<String> = self.params().map(|(_, p)| p.name.clone()).collect();
        if let Some(extra) = tensors.keys().find(|k| !known.contains(*k)) {
            return Err(Error::Checkpoint(format!("tensor {extra} has no slot in graph {}", self.name)));
        }
        for p in self.layers.iter_mut().flat_map(|l| l.params.iter_mut()) {
            let t = tensors
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", p.name)))?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::Checkpoint(format!("{}: shape {:?}, graph wants {:?}", p.name, t.shape(), p.tensor.shape())));
            }
            p.tensor = t.clone();
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ModuleGraph<U> {
        ModuleGraph {
            name: self.name.clone(),
            in_channels: self.in_channels,
            mode: self.mode,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    path: l.path.clone(),
                    op: l.op.clone(),
                    inputs: l.inputs.clone(),
                    params: l
                        .params
                        .iter()
                        .map(|p| Param { name: p.name.clone(), tensor: p.tensor.cast(), learned: p.learned })
                        .collect(),
                })
                .collect(),
        }
    }

    /// Write running statistics produced by a train-mode forward pass.
    pub fn apply_bn_updates(&mut self, updates: Vec<BnUpdate<T>>) {
        for u in updates {
            let l = &mut self.layers[u.layer];
            l.params[2].tensor = u.running_mean;
            l.params[3].tensor = u.running_var;
        }
    }

    /// Index of the last layer of each top-level path prefix (`stage1`,
    /// `stage2`, …, `head`), in order of appearance.
    pub fn section_outputs(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let head = l.path.split('.').next().unwrap_or("").to_string();
            match out.last_mut() {
                Some((name, idx)) if *name == head => *idx = i,
                _ => out.push((head, i)),
            }
        }
        out
    }

    /// Index of the last layer reading each value (`None` if never read).
    fn last_uses(&self) -> Vec<Option<usize>> {
        let mut last = vec![None; self.layers.len() + 1];
        for (i, l) in self.layers.iter().enumerate() {
            for &v in &l.inputs {
                last[v] = Some(i);
            }
        }
        last
    }

    /// Run the graph on an executor. `observe` sees every layer output.
    pub fn forward_observed<'g, E, F>(&'g self, e: &mut E, input: E::V, mut observe: F) -> Result<E::V>
    where
        E: Exec<'g, T>,
        F: FnMut(usize, &Tensor<T>),
    {
        let last = self.last_uses();
        let n = self.layers.len();
        let mut values: Vec<Option<E::V>> = (0..=n).map(|_| None).collect();
        values[INPUT] = Some(input);
        for (i, layer) in self.layers.iter().enumerate() {
            let out = {
                let args: Vec<&E::V> = layer
                    .inputs
                    .iter()
                    .map(|&v| values[v].as_ref().expect("value freed before last use"))
                    .collect();
                self.exec_layer(e, i, layer, &args)?
            };
            observe(i, e.value(&out));
            values[i + 1] = Some(out);
            for &v in &layer.inputs {
                if last[v] == Some(i) && v != n {
                    values[v] = None;
                }
            }
        }
        Ok(values[n].take().unwrap())
    }

    pub fn forward<'g, E: Exec<'g, T>>(&'g self, e: &mut E, input: E::V) -> Result<E::V> {
        self.forward_observed(e, input, |_, _| {})
    }

    /// Plain evaluation with no recording; returns the final output.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut e = Eval::new();
        let out = self.forward(&mut e, std::borrow::Cow::Owned(x.clone()))?;
        Ok(out.into_owned())
    }

    fn exec_layer<'g, E: Exec<'g, T>>(&'g self, e: &mut E, i: usize, layer: &'g Layer<T>, x: &[&E::V]) -> Result<E::V> {
        let p = |e: &mut E, slot: usize| e.param(ParamId { layer: i, slot }, &layer.params[slot].tensor);
        match layer.op {
            LayerOp::Conv2d { stride, padding, .. } => {
                let (w, b) = (p(e, 0), p(e, 1));
                e.conv2d(x[0], &w, &b, stride, padding)
            }
            LayerOp::DepthwiseConv2d { stride, padding, .. } => {
                let (w, b) = (p(e, 0), p(e, 1));
                e.depthwise_conv2d(x[0], &w, &b, stride, padding)
            }
            LayerOp::Pointwise { .. } => {
                let (w, b) = (p(e, 0), p(e, 1));
                e.pointwise(x[0], &w, &b)
            }
            LayerOp::Linear { .. } => {
                let (w, b) = (p(e, 0), p(e, 1));
                e.linear(x[0], &w, &b)
            }
            LayerOp::BatchNorm { eps, momentum, .. } => {
                let (g, b) = (p(e, 0), p(e, 1));
                let args = BnArgs {
                    running_mean: &layer.params[2].tensor,
                    running_var: &layer.params[3].tensor,
                    eps,
                    momentum,
                    mode: self.mode,
                    layer: i,
                };
                e.batchnorm(x[0], &g, &b, args)
            }
            LayerOp::ChannelAffine { .. } => {
                let (s, t) = (p(e, 0), p(e, 1));
                e.channel_affine(x[0], &s, Some(&t))
            }
            LayerOp::Scam { .. } => {
                let (w, b) = (p(e, 0), p(e, 1));
                let pooled = e.global_avg_pool(x[0])?;
                let z = e.linear(&pooled, &w, &b)?;
                let gate = e.sigmoid(&z)?;
                e.scale_channels(x[0], &gate)
            }
            LayerOp::LayerScale { .. } => {
                let s = p(e, 0);
                e.channel_affine(x[0], &s, None)
            }
            LayerOp::Gelu => e.gelu(x[0]),
            LayerOp::SliceChannels { start, len } => e.slice_channels(x[0], start, len),
            LayerOp::ConcatChannels => e.concat_channels(x),
            LayerOp::Attention { .. } => e.attention(x[0], x[1], x[2]),
            LayerOp::Add => e.add(x[0], x[1]),
            LayerOp::GlobalAvgPool => e.global_avg_pool(x[0]),
        }
    }
}
