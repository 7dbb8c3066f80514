//! Block emitters: SCAM, SCAPE, parallel mixer, FFN, encoder block, head,
//! and the variant builder that strings them together.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::arch::config::{ModelConfig, ScamPlacement, StageConfig};
use crate::arch::graph::{Layer, LayerOp, ModuleGraph, Param, ValueId, INPUT};
use crate::error::Result;
use crate::tensor::kernels::BnMode;
use crate::tensor::{Element, Tensor};

/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;

/// Normal(0, std²) samples redrawn until they fall within ±2·std.
pub fn trunc_normal<T: Element, R: Rng + ?Sized>(shape: Vec<usize>, std: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::from_f64(z * std).unwrap();
        }
    })
}

/// Appends layers with default-initialized parameters.
pub struct GraphBuilder<T = f32> {
    layers: Vec<Layer<T>>,
    rng: ChaCha8Rng,
    layerscale_init: f64,
    bn_eps: f64,
    bn_momentum: f64,
}

impl<T: Element> GraphBuilder<T> {
    pub fn new(seed: u64) -> Self {
        GraphBuilder {
            layers: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            layerscale_init: 1e-5,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn with_norm(mut self, eps: f64, momentum: f64) -> Self {
        self.bn_eps = eps;
        self.bn_momentum = momentum;
        self
    }

    pub fn with_layerscale_init(mut self, v: f64) -> Self {
        self.layerscale_init = v;
        self
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Append a layer and return the id of its output value.
    pub fn push(&mut self, path: impl Into<String>, op: LayerOp, inputs: &[ValueId]) -> ValueId {
        let path = path.into();
        let ls = T::from_f64(self.layerscale_init).unwrap();
        let params = op
            .param_specs()
            .into_iter()
            .map(|s| {
                let tensor = match (&op, s.suffix) {
                    (
                        LayerOp::Conv2d { .. }
                        | LayerOp::DepthwiseConv2d { .. }
                        | LayerOp::Pointwise { .. }
                        | LayerOp::Linear { .. },
                        "weight",
                    ) => trunc_normal(s.shape.clone(), INIT_STD, &mut self.rng),
                    (LayerOp::LayerScale { .. }, _) => Tensor::full(s.shape.clone(), ls),
                    (_, "gamma" | "running_var" | "scale") => Tensor::full(s.shape.clone(), T::one()),
                    _ => Tensor::zeros(s.shape.clone()),
                };
                Param { name: format!("{path}.{}", s.suffix), tensor, learned: s.learned }
            })
            .collect();
        self.layers.push(Layer { path, op, inputs: inputs.to_vec(), params });
        self.layers.len()
    }

    pub fn batchnorm(&mut self, path: impl Into<String>, x: ValueId, channels: usize) -> ValueId {
        let op = LayerOp::BatchNorm { channels, eps: self.bn_eps, momentum: self.bn_momentum };
        self.push(path, op, &[x])
    }

    pub fn finish(self, name: impl Into<String>, in_channels: usize) -> Result<ModuleGraph<T>> {
        ModuleGraph::new(name, in_channels, self.layers, BnMode::Infer)
    }
}

/// Channel gate: `x ⊙ sigmoid(W_s·GAP(x) + b_s)`.
pub fn scam<T: Element>(b: &mut GraphBuilder<T>, path: &str, x: ValueId, channels: usize) -> ValueId {
    b.push(path, LayerOp::Scam { channels }, &[x])
}

/// Overlapping strided patch embedding followed by BN, with the channel gate
/// placed according to `placement`.
pub fn scape<T: Element>(
    b: &mut GraphBuilder<T>,
    path: &str,
    x: ValueId,
    in_ch: usize,
    stage: &StageConfig,
    placement: ScamPlacement,
) -> ValueId {
    let mut v = x;
    if placement == ScamPlacement::BeforePe {
        v = scam(b, &format!("{path}.scam"), v, in_ch);
    }
    let conv = LayerOp::Conv2d {
        in_ch,
        out_ch: stage.dim,
        kernel: stage.patch_kernel,
        stride: stage.patch_stride,
        padding: stage.patch_padding(),
    };
    v = b.push(format!("{path}.conv"), conv, &[v]);
    v = b.batchnorm(format!("{path}.norm"), v, stage.dim);
    if placement == ScamPlacement::AfterPe {
        v = scam(b, &format!("{path}.scam"), v, stage.dim);
    }
    v
}

/// Token mixer without its residual: pre-norm, input projection, attention on
/// `C_a` channels beside a GELU + depthwise branch on `C_c` channels, output
/// projection back to `C`.
pub fn parallel_mixer<T: Element>(b: &mut GraphBuilder<T>, path: &str, x: ValueId, s: &StageConfig) -> ValueId {
    let c = s.dim;
    let n = b.batchnorm(format!("{path}.norm"), x, c);
    let proj = b.push(format!("{path}.in_proj"), LayerOp::Pointwise { in_ch: c, out_ch: s.in_proj_dim() }, &[n]);
    let (cq, ca, cc) = (s.qk_dim, s.attn_dim, s.conv_dim);
    let attn = (ca > 0).then(|| {
        let q = b.push(format!("{path}.q"), LayerOp::SliceChannels { start: 0, len: cq }, &[proj]);
        let k = b.push(format!("{path}.k"), LayerOp::SliceChannels { start: cq, len: cq }, &[proj]);
        let va = b.push(format!("{path}.v_attn"), LayerOp::SliceChannels { start: 2 * cq, len: ca }, &[proj]);
        b.push(format!("{path}.attn"), LayerOp::Attention { qk_dim: cq, v_dim: ca }, &[q, k, va])
    });
    let vc = if attn.is_some() {
        b.push(format!("{path}.v_conv"), LayerOp::SliceChannels { start: 2 * cq + ca, len: cc }, &[proj])
    } else {
        proj
    };
    let g = b.push(format!("{path}.act"), LayerOp::Gelu, &[vc]);
    let pad = s.dw_kernel / 2;
    let dw = LayerOp::DepthwiseConv2d { channels: cc, kernel: s.dw_kernel, stride: 1, padding: pad };
    let vdw = b.push(format!("{path}.dwconv"), dw, &[g]);
    let fused = match attn {
        Some(a) => b.push(format!("{path}.cat"), LayerOp::ConcatChannels, &[a, vdw]),
        None => vdw,
    };
    b.push(format!("{path}.out_proj"), LayerOp::Pointwise { in_ch: ca + cc, out_ch: c }, &[fused])
}

/// BN → pointwise C→αC → GELU → pointwise αC→C.
pub fn ffn<T: Element>(b: &mut GraphBuilder<T>, path: &str, x: ValueId, s: &StageConfig) -> Result<ValueId> {
    let (c, h) = (s.dim, s.ffn_hidden()?);
    let n = b.batchnorm(format!("{path}.norm"), x, c);
    let f1 = b.push(format!("{path}.fc1"), LayerOp::Pointwise { in_ch: c, out_ch: h }, &[n]);
    let a = b.push(format!("{path}.act"), LayerOp::Gelu, &[f1]);
    Ok(b.push(format!("{path}.fc2"), LayerOp::Pointwise { in_ch: h, out_ch: c }, &[a]))
}

/// `x' = x + λ₁ ⊙ mixer(x)`, `x'' = x' + λ₂ ⊙ ffn(x')`.
pub fn encoder_block<T: Element>(b: &mut GraphBuilder<T>, path: &str, x: ValueId, s: &StageConfig) -> Result<ValueId> {
    let c = s.dim;
    let m = parallel_mixer(b, &format!("{path}.mixer"), x, s);
    let m = b.push(format!("{path}.mixer.layerscale"), LayerOp::LayerScale { channels: c }, &[m]);
    let x1 = b.push(format!("{path}.mixer.residual"), LayerOp::Add, &[x, m]);
    let f = ffn(b, &format!("{path}.ffn"), x1, s)?;
    let f = b.push(format!("{path}.ffn.layerscale"), LayerOp::LayerScale { channels: c }, &[f]);
    Ok(b.push(format!("{path}.ffn.residual"), LayerOp::Add, &[x1, f]))
}

/// GAP → linear C→hidden → GELU → linear hidden→classes.
pub fn classifier_head<T: Element>(
    b: &mut GraphBuilder<T>,
    path: &str,
    x: ValueId,
    channels: usize,
    hidden: usize,
    classes: usize,
) -> ValueId {
    let p = b.push(format!("{path}.pool"), LayerOp::GlobalAvgPool, &[x]);
    let h = b.push(format!("{path}.fc1"), LayerOp::Linear { in_features: channels, out_features: hidden }, &[p]);
    let a = b.push(format!("{path}.act"), LayerOp::Gelu, &[h]);
    b.push(format!("{path}.fc2"), LayerOp::Linear { in_features: hidden, out_features: classes }, &[a])
}

/// Elaborate a config into an initialized graph in inference mode.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModuleGraph<f32>> {
    build_model_as(config, seed)
}

/// [`build_model`] for any element type. Initial values are drawn in f64, so
/// the f32 and f64 builds of one seed agree up to rounding.
pub fn build_model_as<T: Element>(config: &ModelConfig, seed: u64) -> Result<ModuleGraph<T>> {
    config.validate()?;
    let mut b = GraphBuilder::<T>::new(seed)
        .with_norm(config.bn_eps, config.bn_momentum)
        .with_layerscale_init(config.layerscale_init);
    let mut x = INPUT;
    let mut cin = config.in_channels;
    for (i, s) in config.stages.iter().enumerate() {
        let stage = format!("stage{}", i + 1);
        x = scape(&mut b, &format!("{stage}.scape"), x, cin, s, config.scam_placement);
        for j in 0..s.blocks {
            x = encoder_block(&mut b, &format!("{stage}.block{j}"), x, s)?;
        }
        cin = s.dim;
    }
    classifier_head(&mut b, "head", x, cin, config.head_hidden, config.num_classes);
    b.finish(config.name.clone(), config.in_channels)
}
