//! Stage and model configurations, including the T/S/M/L presets.

use serde::{Deserialize, Serialize};

use crate::arch::Ratio;
use crate::error::{Error, Result};

/// Widest query/key projection the mixer uses.
pub const MAX_QK_DIM: usize = 32;

/// One pyramid stage: a patch embedding followed by `blocks` encoder blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// Patch-embedding kernel, always `2·stride − 1`.
    pub patch_kernel: usize,
    pub patch_stride: usize,
    pub dim: usize,
    /// Fraction of channels routed to attention.
    pub ratio: Ratio,
    pub attn_dim: usize,
    pub conv_dim: usize,
    pub qk_dim: usize,
    pub ffn_ratio: Ratio,
    pub blocks: usize,
    pub dw_kernel: usize,
}

impl StageConfig {
    /// Stage with the standard derived widths: `C_a = round(r·C)`,
    /// `C_c = 2·(C − C_a)`, query/key width 32 when attention is present,
    /// FFN ratio 2 and a 3×3 depthwise kernel.
    pub fn new(patch_stride: usize, dim: usize, ratio: Ratio, blocks: usize) -> Self {
        let mut s = StageConfig {
            patch_kernel: 2 * patch_stride - 1,
            patch_stride,
            dim,
            ratio,
            attn_dim: 0,
            conv_dim: 0,
            qk_dim: 0,
            ffn_ratio: Ratio::integer(2),
            blocks,
            dw_kernel: 3,
        };
        s.set_ratio(ratio);
        s
    }

    /// Change the mixer ratio and recompute the derived branch widths.
    pub fn set_ratio(&mut self, ratio: Ratio) {
        self.ratio = ratio;
        self.attn_dim = ratio.scale_round(self.dim);
        self.conv_dim = 2 * (self.dim - self.attn_dim.min(self.dim));
        self.qk_dim = if ratio.is_zero() { 0 } else { MAX_QK_DIM };
    }

    pub fn with_qk_dim(mut self, qk: usize) -> Self {
        if !self.ratio.is_zero() {
            self.qk_dim = qk;
        }
        self
    }

    pub fn patch_padding(&self) -> usize {
        self.patch_stride - 1
    }

    /// Width of the mixer input projection: `C_q + C_k + C_a + C_c`.
    pub fn in_proj_dim(&self) -> usize {
        2 * self.qk_dim + self.attn_dim + self.conv_dim
    }

    pub fn ffn_hidden(&self) -> Result<usize> {
        self.ffn_ratio
            .scale_exact(self.dim)
            .ok_or_else(|| Error::Config(format!("ffn ratio {} · {} is not an integer", self.ffn_ratio, self.dim)))
    }

    pub fn validate(&self, index: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("stage {}: {msg}", index + 1)));
        if self.patch_stride == 0 || self.patch_kernel != 2 * self.patch_stride - 1 {
            return fail(format!(
                "patch kernel {} must equal 2·stride − 1 for stride {}",
                self.patch_kernel, self.patch_stride
            ));
        }
        if self.dim == 0 {
            return fail("dim must be positive".into());
        }
        if self.ratio.num() > self.ratio.den() {
            return fail(format!("ratio {} outside [0, 1]", self.ratio));
        }
        let want_attn = self.ratio.scale_round(self.dim);
        if self.attn_dim != want_attn {
            return fail(format!("attn_dim {} != round({}·{}) = {want_attn}", self.attn_dim, self.ratio, self.dim));
        }
        let want_conv = 2 * (self.dim - self.attn_dim);
        if self.conv_dim != want_conv {
            return fail(format!("conv_dim {} != 2·(C − C_a) = {want_conv}", self.conv_dim));
        }
        if self.ratio.is_zero() {
            if self.qk_dim != 0 {
                return fail("qk_dim must be 0 when ratio is 0".into());
            }
        } else if self.qk_dim == 0 || self.qk_dim > MAX_QK_DIM {
            return fail(format!("qk_dim {} must be in 1..={MAX_QK_DIM} when ratio > 0", self.qk_dim));
        }
        if self.ffn_ratio.is_zero() {
            return fail("ffn ratio must be positive".into());
        }
        self.ffn_hidden()?;
        if self.dw_kernel == 0 || self.dw_kernel.is_multiple_of(2) {
            return fail(format!("depthwise kernel {} must be odd", self.dw_kernel));
        }
        Ok(())
    }
}

/// Where the channel-attention gate sits relative to the patch embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScamPlacement {
    BeforePe,
    AfterPe,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub in_channels: usize,
    pub stages: Vec<StageConfig>,
    pub head_hidden: usize,
    pub num_classes: usize,
    pub layerscale_init: f64,
    pub scam_placement: ScamPlacement,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// Square input resolution the model is described at.
    pub input_size: usize,
}

impl ModelConfig {
    fn pyramid(name: &str, dims: [usize; 4], blocks: [usize; 4], ratios: [Ratio; 4]) -> Self {
        let stages = (0..4)
            .map(|i| StageConfig::new(if i == 0 { 4 } else { 2 }, dims[i], ratios[i], blocks[i]))
            .collect();
        ModelConfig {
            name: name.to_string(),
            in_channels: 3,
            stages,
            head_hidden: 1280,
            num_classes: 1000,
            layerscale_init: 1e-5,
            scam_placement: ScamPlacement::AfterPe,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            input_size: 224,
        }
    }

    /// Preset by name: `T`, `S`, `M`, `L` or `micro` (case-insensitive).
    pub fn variant(name: &str) -> Result<Self> {
        let z = Ratio::ZERO;
        let q = Ratio::new(1, 4).unwrap();
        Ok(match name.to_ascii_uppercase().as_str() {
            "T" => Self::pyramid("T", [48, 96, 192, 384], [1, 2, 7, 2], [z, z, z, q]),
            "S" => Self::pyramid("S", [64, 128, 256, 512], [1, 2, 7, 2], [z, z, q, q]),
            "M" => Self::pyramid("M", [96, 192, 384, 768], [1, 2, 7, 2], [z, z, q, q]),
            "L" => Self::pyramid("L", [112, 224, 448, 896], [2, 4, 9, 3], [z, z, q, q]),
            "MICRO" => Self::micro(),
            _ => return Err(Error::UnknownVariant(name.to_string())),
        })
    }

    /// Desk-scale model for training experiments on 32×32 inputs.
    pub fn micro() -> Self {
        let z = Ratio::ZERO;
        let mut c = Self::pyramid("micro", [8, 16, 32, 64], [1, 1, 2, 1], [z, z, z, Ratio::new(1, 4).unwrap()]);
        c.stages[3] = c.stages[3].clone().with_qk_dim(16);
        c.num_classes = 4;
        c.input_size = 32;
        c
    }

    /// Smallest preset, sized for an exhaustive finite-difference check
    /// (under 50k parameters).
    pub fn micro_gradcheck() -> Self {
        let z = Ratio::ZERO;
        let mut c = Self::pyramid("micro-gc", [4, 8, 16, 32], [1, 1, 2, 1], [z, z, z, Ratio::new(1, 4).unwrap()]);
        c.stages[3] = c.stages[3].clone().with_qk_dim(8);
        c.head_hidden = 32;
        c.num_classes = 4;
        c.input_size = 64;
        c.layerscale_init = 0.5;
        c
    }

    /// Replace the per-stage mixer ratios (the ablation "PM ratio" tuple).
    pub fn with_pm_ratios(mut self, ratios: &[Ratio]) -> Result<Self> {
        if ratios.len() != self.stages.len() {
            return Err(Error::Config(format!("{} ratios for {} stages", ratios.len(), self.stages.len())));
        }
        for (s, &r) in self.stages.iter_mut().zip(ratios) {
            s.set_ratio(r);
        }
        self.name = format!(
            "{}[{}]",
            self.name,
            ratios.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(",")
        );
        Ok(self)
    }

    pub fn with_scam_placement(mut self, p: ScamPlacement) -> Self {
        self.scam_placement = p;
        self
    }

    /// Keep only the first `n` stages.
    pub fn truncated(mut self, n: usize) -> Self {
        self.stages.truncate(n);
        self
    }

    pub fn with_num_classes(mut self, k: usize) -> Self {
        self.num_classes = k;
        self
    }

    pub fn dims(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.dim).collect()
    }

    pub fn blocks(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.blocks).collect()
    }

    pub fn ratios(&self) -> Vec<Ratio> {
        self.stages.iter().map(|s| s.ratio).collect()
    }

    /// Total spatial reduction after stage `i` (0-based).
    pub fn reduction(&self, i: usize) -> usize {
        self.stages[..=i].iter().map(|s| s.patch_stride).product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.stages.len() > 4 {
            return Err(Error::Config(format!("expected 1 to 4 stages, got {}", self.stages.len())));
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.head_hidden == 0 {
            return Err(Error::Config("in_channels, head_hidden and num_classes must be positive".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.validate(i)?;
            let want = if i == 0 { 4 } else { 2 };
            if s.patch_stride != want {
                return Err(Error::Config(format!(
                    "stage {}: patch stride {} breaks the 4/8/16/32 pyramid (want {want})",
                    i + 1,
                    s.patch_stride
                )));
            }
        }
        if self.stages.windows(2).any(|w| w[1].dim < w[0].dim) {
            return Err(Error::Config(format!("stage dims must be nondecreasing: {:?}", self.dims())));
        }
        if !(self.layerscale_init.is_finite() && self.layerscale_init >= 0.0) {
            return Err(Error::Config("layerscale_init must be finite and non-negative".into()));
        }
        if self.bn_eps.is_nan() || self.bn_eps <= 0.0 || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_eps must be positive and bn_momentum in [0, 1]".into()));
        }
        Ok(())
    }
}
