//! Building blocks and full-model elaboration.

mod common;

use std::borrow::Cow;

use common::*;
use parformer::analysis::infer_shapes;
use parformer::arch::{
    build_model_as, classifier_head, encoder_block, ffn, parallel_mixer, scam, scape, GraphBuilder, LayerOp,
    ModelConfig, ModuleGraph, Ratio, ScamPlacement, StageConfig, INPUT,
};
use parformer::tensor::exec::Eval;
use parformer::tensor::kernels::{self, dense, norm};
use parformer::{build_model, Error, Tensor};

fn one_block<F>(cin: usize, seed: u64, f: F) -> ModuleGraph<f64>
where
    F: FnOnce(&mut GraphBuilder<f64>),
{
    let mut b = GraphBuilder::<f64>::new(seed);
    f(&mut b);
    b.finish("t", cin).unwrap()
}

fn layer<'a>(g: &'a ModuleGraph<f64>, path: &str) -> &'a LayerOp {
    &g.layers().iter().find(|l| l.path == path).unwrap_or_else(|| panic!("no layer {path}")).op
}

fn q() -> Ratio {
    Ratio::new(1, 4).unwrap()
}

#[test]
fn scam_zero_weights_halve_input() {
    let g = one_block(3, 0, |b| {
        scam(b, "g", INPUT, 3);
    });
    let x = randn::<f64>(&[2, 3, 4, 4], 1);
    assert_eq!(g.infer(&x).unwrap(), x.map(|v| 0.5 * v));
}

#[test]
fn scam_large_bias_saturates_to_identity() {
    let mut g = one_block(3, 0, |b| {
        scam(b, "g", INPUT, 3);
    });
    g.set_param("g.bias", Tensor::full(vec![3], 100.0)).unwrap();
    let x = randn::<f64>(&[2, 3, 4, 4], 2);
    assert!(g.infer(&x).unwrap().max_abs_diff(&x) < 1e-12);
}

#[test]
fn scam_matches_per_channel_scalar_oracle() {
    let c = 4;
    let mut g = one_block(c, 0, |b| {
        scam(b, "g", INPUT, c);
    });
    let w = randn::<f64>(&[c, c], 3);
    let bias = randn::<f64>(&[c], 4);
    g.set_param("g.weight", w.clone()).unwrap();
    g.set_param("g.bias", bias.clone()).unwrap();
    let x = randn::<f64>(&[2, c, 5, 5], 5);
    let y = g.cast::<f32>().infer(&x.cast()).unwrap().cast::<f64>();
    for n in 0..2 {
        let mean: Vec<f64> = (0..c).map(|ch| x.data()[(n * c + ch) * 25..(n * c + ch + 1) * 25].iter().sum::<f64>() / 25.0).collect();
        for o in 0..c {
            let z = bias.data()[o] + (0..c).map(|i| w.data()[o * c + i] * mean[i]).sum::<f64>();
            let gate = sigmoid_ref(z);
            for p in 0..25 {
                let i = (n * c + o) * 25 + p;
                assert!((y.data()[i] - gate * x.data()[i]).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn scape_shapes_for_first_two_stages_of_t() {
    let t = ModelConfig::variant("T").unwrap();
    let g = one_block(3, 0, |b| {
        let v = scape(b, "s1", INPUT, 3, &t.stages[0], ScamPlacement::AfterPe);
        scape(b, "s2", v, 48, &t.stages[1], ScamPlacement::AfterPe);
    });
    let shapes = infer_shapes(&g, &[1, 3, 224, 224]).unwrap();
    let out_of = |p: &str| &shapes[g.layers().iter().rposition(|l| l.path.starts_with(p)).unwrap()];
    assert_eq!(out_of("s1"), &vec![1, 48, 56, 56]);
    assert_eq!(out_of("s2"), &vec![1, 96, 28, 28]);
    assert_eq!(layer(&g, "s1.conv"), &LayerOp::Conv2d { in_ch: 3, out_ch: 48, kernel: 7, stride: 4, padding: 3 });
    assert_eq!(layer(&g, "s2.conv"), &LayerOp::Conv2d { in_ch: 48, out_ch: 96, kernel: 3, stride: 2, padding: 1 });
}

#[test]
fn scape_placements() {
    let st = StageConfig::new(2, 6, Ratio::ZERO, 0);
    let build = |p| {
        one_block(3, 7, |b| {
            scape(b, "pe", INPUT, 3, &st, p);
        })
    };
    let (after, none, before) = (build(ScamPlacement::AfterPe), build(ScamPlacement::None), build(ScamPlacement::BeforePe));
    let x = randn::<f64>(&[2, 3, 8, 8], 8);
    assert_eq!(after.infer(&x).unwrap(), none.infer(&x).unwrap().map(|v| 0.5 * v));
    assert_eq!(layer(&before, "pe.scam"), &LayerOp::Scam { channels: 3 });
    assert_eq!(layer(&after, "pe.scam"), &LayerOp::Scam { channels: 6 });
    assert_eq!(before.layers()[0].path, "pe.scam");
    assert_eq!(none.count_kind("scam"), 0);
}

#[test]
fn mixer_split_widths_for_s_stage3() {
    let s = ModelConfig::variant("S").unwrap().stages[2].clone();
    let g = one_block(256, 0, |b| {
        parallel_mixer(b, "m", INPUT, &s);
    });
    assert_eq!(layer(&g, "m.in_proj"), &LayerOp::Pointwise { in_ch: 256, out_ch: 512 });
    assert_eq!(layer(&g, "m.q"), &LayerOp::SliceChannels { start: 0, len: 32 });
    assert_eq!(layer(&g, "m.k"), &LayerOp::SliceChannels { start: 32, len: 32 });
    assert_eq!(layer(&g, "m.v_attn"), &LayerOp::SliceChannels { start: 64, len: 64 });
    assert_eq!(layer(&g, "m.v_conv"), &LayerOp::SliceChannels { start: 128, len: 384 });
    assert_eq!(layer(&g, "m.attn"), &LayerOp::Attention { qk_dim: 32, v_dim: 64 });
    assert_eq!(layer(&g, "m.out_proj"), &LayerOp::Pointwise { in_ch: 448, out_ch: 256 });
}

#[test]
fn mixer_without_attention_for_t_stage1() {
    let s = ModelConfig::variant("T").unwrap().stages[0].clone();
    let g = one_block(48, 0, |b| {
        parallel_mixer(b, "m", INPUT, &s);
    });
    assert_eq!(layer(&g, "m.in_proj"), &LayerOp::Pointwise { in_ch: 48, out_ch: 96 });
    assert_eq!(layer(&g, "m.out_proj"), &LayerOp::Pointwise { in_ch: 96, out_ch: 48 });
    assert_eq!(g.count_kind("attention") + g.count_kind("slice") + g.count_kind("concat"), 0);
}

#[test]
fn mixer_reduces_to_pointwise_gelu_chain() {
    let c = 3;
    let mut s = StageConfig::new(2, c, Ratio::ZERO, 1);
    s.dw_kernel = 1;
    let mut g = one_block(c, 9, |b| {
        parallel_mixer(b, "m", INPUT, &s);
    });
    g.set_param("m.dwconv.weight", Tensor::full(vec![2 * c, 1, 1, 1], 1.0)).unwrap();
    g.set_param("m.out_proj.weight", Tensor::from_fn(vec![c, 2 * c], |i| if i / (2 * c) == i % (2 * c) { 1.0 } else { 0.0 }))
        .unwrap();
    let gamma = randn::<f64>(&[c], 10);
    let beta = randn::<f64>(&[c], 11);
    let rm = randn::<f64>(&[c], 12);
    let rv = randn::<f64>(&[c], 13).map(|v| v * v + 0.5);
    let w_in = randn::<f64>(&[2 * c, c], 14);
    for (n, t) in [("gamma", &gamma), ("beta", &beta), ("running_mean", &rm), ("running_var", &rv)] {
        g.set_param(&format!("m.norm.{n}"), t.clone()).unwrap();
    }
    g.set_param("m.in_proj.weight", w_in.clone()).unwrap();

    let x = randn::<f64>(&[2, c, 4, 4], 15);
    let n = norm::batchnorm_infer(&x, &gamma, &beta, &rm, &rv, 1e-5).unwrap();
    let p = kernels::pointwise(&n, &w_in, &Tensor::zeros(vec![2 * c])).unwrap();
    let want = dense::slice_channels(&kernels::gelu(&p), 0, c).unwrap();
    let got = g.cast::<f32>().infer(&x.cast()).unwrap().cast::<f64>();
    assert!(got.max_abs_diff(&want) < 1e-6);
}

#[test]
fn ffn_width_zero_output_and_composition() {
    let s = StageConfig::new(2, 48, Ratio::ZERO, 1);
    assert_eq!(s.ffn_hidden().unwrap(), 96);
    let mut g = one_block(48, 16, |b| {
        ffn(b, "f", INPUT, &s).unwrap();
    });
    assert_eq!(layer(&g, "f.fc1"), &LayerOp::Pointwise { in_ch: 48, out_ch: 96 });

    let x = randn::<f64>(&[2, 48, 3, 3], 17);
    let gamma = randn::<f64>(&[48], 18);
    g.set_param("f.norm.gamma", gamma.clone()).unwrap();
    let n = norm::batchnorm_infer(&x, &gamma, &Tensor::zeros(vec![48]), &Tensor::zeros(vec![48]), &Tensor::full(vec![48], 1.0), 1e-5)
        .unwrap();
    let h = kernels::pointwise(&n, g.param("f.fc1.weight").unwrap(), g.param("f.fc1.bias").unwrap()).unwrap();
    let want = kernels::pointwise(&kernels::gelu(&h), g.param("f.fc2.weight").unwrap(), g.param("f.fc2.bias").unwrap()).unwrap();
    assert!(g.cast::<f32>().infer(&x.cast()).unwrap().cast::<f64>().max_abs_diff(&want) < 1e-6);

    g.set_param("f.fc2.weight", Tensor::zeros(vec![48, 96])).unwrap();
    assert!(g.infer(&x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn encoder_block_with_zero_layerscale_is_identity() {
    let s = StageConfig::new(2, 16, q(), 1).with_qk_dim(8);
    let mut b = GraphBuilder::<f32>::new(19).with_layerscale_init(0.0);
    encoder_block(&mut b, "e", INPUT, &s).unwrap();
    let g = b.finish("e", 16).unwrap();
    let x = randn::<f32>(&[2, 16, 5, 5], 20);
    assert_eq!(g.infer(&x).unwrap(), x);
}

#[test]
fn encoder_block_preserves_shape_for_every_stage() {
    for v in ["T", "S", "M", "L"] {
        let cfg = ModelConfig::variant(v).unwrap();
        for (i, s) in cfg.stages.iter().enumerate() {
            let g = one_block(s.dim, 0, |b| {
                encoder_block(b, "e", INPUT, s).unwrap();
            });
            let side = 56 >> i;
            assert_eq!(infer_shapes(&g, &[2, s.dim, side, side]).unwrap().last().unwrap(), &vec![2, s.dim, side, side]);
        }
    }
    let s = ModelConfig::variant("T").unwrap().stages[3].clone();
    let g = one_block(s.dim, 0, |b| {
        encoder_block(b, "e", INPUT, &s).unwrap();
    });
    let x = randn::<f64>(&[1, s.dim, 3, 3], 21);
    assert_eq!(g.infer(&x).unwrap().shape(), x.shape());
}

#[test]
fn head_shapes_zero_input_and_count() {
    let g = one_block(384, 22, |b| {
        classifier_head(b, "head", INPUT, 384, 1280, 1000);
    });
    assert_eq!(layer(&g, "head.fc1"), &LayerOp::Linear { in_features: 384, out_features: 1280 });
    let logits = g.infer(&Tensor::zeros(vec![2, 384, 7, 7])).unwrap();
    assert_eq!(logits.shape(), &[2, 1000]);
    assert!(logits.data().iter().all(|&v| v == 0.0));
    let n: usize = g.params().filter(|(_, p)| p.learned).map(|(_, p)| p.tensor.len()).sum();
    assert_eq!(n, 384 * 1280 + 1280 + 1280 * 1000 + 1000);
}

#[test]
fn variant_presets() {
    let t = ModelConfig::variant("T").unwrap();
    let z = Ratio::ZERO;
    assert_eq!(t.dims(), vec![48, 96, 192, 384]);
    assert_eq!(t.blocks(), vec![1, 2, 7, 2]);
    assert_eq!(t.ratios(), vec![z, z, z, q()]);
    let l = ModelConfig::variant("l").unwrap();
    assert_eq!(l.dims(), vec![112, 224, 448, 896]);
    assert_eq!(l.blocks(), vec![2, 4, 9, 3]);
    let s = ModelConfig::variant("S").unwrap().with_pm_ratios(&[z; 4]).unwrap();
    assert!(s.stages.iter().all(|st| st.attn_dim == 0 && st.conv_dim == 2 * st.dim));
    let g = build_model(&s, 0).unwrap();
    assert_eq!(g.count_kind("attention"), 0);
    assert!(matches!(ModelConfig::variant("XL"), Err(Error::UnknownVariant(_))));
}

#[test]
fn channel_arithmetic_in_every_preset() {
    for v in ["T", "S", "M", "L", "micro"] {
        for s in ModelConfig::variant(v).unwrap().stages {
            let r = s.ratio.to_f64();
            assert!(((s.attn_dim + s.conv_dim) as f64 - (2.0 - r) * s.dim as f64).abs() < 1e-9);
            assert_eq!(s.in_proj_dim(), s.qk_dim * 2 + s.attn_dim + s.conv_dim);
            if s.ratio.is_zero() {
                assert_eq!(s.in_proj_dim(), 2 * s.dim);
            }
        }
    }
}

#[test]
fn build_is_deterministic_per_seed() {
    let cfg = ModelConfig::micro();
    let a = build_model(&cfg, 5).unwrap();
    let b = build_model(&cfg, 5).unwrap();
    let c = build_model(&cfg, 6).unwrap();
    assert_eq!(a.named_tensors(), b.named_tensors());
    assert_ne!(a.named_tensors(), c.named_tensors());
}

#[test]
fn initialization_rules() {
    let g = build_model(&ModelConfig::variant("T").unwrap(), 1).unwrap();
    for (_, p) in g.params() {
        let d = p.tensor.data();
        let name = p.name.as_str();
        if name.ends_with(".weight") && !name.contains("scam") {
            assert!(d.iter().all(|v| v.abs() <= 0.04), "{name}");
            assert!(d.iter().any(|&v| v != 0.0), "{name}");
        } else if name.ends_with(".gamma") || name.ends_with(".running_var") {
            assert!(d.iter().all(|&v| v == 1.0), "{name}");
        } else if name.ends_with("layerscale.scale") {
            assert!(d.iter().all(|&v| v == 1e-5f32), "{name}");
        } else {
            assert!(d.iter().all(|&v| v == 0.0), "{name}");
        }
    }
}

#[test]
fn spatial_contract_on_micro_forward() {
    let cfg = ModelConfig::micro();
    let g = build_model(&cfg, 2).unwrap();
    let x = randn::<f32>(&[2, 3, 32, 32], 23);
    let shapes = infer_shapes(&g, x.shape()).unwrap();
    let mut seen = vec![];
    let out = g.forward_observed(&mut Eval::new(), Cow::Borrowed(&x), |_, t| seen.push(t.shape().to_vec())).unwrap();
    assert_eq!(seen, shapes);
    assert_eq!(out.shape(), &[2, 4]);
    for (i, (sec, idx)) in g.section_outputs().iter().take(4).enumerate() {
        assert_eq!(sec, &format!("stage{}", i + 1));
        assert_eq!(shapes[*idx], vec![2, cfg.stages[i].dim, 8 >> i, 8 >> i]);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let base = ModelConfig::micro();
    let mut c = base.clone();
    c.stages[0].patch_kernel = 5;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = base.clone();
    c.stages[1].conv_dim += 1;
    assert!(matches!(build_model(&c, 0), Err(Error::Config(_))));
    assert!(base.clone().with_pm_ratios(&[Ratio::new(3, 2).unwrap(); 4]).unwrap().validate().is_err());
    assert!(base.clone().with_pm_ratios(&[Ratio::ZERO; 3]).is_err());
    let mut c = base.clone();
    c.stages.swap(0, 1);
    assert!(c.validate().is_err());
    let mut c = base.clone();
    c.stages[3].qk_dim = 64;
    assert!(c.validate().is_err());
    let mut c = base;
    c.stages[2].dw_kernel = 2;
    assert!(build_model_as::<f64>(&c, 0).is_err());
}
