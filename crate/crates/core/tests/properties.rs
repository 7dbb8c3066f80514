//! Invariants over randomized shapes and values.

mod common;

use common::*;
use parformer::analysis::infer_shapes;
use parformer::arch::{scam, scape, GraphBuilder, ModelConfig, Ratio, ScamPlacement, StageConfig, INPUT};
use parformer::checkpoint::Checkpoint;
use parformer::tensor::kernels::{self, dense};
use parformer::Tensor;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_output_extent(h in 1usize..20, k in 1usize..6, s in 1usize..4, p in 0usize..3, cin in 1usize..4, cout in 1usize..4) {
        prop_assume!(h + 2 * p >= k);
        let x = Tensor::<f32>::zeros(vec![1, cin, h, h]);
        let w = Tensor::zeros(vec![cout, cin, k, k]);
        let y = kernels::conv2d(&x, &w, &Tensor::zeros(vec![cout]), s, p).unwrap();
        let e = (h + 2 * p - k) / s + 1;
        prop_assert_eq!(y.shape(), &[1, cout, e, e]);
    }

    #[test]
    fn patch_embedding_is_ceil_division(h in 1usize..40, s in 1usize..5, cin in 1usize..4) {
        let stage = StageConfig::new(s, 4, Ratio::ZERO, 0);
        let mut b = GraphBuilder::<f32>::new(0);
        scape(&mut b, "pe", INPUT, cin, &stage, ScamPlacement::AfterPe);
        let g = b.finish("pe", cin).unwrap();
        let shapes = infer_shapes(&g, &[2, cin, h, h + 1]).unwrap();
        prop_assert_eq!(shapes.last().unwrap(), &vec![2, 4, h.div_ceil(s), (h + 1).div_ceil(s)]);
        let y = g.infer(&Tensor::zeros(vec![2, cin, h, h + 1])).unwrap();
        prop_assert_eq!(y.shape(), shapes.last().unwrap().as_slice());
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>(), scale in 0.1f64..50.0) {
        let x = randn::<f64>(&[rows, cols], seed).map(|v| v * scale);
        let y = kernels::softmax_lastdim(&x).unwrap();
        for r in 0..rows {
            let row = &y.data()[r * cols..(r + 1) * cols];
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_is_permutation_equivariant(t in 2usize..8, cq in 1usize..4, ca in 1usize..4, seed in any::<u64>()) {
        let q = randn::<f64>(&[1, t, cq], seed);
        let k = randn::<f64>(&[1, t, cq], seed ^ 1);
        let v = randn::<f64>(&[1, t, ca], seed ^ 2);
        let perm: Vec<usize> = (0..t).rev().collect();
        let permute = |x: &Tensor<f64>, c: usize| {
            Tensor::from_fn(vec![1, t, c], |i| x.data()[perm[i / c] * c + i % c])
        };
        let out = kernels::single_head_attention(&q, &k, &v).unwrap();
        let pout = kernels::single_head_attention(&permute(&q, cq), &permute(&k, cq), &permute(&v, ca)).unwrap();
        prop_assert!(pout.max_abs_diff(&permute(&out, ca)) < 1e-12);
    }

    #[test]
    fn attention_output_is_convex_combination(t in 1usize..8, seed in any::<u64>()) {
        let q = randn::<f64>(&[1, t, 2], seed);
        let k = randn::<f64>(&[1, t, 2], seed ^ 3);
        let v = randn::<f64>(&[1, t, 1], seed ^ 4);
        let out = kernels::single_head_attention(&q, &k, &v).unwrap();
        let lo = v.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(out.data().iter().all(|&o| o >= lo - 1e-12 && o <= hi + 1e-12));
    }

    #[test]
    fn scam_gate_lies_in_open_unit_interval(c in 1usize..6, seed in any::<u64>(), wscale in 0.0f64..3.0) {
        let mut b = GraphBuilder::<f64>::new(seed);
        scam(&mut b, "g", INPUT, c);
        let mut g = b.finish("g", c).unwrap();
        g.set_param("g.weight", randn::<f64>(&[c, c], seed ^ 5).map(|v| v * wscale)).unwrap();
        g.set_param("g.bias", randn::<f64>(&[c], seed ^ 6)).unwrap();
        let x = randn::<f64>(&[2, c, 3, 3], seed ^ 7).map(|v| v + 0.5);
        let y = g.infer(&x).unwrap();
        // y = gate · x with one gate per (sample, channel).
        for nc in 0..2 * c {
            let ref_i = (nc * 9..nc * 9 + 9).max_by(|&a, &b| x.data()[a].abs().total_cmp(&x.data()[b].abs())).unwrap();
            let gate = y.data()[ref_i] / x.data()[ref_i];
            prop_assert!(gate > 0.0 && gate < 1.0);
            for p in 0..9 {
                let i = nc * 9 + p;
                prop_assert!((y.data()[i] - gate * x.data()[i]).abs() < 1e-9 * x.data()[i].abs().max(1.0));
            }
        }
    }

    #[test]
    fn concat_of_slices_is_identity(c in 2usize..8, cut in 1usize..7, seed in any::<u64>()) {
        prop_assume!(cut < c);
        let x = randn::<f32>(&[2, c, 3, 2], seed);
        let a = dense::slice_channels(&x, 0, cut).unwrap();
        let b = dense::slice_channels(&x, cut, c - cut).unwrap();
        prop_assert_eq!(dense::concat_channels(&[&a, &b]).unwrap(), x);
    }

    #[test]
    fn mixer_widths_follow_ratio(dim in 1usize..200, num in 0u32..5, den in 1u32..9) {
        prop_assume!(num <= den);
        let r = Ratio::new(num, den).unwrap();
        let s = StageConfig::new(2, dim, r, 1);
        prop_assert_eq!(s.attn_dim, r.scale_round(dim));
        prop_assert_eq!(s.conv_dim, 2 * (dim - s.attn_dim));
        prop_assert_eq!(s.in_proj_dim(), 2 * s.qk_dim + s.attn_dim + s.conv_dim);
        prop_assert_eq!(s.qk_dim == 0, s.attn_dim == 0 && r.is_zero());
    }

    #[test]
    fn ratio_text_round_trip(num in 0u32..100, den in 1u32..100) {
        let r = Ratio::new(num, den).unwrap();
        let back: Ratio = r.to_string().parse().unwrap();
        prop_assert_eq!(back, r);
        prop_assert!((r.to_f64() - num as f64 / den as f64).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>(), c in 1usize..5) {
        let cfg = ModelConfig::micro_gradcheck();
        let mut g = parformer::arch::build_model_as::<f64>(&cfg, seed).unwrap();
        g.set_param("head.fc2.bias", randn::<f64>(&[cfg.num_classes], seed)).unwrap();
        let ck = Checkpoint::from_graph(&g);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        prop_assert_eq!(&back, &ck);
        let mut h = parformer::arch::build_model_as::<f64>(&cfg, seed.wrapping_add(c as u64)).unwrap();
        back.apply_to(&mut h).unwrap();
        prop_assert_eq!(h.named_tensors(), g.named_tensors());
    }
}
