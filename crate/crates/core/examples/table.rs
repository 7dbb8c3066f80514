use parformer::analysis::{count_flops, count_params};
use parformer::arch::{build_model, ModelConfig, Ratio};

fn main() {
    for v in ["T", "S", "M", "L"] {
        let g = build_model(&ModelConfig::variant(v).unwrap(), 0).unwrap();
        let r = count_flops(&g, &[1, 3, 224, 224]).unwrap();
        println!("{v}: {:.3}M {:.3}G ({})", count_params(&g).params_m(), r.gmacs(), g.layers().len());
    }
    let z = Ratio::ZERO;
    let h = Ratio::new(1, 2).unwrap();
    for rs in [[z, z, z, z], [z, z, h, h]] {
        let g = build_model(&ModelConfig::variant("S").unwrap().with_pm_ratios(&rs).unwrap(), 0).unwrap();
        let r = count_flops(&g, &[1, 3, 224, 224]).unwrap();
        println!("{}: {:.3}M {:.3}G", g.name(), r.params_m(), r.gmacs());
    }
}
