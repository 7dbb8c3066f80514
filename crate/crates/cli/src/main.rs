use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use parformer::analysis::{count_flops, count_params, fold_batchnorm, infer_shapes};
use parformer::arch::blocks::build_model_as;
use parformer::arch::{build_model, ModelConfig, ModuleGraph};
use parformer::harness::{
    bench, curve_csv, evaluate, gradcheck, load_cifar10_binary, synth_dataset, train, BenchConfig, Dataset,
    GradcheckOptions,
};
use parformer::tensor::kernels::BnMode;
use parformer::tensor::{DType, Tensor};
use parformer::{Checkpoint, ConfigFile, Error, Result};

#[derive(Parser)]
#[command(name = "parformer", version, about = "ParFormer models: analysis, training and benchmarks")]
struct Cli {
    /// Seed for initialization and data; PARFORMER_SEED overrides it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Preset: T, S, M, L or micro.
    #[arg(long, conflicts_with = "config")]
    variant: Option<String>,
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the number of classes.
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Stage table and shape trace.
    Describe {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        input: Option<usize>,
    },
    /// Parameter ledger.
    Params {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        csv: bool,
    },
    /// Parameter and MAC ledger at an input resolution.
    Flops {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        input: Option<usize>,
        #[arg(long)]
        csv: bool,
    },
    /// Finite-difference check of every gradient of the gradcheck micro model.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 2)]
        batch: usize,
    },
    /// Train and write a checkpoint plus `<out>.json` config sidecar.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        /// CIFAR-10 binary directory or file, or `synth`.
        #[arg(long)]
        data: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Loss curve CSV (step, loss, acc).
        #[arg(long)]
        curve: Option<PathBuf>,
        /// Images per class for `--data synth`.
        #[arg(long, default_value_t = 64)]
        synth_per_class: usize,
    },
    /// Top-1 accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: String,
        #[arg(long, default_value_t = 64)]
        synth_per_class: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
    },
    /// Fold batch norms of a checkpoint into adjacent layers.
    FoldBn {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Inference throughput, folded vs unfolded.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 256)]
        batch: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long)]
        input: Option<usize>,
    },
}

fn seed(flag: u64) -> Result<u64> {
    match std::env::var("PARFORMER_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("PARFORMER_SEED={s:?} is not an unsigned integer"))),
        Err(_) => Ok(flag),
    }
}

fn sidecar(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn load_config(m: &ModelArgs, ckpt: Option<&Path>) -> Result<ConfigFile> {
    let mut c = match (&m.variant, &m.config, ckpt) {
        (Some(v), _, _) => ConfigFile::new(ModelConfig::variant(v)?),
        (None, Some(p), _) => ConfigFile::load(p)?,
        (None, None, Some(ck)) if sidecar(ck).exists() => ConfigFile::load(sidecar(ck))?,
        _ => return Err(Error::Config("pass --variant or --config".into())),
    };
    if let Some(k) = m.classes {
        c.model.num_classes = k;
    }
    c.model.validate()?;
    Ok(c)
}

fn ratio_list(c: &ModelConfig) -> String {
    let r: Vec<String> = c.ratios().iter().map(|r| r.to_string()).collect();
    format!("[{}]", r.join(", "))
}

fn shape_str(s: &[usize]) -> String {
    s.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("x")
}

fn describe(c: &ModelConfig, input: usize) -> Result<String> {
    let g = build_model(c, 0)?;
    let mut o = String::new();
    let _ = writeln!(o, "ParFormer-{}  input {input}x{input}  classes {}", c.name, c.num_classes);
    let _ = writeln!(o, "pm ratios {}", ratio_list(c));
    let scam = serde_json::to_value(c.scam_placement).ok().and_then(|v| v.as_str().map(String::from));
    let _ = writeln!(o, "scam {}", scam.unwrap_or_default());
    let _ = writeln!(
        o,
        "{:<6} {:>6} {:>6} {:>8} {:>5} {:>5} {:>5} {:>6} {:>4} {:>4} {:>6}",
        "stage", "kernel", "stride", "tokens", "dim", "ratio", "attn", "dwconv", "qk", "ffn", "blocks"
    );
    for (i, s) in c.stages.iter().enumerate() {
        let t = input / c.reduction(i);
        let _ = writeln!(
            o,
            "{:<6} {:>6} {:>6} {:>8} {:>5} {:>5} {:>5} {:>6} {:>4} {:>4} {:>6}",
            i + 1,
            format!("{0}x{0}", s.patch_kernel),
            s.patch_stride,
            format!("{t}x{t}"),
            s.dim,
            s.ratio.to_string(),
            s.attn_dim,
            s.conv_dim,
            s.qk_dim,
            s.ffn_ratio.to_string(),
            s.blocks
        );
    }
    let c4 = c.stages.last().map(|s| s.dim).unwrap_or(0);
    let _ = writeln!(o, "head   gap -> {c4}x{} -> gelu -> {}x{}", c.head_hidden, c.head_hidden, c.num_classes);
    let shapes = infer_shapes(&g, &[1, c.in_channels, input, input])?;
    let _ = writeln!(o, "shape trace");
    let _ = writeln!(o, "  {:<8} {}", "input", shape_str(&[1, c.in_channels, input, input]));
    for (name, idx) in g.section_outputs() {
        let _ = writeln!(o, "  {:<8} {}", name, shape_str(&shapes[idx]));
    }
    let p = count_params(&g);
    let f = count_flops(&g, &[1, c.in_channels, input, input])?;
    let _ = writeln!(o, "params {:.3} M  macs {:.3} G", p.params_m(), f.gmacs());
    Ok(o)
}

fn load_data(source: &str, c: &ModelConfig, per_class: usize, seed: u64) -> Result<Dataset> {
    if source == "synth" {
        synth_dataset(c.num_classes, per_class, c.input_size, seed)
    } else {
        let d = load_cifar10_binary(source)?;
        if d.num_classes > c.num_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, model outputs {}",
                d.num_classes, c.num_classes
            )));
        }
        Ok(d)
    }
}

/// Graph matching a checkpoint's structure (folded or not), with its tensors.
fn graph_for(ckpt: &Checkpoint, c: &ModelConfig) -> Result<ModuleGraph<f32>> {
    let mut g = build_model(c, 0)?;
    if ckpt.is_folded() {
        g = fold_batchnorm(&g)?;
    }
    ckpt.apply_to(&mut g)?;
    Ok(g)
}

fn run(cli: Cli) -> Result<()> {
    let seed = seed(cli.seed)?;
    match cli.cmd {
        Cmd::Describe { model, input } => {
            let c = load_config(&model, None)?.model;
            print!("{}", describe(&c, input.unwrap_or(c.input_size))?);
        }
        Cmd::Params { model, csv } => {
            let c = load_config(&model, None)?.model;
            let r = count_params(&build_model(&c, seed)?);
            print!("{}", if csv { r.to_csv() } else { r.to_text() });
        }
        Cmd::Flops { model, input, csv } => {
            let c = load_config(&model, None)?.model;
            let s = input.unwrap_or(c.input_size);
            let r = count_flops(&build_model(&c, seed)?, &[1, c.in_channels, s, s])?;
            print!("{}", if csv { r.to_csv() } else { r.to_text() });
        }
        Cmd::Gradcheck { tol, batch } => {
            let c = ModelConfig::micro_gradcheck();
            let mut g = build_model_as::<f64>(&c, seed)?;
            g.set_mode(BnMode::Train);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::randn(vec![batch, c.in_channels, c.input_size, c.input_size], 1.0, &mut rng);
            let labels: Vec<usize> = (0..batch).map(|i| i % c.num_classes).collect();
            let r = gradcheck(&g, &x, &labels, GradcheckOptions { tol, ..Default::default() })?;
            println!(
                "gradcheck {}: max_rel_err {:.3e} over {} parameters (tol {:.1e}), worst {}",
                if r.passed { "pass" } else { "fail" },
                r.max_rel_err,
                r.checked,
                tol,
                r.worst
            );
            if !r.passed {
                return Err(Error::Config(format!("gradcheck failed: {:.3e} >= {tol:.1e}", r.max_rel_err)));
            }
        }
        Cmd::Train { model, data, out, steps, curve, synth_per_class } => {
            let mut cf = load_config(&model, None)?;
            cf.train.seed = seed;
            if let Some(s) = steps {
                cf.train.steps = s;
            }
            let d = load_data(&data, &cf.model, synth_per_class, seed)?;
            let (curve_rows, ckpt) = if cf.train.dtype == DType::F64 {
                let mut g = build_model_as::<f64>(&cf.model, seed)?;
                let o = train(&mut g, &d, &cf.train)?;
                (o.curve, o.checkpoint)
            } else {
                let mut g = build_model(&cf.model, seed)?;
                let o = train(&mut g, &d, &cf.train)?;
                (o.curve, o.checkpoint)
            };
            ckpt.save(&out)?;
            cf.save(sidecar(&out))?;
            if let Some(p) = curve {
                std::fs::write(p, curve_csv(&curve_rows))?;
            }
            let last = curve_rows.last();
            println!(
                "trained {} steps: final loss {:.6}, batch acc {:.4}; wrote {}",
                curve_rows.len(),
                last.map_or(f64::NAN, |r| r.loss),
                last.map_or(f64::NAN, |r| r.acc),
                out.display()
            );
        }
        Cmd::Eval { ckpt, model, data, synth_per_class, batch } => {
            let cf = load_config(&model, Some(&ckpt))?;
            let ck = Checkpoint::load(&ckpt)?;
            let g = graph_for(&ck, &cf.model)?;
            let d = load_data(&data, &cf.model, synth_per_class, seed)?;
            let r = evaluate(&g, &d, batch)?;
            println!("top1 {:.4} ({}/{}), ties {}", r.accuracy, r.correct, r.total, r.ties);
        }
        Cmd::FoldBn { ckpt, model, out } => {
            let cf = load_config(&model, Some(&ckpt))?;
            let ck = Checkpoint::load(&ckpt)?;
            if ck.is_folded() {
                return Err(Error::Checkpoint("checkpoint is already folded".into()));
            }
            let g = graph_for(&ck, &cf.model)?;
            let f = fold_batchnorm(&g)?;
            Checkpoint::from_graph(&f).save(&out)?;
            cf.save(sidecar(&out))?;
            let (a, b) = (g.layers().len(), f.layers().len());
            println!(
                "layers {a} -> {b} ({:+}), batchnorm {} -> {}",
                b as i64 - a as i64,
                g.count_kind("batchnorm"),
                f.count_kind("batchnorm")
            );
        }
        Cmd::Bench { model, batch, repeats, warmup, input } => {
            let c = load_config(&model, None)?.model;
            let g = build_model(&c, seed)?;
            let input_size = input.unwrap_or(c.input_size);
            let r = bench(&g, BenchConfig { batch, repeats, warmup, input_size, seed })?;
            println!(
                "{} batch {} input {}: unfolded {:.2} img/s, folded {:.2} img/s, speedup {:.3}, layers {} -> {}",
                r.model,
                r.batch,
                r.input_size,
                r.unfolded.images_per_sec,
                r.folded.images_per_sec,
                r.speedup(),
                r.layers_unfolded,
                r.layers_folded
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            // clap renders a multi-line report; keep only its headline.
            let text = e.to_string();
            eprintln!("error: usage: {}", text.lines().next().unwrap_or("").trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.code(), e);
            ExitCode::FAILURE
        }
    }
}
