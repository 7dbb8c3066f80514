use std::borrow::Cow;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::analysis::fold_batchnorm;
use crate::arch::ModuleGraph;
use crate::error::{Error, Result};
use crate::tensor::exec::Eval;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchConfig {
    pub batch: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub input_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Timing {
    /// Wall time of each timed forward pass, seconds.
    pub runs: Vec<f64>,
    pub median_s: f64,
    pub images_per_sec: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub model: String,
    pub batch: usize,
    pub input_size: usize,
    pub layers_unfolded: usize,
    pub layers_folded: usize,
    pub unfolded: Timing,
    pub folded: Timing,
}

impl BenchReport {
    pub fn speedup(&self) -> f64 {
        self.folded.images_per_sec / self.unfolded.images_per_sec
    }
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) }
}

fn timed(g: &ModuleGraph<f32>, x: &Tensor<f32>) -> Result<f64> {
    let t = Instant::now();
    let mut e = Eval::new();
    let out = g.forward(&mut e, Cow::Borrowed(x))?;
    std::hint::black_box(&out);
    Ok(t.elapsed().as_secs_f64())
}

fn timing(runs: Vec<f64>, batch: usize) -> Timing {
    let m = median(&runs);
    Timing { runs, median_s: m, images_per_sec: batch as f64 / m }
}

/// Inference throughput of the graph with and without BN folding. Timed runs
/// of the two graphs alternate, swapping which goes first each repeat, so
/// slow drift in machine load hits both alike.
pub fn bench(graph: &ModuleGraph<f32>, cfg: BenchConfig) -> Result<BenchReport> {
    if cfg.batch == 0 || cfg.repeats == 0 {
        return Err(Error::Config("bench: batch and repeats must be at least 1".into()));
    }
    let folded = fold_batchnorm(graph)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x = Tensor::randn(vec![cfg.batch, graph.in_channels(), cfg.input_size, cfg.input_size], 1.0, &mut rng);
    for _ in 0..cfg.warmup {
        timed(graph, &x)?;
        timed(&folded, &x)?;
    }
    let (mut u, mut f) = (Vec::with_capacity(cfg.repeats), Vec::with_capacity(cfg.repeats));
    for r in 0..cfg.repeats {
        if r % 2 == 0 {
            u.push(timed(graph, &x)?);
            f.push(timed(&folded, &x)?);
        } else {
            f.push(timed(&folded, &x)?);
            u.push(timed(graph, &x)?);
        }
    }
    Ok(BenchReport {
        model: graph.name().to_string(),
        batch: cfg.batch,
        input_size: cfg.input_size,
        layers_unfolded: graph.layers().len(),
        layers_folded: folded.layers().len(),
        unfolded: timing(u, cfg.batch),
        folded: timing(f, cfg.batch),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[7.0]), 7.0);
    }
}
