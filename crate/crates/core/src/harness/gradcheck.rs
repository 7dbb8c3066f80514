use std::borrow::Cow;

use serde::Serialize;

use crate::arch::ModuleGraph;
use crate::error::Result;
use crate::par;
use crate::tensor::autodiff::Tape;
use crate::tensor::exec::{Eval, Exec, ParamId};
use crate::tensor::kernels::dense::cross_entropy;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckOptions {
    /// Pass threshold on the elementwise relative error.
    pub tol: f64,
    /// Central-difference step is `rel_step · max(1, |θ|)`.
    pub rel_step: f64,
    /// Denominator floor: `|a − n| / max(|a|, |n|, floor)`.
    pub floor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { tol: 1e-4, rel_step: 1e-5, floor: 1e-6 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub len: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `name[index]` of the worst element, with its analytic and numeric values.
    pub worst: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub params: Vec<ParamCheck>,
    pub tol: f64,
    pub passed: bool,
}

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn loss(graph: &ModuleGraph<f64>, x: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    let mut e = Eval::new();
    let logits = graph.forward(&mut e, Cow::Borrowed(x))?;
    Ok(cross_entropy(&logits, labels)?.0.item())
}

/// Compare reverse-mode gradients of the mean cross-entropy with central
/// differences for every element of every learned parameter, in f64. The
/// graph's current BN mode is used for both.
pub fn gradcheck(
    graph: &ModuleGraph<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    opts: GradcheckOptions,
) -> Result<GradcheckReport> {
    let mut tape = Tape::new();
    let input = tape.input(x.clone());
    let logits = graph.forward(&mut tape, input)?;
    let l = tape.cross_entropy(logits, labels)?;
    tape.backward(l)?;
    let analytic: Vec<(ParamId, Tensor<f64>)> = tape.param_grads().map(|(id, g)| (id, g.clone())).collect();
    drop(tape);

    let items: Vec<(usize, usize)> = analytic
        .iter()
        .enumerate()
        .flat_map(|(p, (_, g))| (0..g.len()).map(move |i| (p, i)))
        .collect();
    // Fixed-size work chunks, each perturbing its own copy of the graph.
    const CHUNK: usize = 256;
    let n_chunks = items.len().div_ceil(CHUNK);
    let numeric: Vec<Result<Vec<f64>>> = par::map(n_chunks, |c| {
        let mut g = graph.clone();
        let mut out = Vec::with_capacity(CHUNK);
        for &(p, i) in &items[c * CHUNK..((c + 1) * CHUNK).min(items.len())] {
            let id = analytic[p].0;
            let theta = g.param_by_id(id).tensor.data()[i];
            let h = opts.rel_step * theta.abs().max(1.0);
            g.param_by_id_mut(id).tensor.data_mut()[i] = theta + h;
            let up = loss(&g, x, labels)?;
            g.param_by_id_mut(id).tensor.data_mut()[i] = theta - h;
            let down = loss(&g, x, labels)?;
            g.param_by_id_mut(id).tensor.data_mut()[i] = theta;
            out.push((up - down) / (2.0 * h));
        }
        Ok(out)
    });
    let mut numeric_flat = Vec::with_capacity(items.len());
    for chunk in numeric {
        numeric_flat.extend(chunk?);
    }

    let mut params: Vec<ParamCheck> = analytic
        .iter()
        .map(|(id, g)| ParamCheck { name: graph.param_by_id(*id).name.clone(), len: g.len(), max_rel_err: 0.0 })
        .collect();
    let (mut worst, mut worst_err, mut wa, mut wn) = (String::new(), 0.0f64, 0.0, 0.0);
    for (&(p, i), &n) in items.iter().zip(&numeric_flat) {
        let a = analytic[p].1.data()[i];
        let e = rel_err(a, n, opts.floor);
        let pc = &mut params[p];
        pc.max_rel_err = pc.max_rel_err.max(e);
        if e > worst_err || worst.is_empty() {
            worst_err = e;
            worst = format!("{}[{i}]", pc.name);
            (wa, wn) = (a, n);
        }
    }
    Ok(GradcheckReport {
        checked: items.len(),
        max_rel_err: worst_err,
        worst,
        worst_analytic: wa,
        worst_numeric: wn,
        params,
        tol: opts.tol,
        passed: worst_err < opts.tol,
    })
}
