use std::fmt::Write as _;

use serde::Serialize;

use crate::analysis::infer_shapes;
use crate::arch::{LayerOp, ModuleGraph};
use crate::error::Result;
use crate::tensor::Element;

/// One layer's entry in the ledger.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerRow {
    pub path: String,
    pub kind: &'static str,
    /// `None` when the report was built without an input shape.
    pub out_shape: Option<Vec<usize>>,
    pub params: u64,
    pub macs: u64,
}

/// Per-layer parameter and multiply-accumulate ledger.
///
/// One MAC counts as one FLOP. Convolutions cost `Cout·Cin/groups·k²·H'·W'`,
/// dense layers `Cin·Cout`, attention `HW²·(C_q + C_a)`. Normalization,
/// activations, softmax and residual adds are free. Running statistics are not
/// parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AnalysisReport {
    pub model: String,
    pub input: Option<Vec<usize>>,
    pub rows: Vec<LayerRow>,
    pub total_params: u64,
    pub total_macs: u64,
}

fn layer_params<T: Element>(l: &crate::arch::Layer<T>) -> u64 {
    l.params.iter().filter(|p| p.learned).map(|p| p.tensor.len() as u64).sum()
}

fn layer_macs(op: &LayerOp, inputs: &[&[usize]], out: &[usize]) -> u64 {
    let p = |s: &[usize]| s.iter().map(|&v| v as u64).product::<u64>();
    let spatial = |s: &[usize]| if s.len() == 4 { (s[2] * s[3]) as u64 } else { 1 };
    let batch = out.first().copied().unwrap_or(1) as u64;
    match *op {
        LayerOp::Conv2d { in_ch, kernel, .. } => p(out) * (in_ch * kernel * kernel) as u64,
        LayerOp::DepthwiseConv2d { kernel, .. } => p(out) * (kernel * kernel) as u64,
        LayerOp::Pointwise { in_ch, .. } => p(out) * in_ch as u64,
        LayerOp::Linear { in_features, .. } => p(out) * in_features as u64,
        LayerOp::Scam { channels } => batch * (channels * channels) as u64,
        LayerOp::Attention { qk_dim, v_dim } => {
            let t = spatial(inputs[0]);
            batch * t * t * (qk_dim + v_dim) as u64
        }
        _ => 0,
    }
}

/// Parameter ledger; shapes and MACs are left empty.
pub fn count_params<T: Element>(graph: &ModuleGraph<T>) -> AnalysisReport {
    let rows: Vec<LayerRow> = graph
        .layers()
        .iter()
        .map(|l| LayerRow { path: l.path.clone(), kind: l.op.kind(), out_shape: None, params: layer_params(l), macs: 0 })
        .collect();
    AnalysisReport::from_rows(graph.name(), None, rows)
}

/// Full ledger at the given input shape `[N, C, H, W]`.
pub fn count_flops<T: Element>(graph: &ModuleGraph<T>, input: &[usize]) -> Result<AnalysisReport> {
    let shapes = infer_shapes(graph, input)?;
    let value = |v: usize| if v == 0 { input } else { shapes[v - 1].as_slice() };
    let rows = graph
        .layers()
        .iter()
        .zip(&shapes)
        .map(|(l, out)| {
            let ins: Vec<&[usize]> = l.inputs.iter().map(|&v| value(v)).collect();
            LayerRow {
                path: l.path.clone(),
                kind: l.op.kind(),
                out_shape: Some(out.clone()),
                params: layer_params(l),
                macs: layer_macs(&l.op, &ins, out),
            }
        })
        .collect();
    Ok(AnalysisReport::from_rows(graph.name(), Some(input.to_vec()), rows))
}

fn shape_str(s: &Option<Vec<usize>>) -> String {
    match s {
        Some(s) => s.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("x"),
        None => "-".into(),
    }
}

impl AnalysisReport {
    fn from_rows(model: &str, input: Option<Vec<usize>>, rows: Vec<LayerRow>) -> Self {
        let total_params = rows.iter().map(|r| r.params).sum();
        let total_macs = rows.iter().map(|r| r.macs).sum();
        AnalysisReport { model: model.to_string(), input, rows, total_params, total_macs }
    }

    /// Totals in millions of parameters and billions of MACs.
    pub fn params_m(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn gmacs(&self) -> f64 {
        self.total_macs as f64 / 1e9
    }

    /// Sum of rows whose path starts with `prefix` followed by `.` or the end.
    pub fn subtotal(&self, prefix: &str) -> (u64, u64) {
        self.rows
            .iter()
            .filter(|r| r.path == prefix || r.path.starts_with(&format!("{prefix}.")))
            .fold((0, 0), |(p, m), r| (p + r.params, m + r.macs))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# model {}  input {}", self.model, shape_str(&self.input));
        let _ = writeln!(out, "# FLOPs counted as multiply-accumulates (1 MAC = 1 FLOP)");
        let pw = self.rows.iter().map(|r| r.path.len()).max().unwrap_or(4).max(4);
        let sw = self.rows.iter().map(|r| shape_str(&r.out_shape).len()).max().unwrap_or(9).max(9);
        let _ = writeln!(out, "{:<pw$}  {:<10}  {:<sw$}  {:>12}  {:>14}", "path", "kind", "out_shape", "params", "macs");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<pw$}  {:<10}  {:<sw$}  {:>12}  {:>14}",
                r.path,
                r.kind,
                shape_str(&r.out_shape),
                r.params,
                r.macs
            );
        }
        let _ = writeln!(out, "total params  {:>12}  ({:.3} M)", self.total_params, self.params_m());
        if self.input.is_some() {
            let _ = writeln!(out, "total macs    {:>12}  ({:.3} G)", self.total_macs, self.gmacs());
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("path,kind,out_shape,params,macs\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.path, r.kind, shape_str(&r.out_shape), r.params, r.macs);
        }
        out
    }
}
