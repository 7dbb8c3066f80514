use serde::Serialize;

use crate::arch::ModuleGraph;
use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::par;
use crate::tensor::kernels::BnMode;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    /// Rows whose maximum logit is shared by several classes. Ties resolve to
    /// the lowest class index and are reported rather than hidden.
    pub ties: usize,
}

/// Correct top-1 predictions and tied rows in a `[N, K]` logit matrix.
pub fn count_correct<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> (usize, usize) {
    let k = logits.shape().last().copied().unwrap_or(1).max(1);
    let preds = logits.argmax_rows();
    let ties = logits
        .data()
        .chunks(k)
        .zip(&preds)
        .filter(|(row, &p)| row.iter().filter(|&&v| v == row[p]).count() > 1)
        .count();
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    (correct, ties)
}

/// Logits for every sample, batch by batch.
pub fn predict<T: Element>(graph: &ModuleGraph<T>, data: &Dataset, batch: usize) -> Result<Tensor<T>> {
    let frozen;
    let g = if graph.mode() == BnMode::Train {
        let mut c = graph.clone();
        c.set_mode(BnMode::Infer);
        frozen = c;
        &frozen
    } else {
        graph
    };
    let batch = batch.max(1);
    let chunks: Vec<Vec<usize>> = (0..data.len()).collect::<Vec<_>>().chunks(batch).map(|c| c.to_vec()).collect();
    let outs = par::map(chunks.len(), |i| g.infer(&data.batch::<T>(&chunks[i]).0));
    let mut k = 0;
    let mut all = Vec::new();
    for o in outs {
        let o = o?;
        k = o.shape()[1];
        all.extend_from_slice(o.data());
    }
    Tensor::new(vec![data.len(), k], all)
}

/// Top-1 accuracy in inference mode.
pub fn evaluate<T: Element>(graph: &ModuleGraph<T>, data: &Dataset, batch: usize) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let logits = predict(graph, data, batch)?;
    let (correct, ties) = count_correct(&logits, &data.labels);
    Ok(EvalReport { correct, total: data.len(), accuracy: correct as f64 / data.len() as f64, ties })
}
