use std::fmt::Write as _;
use std::sync::mpsc::sync_channel;
use std::thread;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::ModuleGraph;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::harness::eval::count_correct;
use crate::harness::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::tensor::autodiff::Tape;
use crate::tensor::exec::{Exec, ParamId};
use crate::tensor::kernels::BnMode;
use crate::tensor::{DType, Element, Tensor};

/// Batches prepared ahead of the training step.
const PREFETCH: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    /// SGD momentum.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub dtype: DType,
    /// Reshuffle every epoch; otherwise batches walk the set in order.
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adamw,
            lr: 1e-3,
            weight_decay: 0.05,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            steps: 500,
            seed: 0,
            dtype: DType::F32,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("betas must be in [0, 1) and adam_eps positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        Ok(())
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            lr: self.lr,
            weight_decay: self.weight_decay,
            momentum: self.momentum,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Accuracy on the step's batch, measured before the update.
    pub acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub curve: Vec<StepRecord>,
    pub checkpoint: Checkpoint,
}

pub fn curve_csv(curve: &[StepRecord]) -> String {
    let mut s = String::from("step,loss,acc\n");
    for r in curve {
        let _ = writeln!(s, "{},{:.8},{:.6}", r.step, r.loss, r.acc);
    }
    s
}

/// Index batches for `steps` steps: consecutive slices of per-epoch
/// permutations (or of `0..n` without shuffling), wrapping across epochs.
fn batch_indices(n: usize, cfg: &TrainConfig) -> impl Iterator<Item = Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (batch, shuffle) = (cfg.batch_size.min(n), cfg.shuffle);
    let mut order: Vec<usize> = Vec::new();
    let mut pos = n;
    (0..cfg.steps).map(move |_| {
        let mut idx = Vec::with_capacity(batch);
        while idx.len() < batch {
            if pos == n {
                order = (0..n).collect();
                if shuffle {
                    order.shuffle(&mut rng);
                }
                pos = 0;
            }
            let take = (batch - idx.len()).min(n - pos);
            idx.extend_from_slice(&order[pos..pos + take]);
            pos += take;
        }
        idx
    })
}

/// One forward/backward/update step. Returns the batch loss and accuracy.
fn step<T: Element>(
    graph: &mut ModuleGraph<T>,
    opt: &mut Optimizer<T>,
    slots: &[ParamId],
    x: Tensor<T>,
    labels: &[usize],
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let input = tape.input(x);
    let logits = graph.forward(&mut tape, input)?;
    let loss = tape.cross_entropy(logits, labels)?;
    let loss_value = tape.value(loss).item().to_f64().unwrap();
    let (correct, _) = count_correct(tape.value(logits), labels);
    tape.backward(loss)?;
    let updates = tape.take_bn_updates();
    let grads: Vec<(ParamId, Tensor<T>)> = tape.param_grads().map(|(id, g)| (id, g.clone())).collect();
    drop(tape);
    graph.apply_bn_updates(updates);
    opt.begin_step();
    for (id, g) in grads {
        let slot = slots.binary_search(&id).expect("gradient for an unknown parameter");
        opt.update(slot, &mut graph.param_by_id_mut(id).tensor, &g);
    }
    Ok((loss_value, correct as f64 / labels.len() as f64))
}

/// Train in place. Batches are assembled on a producer thread and handed
/// over through a bounded channel; the update itself runs on the caller's
/// thread. The graph is left in inference mode.
pub fn train<T: Element>(graph: &mut ModuleGraph<T>, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    let slots: Vec<ParamId> = graph.params().filter(|(_, p)| p.learned).map(|(id, _)| id).collect();
    let shapes: Vec<&[usize]> = slots.iter().map(|&id| graph.param_by_id(id).tensor.shape()).collect();
    let mut opt = Optimizer::<T>::new(cfg.optimizer_config(), &shapes);
    graph.set_mode(BnMode::Train);

    let mut curve = Vec::with_capacity(cfg.steps);
    let result = thread::scope(|s| -> Result<()> {
        let (tx, rx) = sync_channel::<(Tensor<T>, Vec<usize>)>(PREFETCH);
        s.spawn(move || {
            for idx in batch_indices(data.len(), cfg) {
                if tx.send(data.batch::<T>(&idx)).is_err() {
                    break;
                }
            }
        });
        for (i, (x, labels)) in rx.iter().enumerate() {
            let (loss, acc) = match step(graph, &mut opt, &slots, x, &labels) {
                Ok(r) => r,
                Err(Error::NonFinite { .. }) => return Err(Error::Diverged { step: i, loss: f64::NAN }),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { step: i, loss });
            }
            curve.push(StepRecord { step: i, loss, acc });
        }
        Ok(())
    });
    graph.set_mode(BnMode::Infer);
    result?;
    Ok(TrainOutcome { curve, checkpoint: Checkpoint::from_graph(graph) })
}
