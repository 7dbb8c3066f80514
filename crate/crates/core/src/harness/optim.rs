use serde::{Deserialize, Serialize};

use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// SGD with heavy-ball momentum and coupled L2 weight decay.
    Sgd,
    /// Adam with decoupled weight decay.
    Adamw,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Per-parameter optimizer state. Weight decay applies only to rank ≥ 2
/// tensors (conv, dense and SCAM weights); biases, norm affines and layer
/// scales are not decayed.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    cfg: OptimizerConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Element> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig, shapes: &[&[usize]]) -> Self {
        let z = |s: &&[usize]| Tensor::zeros(s.to_vec());
        let v = match cfg.kind {
            OptimizerKind::Adamw => shapes.iter().map(z).collect(),
            OptimizerKind::Sgd => Vec::new(),
        };
        Optimizer { cfg, step: 0, m: shapes.iter().map(z).collect(), v }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Advance the step counter; call once per optimizer step, before `update`.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Update parameter `slot` in place from its gradient.
    pub fn update(&mut self, slot: usize, param: &mut Tensor<T>, grad: &Tensor<T>) {
        let c = self.cfg;
        let f = |v: f64| T::from_f64(v).unwrap();
        let decay = if param.rank() >= 2 { c.weight_decay } else { 0.0 };
        let lr = f(c.lr);
        match c.kind {
            OptimizerKind::Sgd => {
                let (mu, wd) = (f(c.momentum), f(decay));
                let m = self.m[slot].data_mut();
                for ((p, &g), m) in param.data_mut().iter_mut().zip(grad.data()).zip(m) {
                    *m = mu * *m + g + wd * *p;
                    *p -= lr * *m;
                }
            }
            OptimizerKind::Adamw => {
                let t = self.step.max(1) as i32;
                let (b1, b2) = (f(c.beta1), f(c.beta2));
                let bc1 = f(1.0 - c.beta1.powi(t));
                let bc2 = f(1.0 - c.beta2.powi(t));
                let (eps, shrink) = (f(c.eps), f(1.0 - c.lr * decay));
                let one = T::one();
                let (m, v) = (self.m[slot].data_mut(), self.v[slot].data_mut());
                for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p = *p * shrink - lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(kind: OptimizerKind) -> OptimizerConfig {
        OptimizerConfig { kind, lr: 0.1, weight_decay: 0.0, momentum: 0.9, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = Tensor::<f64>::new(vec![2], vec![1.0, -1.0]).unwrap();
        let g = Tensor::new(vec![2], vec![0.3, -5.0]).unwrap();
        let mut o = Optimizer::new(cfg(OptimizerKind::Adamw), &[&[2]]);
        o.begin_step();
        o.update(0, &mut p, &g);
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut p = Tensor::<f64>::new(vec![1], vec![0.0]).unwrap();
        let g = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut o = Optimizer::new(cfg(OptimizerKind::Sgd), &[&[1]]);
        for _ in 0..2 {
            o.begin_step();
            o.update(0, &mut p, &g);
        }
        // -0.1·1 then -0.1·1.9
        assert!((p.data()[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut c = cfg(OptimizerKind::Adamw);
        c.lr = 0.0;
        c.weight_decay = 0.05;
        let mut p = Tensor::<f32>::full(vec![2, 2], 0.5);
        let mut o = Optimizer::new(c, &[&[2, 2]]);
        o.begin_step();
        o.update(0, &mut p, &Tensor::full(vec![2, 2], 3.0));
        assert!(p.data().iter().all(|&v| v == 0.5));
    }
}
