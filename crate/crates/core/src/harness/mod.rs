//! Data loading, training, evaluation, gradient checking and benchmarking.

pub mod bench;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod optim;
pub mod train;

pub use bench::{bench, BenchConfig, BenchReport};
pub use data::{load_cifar10_binary, synth_dataset, Dataset};
pub use eval::{evaluate, predict, EvalReport};
pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use train::{curve_csv, train, StepRecord, TrainConfig, TrainOutcome};
