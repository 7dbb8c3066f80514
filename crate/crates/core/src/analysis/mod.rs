//! Static analysis over a [`ModuleGraph`](crate::arch::ModuleGraph): shapes,
//! parameter and MAC ledgers, and batch-norm folding.

mod fold;
mod report;
mod shapes;

pub use fold::fold_batchnorm;
pub use report::{count_flops, count_params, AnalysisReport, LayerRow};
pub use shapes::infer_shapes;
