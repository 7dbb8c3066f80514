//! Model description: configuration, the elaborated layer graph and the
//! builders that turn one into the other.

pub mod blocks;
pub mod config;
pub mod graph;
pub mod ratio;

pub use blocks::{build_model, build_model_as, classifier_head, encoder_block, ffn, parallel_mixer, scam, scape, GraphBuilder};
pub use config::{ModelConfig, ScamPlacement, StageConfig, MAX_QK_DIM};
pub use graph::{Layer, LayerOp, ModuleGraph, Param, ParamSpec, ValueId, INPUT};
pub use ratio::Ratio;
