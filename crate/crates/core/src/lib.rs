//! ParFormer: parallel attention/convolution vision transformer with channel
//! attention patch embedding, on a small CPU tensor library with reverse-mode
//! autodiff.

pub mod analysis;
pub mod arch;
pub mod checkpoint;
pub mod config_file;
pub mod error;
pub mod harness;
pub mod par;
pub mod tensor;

pub use arch::{build_model, ModelConfig, ModuleGraph};
pub use checkpoint::Checkpoint;
pub use config_file::ConfigFile;
pub use error::{Error, Result};
pub use tensor::Tensor;
