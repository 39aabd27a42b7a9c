//! Zero-shot skeleton action recognition by aligning partitioned skeleton
//! features with partitioned text descriptions.

pub mod adam;
pub mod align;
pub mod bundle;
pub mod cli;
pub mod error;
pub mod eval;
mod fsutil;
pub mod partition;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use align::{AlignmentModel, AlphaMode, GlobalQuery, ModelConfig, PartitionMode};
pub use bundle::{load_bundle, write_bundle, Bundle, Dims, SplitSpec};
pub use error::{Error, Result};
pub use eval::{evaluate, EvalReport};
pub use synth::{generate, SynthSpec};
pub use tensor::Tensor;
pub use train::{train, Checkpoint, TrainConfig};
