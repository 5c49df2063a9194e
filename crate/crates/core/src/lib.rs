//! Early-exit encoder-decoder transformer for grounded vision-language tasks.
//!
//! The image and text passes share one encoder stack and each may stop early
//! when consecutive layers stop changing its hidden states. The decoder may
//! likewise stop per generated token, caching states so that later tokens can
//! still attend to every position at every depth.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod evalbench;
pub mod exitpolicy;
pub mod graph;
pub mod model;
pub mod numerics;
pub mod tape;
pub mod training;

pub use data::{SyntheticExample, Task};
pub use engine::{ExitTrace, GenerationOutput};
pub use error::{CheckpointError, ConfigError, Error, Result};
pub use exitpolicy::{ExitPolicyConfig, PolicyKind};
pub use model::{DecoderCaches, HiddenState, Modality, Model, ModelConfig, ModelParams};
pub use numerics::{SeededRng, Tensor2D};
