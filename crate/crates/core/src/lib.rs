//! Query-answer neural network for cloze-style query answering.
//!
//! The model keeps its supporting knowledge as query-answer pairs extracted
//! at candidate occurrences in the context, retrieves from them over several
//! hops, and accumulates answer evidence separately from the query it keeps
//! refining.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod hop;
pub mod params;
pub mod support;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use checkpoint::Checkpoint;
pub use data::Dataset;
pub use error::{Error, Result};
pub use hop::{forward_pass, ForwardOptions, ForwardOutput, HopTrace, HopTraceRecord, Overrides};
pub use params::{InitOptions, ModelDims, ModelParams};
pub use support::Example;
pub use tensor::Tensor;
pub use trainer::{evaluate, train, Evaluation, TrainConfig};
pub use vocab::Vocab;
