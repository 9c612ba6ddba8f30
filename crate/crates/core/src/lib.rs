pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod flow;
pub mod graph;
pub mod inflate;
pub mod ops;
pub mod tensor;
pub mod train;
pub mod video;

pub use checkpoint::Checkpoint;
pub use error::{CheckpointError, Error, Result};
pub use tensor::Tensor;
