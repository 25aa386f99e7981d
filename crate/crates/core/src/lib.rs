pub mod attack;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod payload;
pub mod tensor;
pub mod train;
pub mod watermark;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
