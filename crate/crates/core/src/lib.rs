pub mod data;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod training;
pub mod watchdog;

pub use tensor::{Real, Tensor, TensorError};
