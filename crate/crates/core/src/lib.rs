//! Federated and centralized training of a small convolutional blocked/free
//! navigation classifier over procedurally generated, heterogeneous
//! environment datasets.

pub mod data;
pub mod eval;
pub mod fl;
pub mod netproto;
pub mod nn;
pub mod seed;
pub mod tensor;

pub use tensor::{Tensor, TensorError};
