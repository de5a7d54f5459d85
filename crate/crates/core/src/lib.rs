//! Light-weight real-time segmentation network built from factorized
//! convolution blocks and a reduced non-local module whose keys and values
//! are regional dominant singular vectors.

pub mod attention;
pub mod cost;
pub mod error;
pub mod network;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Shape4, Tensor4};
