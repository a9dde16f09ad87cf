pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod detector;
pub mod erf;
pub mod error;
pub mod eval;
pub mod fusion;
mod gemm;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Param, Scalar, Shape, Tensor};
