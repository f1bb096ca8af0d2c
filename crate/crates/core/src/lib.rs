pub mod data;
pub mod disout;
pub mod error;
pub mod nn;
pub mod parallel;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Conv2dGeometry, Precision, Scalar, Tensor};
