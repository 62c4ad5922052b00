pub mod boxes;
pub mod cfp;
pub mod data;
pub mod detector;
pub mod ema;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod nn;
pub mod pyramid;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
