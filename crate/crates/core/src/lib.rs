pub mod attention;
pub mod autodiff;
pub mod edge;
mod error;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod param;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
