pub mod autograd;
pub mod backbone;
pub mod datamodel;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod magnify;
pub mod metanet;
pub mod preprocess;
pub mod pretrain;
pub mod scalar;
pub mod tensor;
#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
