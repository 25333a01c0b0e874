pub mod data;
pub mod discovery;
pub mod distill;
pub mod error;
pub mod nn;
pub mod profiler;
pub mod rng;
pub mod saliency;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use nn::{Network, NetworkSpec};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Network32 = Network<f32>;
pub type Network64 = Network<f64>;
