//! Low-level differentiable building blocks: convolutions, pooling, dense
//! layers, softmax, and initialization. Everything is f64 and hand-derived;
//! the gradient test suites check each backward against central finite
//! differences.

pub mod activation;
pub mod conv2d;
pub mod conv3d;
pub mod init;
pub mod linear;
pub mod pool;
pub mod softmax;

pub use activation::Activation;
