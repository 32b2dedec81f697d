//! Minimal CPU neural-network runtime: layers with hand-written backward
//! passes, gradient injection at intermediate layers, and Adam/SGD.

mod gemm;
pub mod layers;
pub mod loss;
pub mod network;
pub mod optim;
pub mod tensor;

pub use layers::{BatchNorm, Conv2d, Dense, Layer, Residual};
pub use network::{Grads, Network, Trace};
pub use optim::{Optimizer, OptimizerKind};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
