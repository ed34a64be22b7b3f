//! Dense tensors, a reverse-mode tape, kernels, and the seeded generator.

mod gradcheck;
mod graph;
pub mod kernels;
mod rng;
mod scalar;
mod tensor;
pub mod tnsr;

pub use gradcheck::finite_diff_check;
pub use graph::{Graph, Var};
pub use rng::SeededRng;
pub use scalar::Scalar;
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
