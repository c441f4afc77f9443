//! Dense matrices, a small reverse-mode autodiff graph, Adam, and seeded RNG.

mod adam;
pub mod check;
mod graph;
mod matrix;
mod rng;

pub use adam::{Adam, AdamConfig};
pub(crate) use graph::{sigmoid, softplus};
pub use graph::{Graph, Var};
pub use matrix::Matrix;
pub use rng::RngState;
