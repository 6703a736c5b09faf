//! Numerical substrate: dense and CSR matrices, seeded random streams, and
//! the gradient tape every model is built on.

mod dense;
pub mod rng;
mod sparse;
mod tape;

pub use dense::DenseMatrix;
pub use rng::Rng;
pub use sparse::SparseMatrix;
pub use tape::{Gradients, Mode, Tape, Var};
