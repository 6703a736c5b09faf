pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod graph;
pub mod ib;
pub mod models;
pub mod strategies;
pub mod tensor;

pub use error::{Error, Result};
