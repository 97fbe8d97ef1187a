pub mod accounting;
pub mod autograd;
pub mod criterion;
pub mod data;
pub mod driver;
pub mod error;
pub mod graph;
pub mod loss;
pub mod params;
pub mod surgery;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
