pub mod compositor;
pub mod error;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod registry;
pub mod scenegen;
pub mod stochastic;
pub mod tensor;

pub use error::{Error, Result};
