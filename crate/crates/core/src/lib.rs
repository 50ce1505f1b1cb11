pub mod cli;
pub mod error;
pub mod manifold;
pub mod models;
pub mod montecarlo;
pub mod numeric;
pub mod robustness;
pub mod tangent;
pub mod transport;

pub use error::{Error, Result};
