pub mod adapters;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod host;
pub mod params;
pub mod persist;
pub mod run;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::Parameterized;
