pub mod error;
pub mod federation;
pub mod infotheory;
pub mod psi;
pub mod shapley;
pub mod synth;
pub mod tabular;
pub mod wire;

pub use error::{Error, Result};
