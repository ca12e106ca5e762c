pub mod analytic;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod network;
pub mod optimizers;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Matrix, RngStream};
