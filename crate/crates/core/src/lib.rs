pub mod attention;
pub mod autodiff;
pub mod checks;
pub mod cost;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod manifest;
pub mod par;
pub mod reduction;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
