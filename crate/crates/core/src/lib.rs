pub mod auxiliary;
pub mod data;
pub mod error;
pub mod layers;
pub mod mtl_net;
pub mod search;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
