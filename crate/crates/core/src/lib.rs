pub mod data;
pub mod encoder;
pub mod error;
pub mod freeze;
pub mod grid;
pub mod io;
pub mod lab;
pub mod metrics;
pub mod optim;
pub mod tensor;
pub mod tune;

pub use error::{Error, Result};
