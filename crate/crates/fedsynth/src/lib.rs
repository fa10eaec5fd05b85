pub mod config;
pub mod driver;
pub mod error;
pub mod federation;
pub mod params;
pub mod renderer;
pub mod rng;
pub mod tensor;

pub mod losses;
pub mod netmodel;
pub mod transfer;
pub mod verify;
pub use error::{Error, Result};
