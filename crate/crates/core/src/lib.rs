pub mod dataset;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod imaging;
pub mod lora;
pub mod losses;
pub mod mask;
pub mod params;
pub mod pipeline;
pub mod service;
pub mod train;

pub use error::{Error, Result};
