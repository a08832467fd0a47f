pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod heatmap;
pub mod losses;
pub mod metrics;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
