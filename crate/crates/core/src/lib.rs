pub mod attacks;
pub mod cli;
pub mod data;
pub mod detectors;
pub mod error;
pub mod evaluation;
pub mod numerics;
pub mod pca;
pub mod principals;
pub mod suite;
pub mod training;

pub use error::{Error, Result};
