pub mod cli;
pub mod clicksim;
pub mod dataio;
pub mod engine;
pub mod error;
pub mod numerics;
pub mod segmenter;
pub mod service;

pub use error::{Error, Result};
