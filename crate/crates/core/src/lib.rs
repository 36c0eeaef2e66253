pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod grid;
pub mod heads;
pub mod mae;
pub mod masking;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod tokens;

pub use error::{Error, Result};
