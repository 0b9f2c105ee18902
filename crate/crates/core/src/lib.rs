pub mod detector;
pub mod distill;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod lightml;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
