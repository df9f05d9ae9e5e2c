pub mod archive;
pub mod baseline;
pub mod corpus;
pub mod embedding;
mod dsp;
pub mod error;
pub mod evaluate;
pub mod features;
pub mod index;
pub mod metric;
pub mod pipeline;
pub mod scattering;
pub mod signal;

pub use error::{Error, Result};
