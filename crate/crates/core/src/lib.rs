pub mod dsp;
pub mod error;
pub mod harness;
pub mod losses;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod spatialsim;

pub use error::{Error, Result};
