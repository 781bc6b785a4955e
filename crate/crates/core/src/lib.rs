pub mod attention;
pub mod autodiff;
pub mod checks;
pub mod denoiser;
pub mod error;
pub mod grounding;
pub mod harness;
pub mod guidance;
pub mod masks;
pub mod numerics;
pub mod registry;
pub mod sampler;
pub mod schedule;

pub use error::{Error, Result};
