//! Desk-scale laboratory for text-conditioned diffusion transformers.

pub mod arch;
pub mod audit;
pub mod conditioning;
pub mod error;
pub mod flow;
pub mod layers;
pub mod numerics;
pub mod sampler;
pub mod scalinglab;
pub mod vaetoy;

pub use error::{Error, Result};
