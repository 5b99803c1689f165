//! Desk-scale layer decomposition with region-aware attention and an
//! occlusion-guided adapter on top of a toy rectified-flow transformer.

pub mod codec;
pub mod eval;
pub mod flow;
pub mod masks;
pub mod synth;
mod error;

pub use error::{Error, Result};
