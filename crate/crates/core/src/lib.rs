//! Approximate joint sampling for masked diffusion language models, at a
//! scale where every claim can be checked against exact enumeration.

pub mod adjust;
pub mod decoding;
pub mod error;
pub mod evaluation;
pub(crate) mod jsonl;
pub mod model;
pub mod numerics;
pub mod training;
pub mod workbench;

pub use error::{Error, Result};
