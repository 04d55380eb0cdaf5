//! Entity representations learned in context.
//!
//! A context encoder maps a sentence with one marked (and possibly masked)
//! mention to a vector; a lookup table holds one vector per entity. Both are
//! trained jointly so that the scaled cosine between a context and its gold
//! entity beats the other entities in the batch. The learned table is then
//! probed for entity linking, entity typing, category completion and
//! question answering.

pub mod ablation;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod neural;
pub mod objective;
pub mod store;
pub mod trainer;

pub use error::{RelicError, Result};
