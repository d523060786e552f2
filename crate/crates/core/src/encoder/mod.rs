//! Stem, blocks, reductions and classifier head.

pub mod checkpoint;
pub mod config;
pub mod model;

pub use config::{attention_schedule, AttentionPolicy, BlockSpec, EncoderConfig, StemSpec, Variant, MANIFEST_KEYS};
pub use model::{Bound, EncoderOutput, Model, Param};
