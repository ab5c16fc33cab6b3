//! Joint relation and explanation classification with rule induction.
//!
//! The crate is organised bottom-up:
//!
//! - [`corpus`]: annotated sentences, loading, entity masking, dependency paths
//!   and a synthetic corpus generator.
//! - [`rules`]: surface and syntactic extraction rules, their matcher, and the
//!   conversion of rule matches into token-level explanation labels.
//! - [`neural`]: a small transformer encoder with the no-relation (NRC),
//!   explanation (EC) and relation (RC) heads, exact gradients and AdamW.
//! - [`train`]: burn-in plus semi-supervised training with latent explanation
//!   candidates.
//! - [`rulegen`]: turning local rationales into a global syntactic rule set.
//! - [`eval`]: relation metrics, rationale overlap, plausibility and the
//!   attribution baselines.

pub mod corpus;
pub mod error;
pub mod labels;
pub mod eval;
pub mod neural;
pub mod rulegen;
pub mod rules;
pub mod train;

pub use error::{Error, Result};

/// Label of the negative class.
pub const NO_RELATION: &str = "no_relation";
