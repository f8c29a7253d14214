//! Unified graph-text transformer for instruction-based molecule property
//! prediction.
//!
//! Molecules are parsed from SMILES ([`molgraph`]), their all-pairs distances
//! and shortest paths precomputed ([`structure`]), and encoded jointly with a
//! natural-language instruction by a transformer whose attention bias mixes
//! sequence offsets, graph distances, a held-out cross token, a one-way
//! graph-to-text mask and bond features pooled along shortest paths
//! ([`bias`], [`model`]). Every task answer is decoded as text.

pub mod bias;
pub mod cli;
pub mod eval;
pub mod model;
pub mod molgraph;
pub mod structure;
pub mod tasks;
pub mod tokenizer;
pub mod train;
