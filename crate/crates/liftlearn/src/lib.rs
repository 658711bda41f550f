//! Learning lifted STRIPS action schemas from state-transition traces.
//!
//! The pipeline encodes each observed transition as a typed graph, computes
//! per-object embeddings with a relational graph network, matches them to
//! per-action slot queries through a rectangular Sinkhorn assignment, grounds
//! learnable lifted effect/precondition tensors through the resulting
//! selection, and predicts the successor state. After training, symbolic
//! schemas are thresholded out of the parameters and evaluated against the
//! ground-truth domain by successor-set comparison.

pub mod adjacency;
pub mod assign;
pub mod data;
pub mod domain;
pub mod encoder;
pub mod eval;
pub mod extract;
pub mod mlp;
pub mod pddl;
pub mod presets;
pub mod schema_model;
pub mod tape;
pub mod train;
