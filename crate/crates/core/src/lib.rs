//! Indeterminate speaker representations at desk scale.
//!
//! The encoder learns frame-level speaker embeddings whose state depends on
//! the whole input context; downstream this drives verification scoring,
//! graph-based clustering of pairwise similarities, and a hybrid
//! global/local diarization pipeline, with synthetic data generation and
//! scoring tools to exercise all of it end to end.

pub mod datasim;
pub mod features;
pub mod losses;
pub mod model;
pub mod trainer;
pub mod numerics;
pub mod timeline;
