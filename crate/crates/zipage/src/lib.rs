//! Zipage: a paged KV-cache engine core with token-wise compression.
//!
//! The crate implements the memory side of an LLM serving engine at desk
//! scale: a paged K/V pool with prefix sharing, an observation-window
//! scoring pipeline, top-k eviction with in-page compaction, constrained
//! and hybrid request scheduling, and a deterministic simulated decode
//! driver that stands in for a real model. Everything is verified
//! against brute-force oracles rather than GPU benchmarks.

pub mod capacity;
pub mod compress;
pub mod engine;
pub mod metrics;
mod mix;
pub mod pool;
pub mod sched;
pub mod scoring;
pub mod workload;

/// Scalar precision of all cached tensors. Bit-exactness guarantees in
/// this crate apply within this one precision.
pub type Scalar = f32;
