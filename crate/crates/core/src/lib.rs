//! Desk-scale testbed for parallel-draft speculative decoding.
//!
//! A small frozen target transformer is paired with an EAGLE-style drafter
//! that predicts several future tokens in a single forward pass. Missing
//! inputs at look-ahead positions are substituted by a learned shared hidden
//! state and a reserved mask token, and a structured attention mask keeps
//! every look-ahead slot consistent with the real context it is allowed to
//! see. Everything runs on the CPU in `f64` and is deterministic given a
//! seed.
//!
//! Module map:
//! - [`numerics`]: row-major `f64` tensors, a reverse-mode tape, bit-packed
//!   boolean matrices, and a flat checkpoint format.
//! - [`maskgen`]: slot predicate, drop-token layout sampling, precomputed
//!   position-invariant mask blocks, and mask assembly.
//! - [`partition`]: dependency-preserving segment plans for within-sequence
//!   gradient accumulation.
//! - [`model`]: the target transformer and the parallel drafter with its
//!   hidden-state variants.
//! - [`trainer`]: batch construction, full and segmented training steps, and
//!   the optimization loop.
//! - [`specdec`]: greedy lossless speculative decoding with KV caches and an
//!   analytic cost model.
//! - [`theory`]: rotary embedding score probes (injectivity, position
//!   recovery).

pub mod maskgen;
pub mod model;
pub mod numerics;
pub mod partition;
pub mod specdec;
pub mod theory;
pub mod trainer;
