//! Command-line harness for the parallel-draft speculative decoding
//! testbed: corpus generation, target and drafter training, decode
//! evaluation, a mask-overhead micro-benchmark, rotary-score theory probes,
//! ablation grids, and segment-plan dumps. All outputs are JSON-lines, JSON,
//! or CSV, and every subcommand is deterministic given `--seed`.

pub mod commands;
pub mod corpus;
pub mod harness;
