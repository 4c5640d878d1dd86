//! Positional-bias laboratory: a toy decoder transformer, synthetic
//! list-selection tasks, permutation augmentation, position-aware adapters,
//! training loops and the measurement harness for per-slot accuracy.

pub mod adapter;
pub mod checkpoint;
pub mod diff;
pub mod eval;
pub mod gradsuite;
pub mod model;
pub mod prompt;
pub mod seed;
pub mod task;
pub mod train;
pub mod vocab;
