//! Matrices, deterministic randomness, FLOP accounting and a gradient tape.

pub mod flops;
mod matrix;
mod rng;
mod tape;

pub use matrix::{matmul_mode, set_matmul_mode, with_matmul_mode, MatmulMode, Matrix, MASKED};
pub use rng::{Rng, SplitMix64};
pub use tape::{Gradients, Tape, Var};
