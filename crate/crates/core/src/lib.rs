//! A modular decoder-only transformer whose feed-forward sublayers are
//! replaced by ReLU-gated cross-attention into one shared knowledge base,
//! together with the machinery to fold that cross-attention back into
//! ordinary FFN weights and to check the two forms agree.

pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod folding;
pub mod format;
pub mod knowledge;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
