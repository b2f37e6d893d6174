//! Structured pruning of a toy latent diffusion U-Net.

pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod eval;
pub mod graph;
pub mod modify;
pub mod prune;
pub mod score;

pub use error::{CoreError, Result};
