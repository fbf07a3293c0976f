//! Minimal dense network engine: forward passes, a reverse-mode tape, and Adam.

pub mod adam;
pub mod checkpoint;
pub mod mlp;
pub mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use mlp::{Activation, Dense, Mlp, HIDDEN_WIDTH};
pub use tape::{BoundMlp, Gradients, Tape, Var};
