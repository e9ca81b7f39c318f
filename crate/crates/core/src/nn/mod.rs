//! Dense numerical core: matrices, MLP encoders, Adam and the LR schedule.

pub mod adam;
pub mod matrix;
pub mod mlp;
pub mod schedule;

pub use adam::{AdamConfig, AdamState};
pub use matrix::{cosine, dot, Matrix};
pub use mlp::{Activation, Dense, ForwardCache, Gradients, MlpEncoder};
pub use schedule::LrSchedule;
