//! Cross-modal prototype contrastive learning on synthetic voice/face data.
//!
//! Paired MLP encoders are trained with an in-batch instance contrast (CID),
//! a contrast of each instance against the other modality's k-means
//! prototypes, momentum feature memories, and per-instance loss weights
//! derived from a deviation score. Evaluation covers 1-of-2 matching,
//! verification AUC and retrieval mAP on held-out identities.

pub mod clustering;
pub mod container;
pub mod diagnostics;
pub mod error;
pub mod losses;
pub mod memory;
pub mod nn;
pub mod protocols;
pub mod recalibration;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
