//! Soft-label chain CRFs.
//!
//! A linear-chain CRF trained against per-position soft target
//! distributions with the inclusive KL divergence `KL(q ‖ p)`. The loss is
//! computed in a single modified forward pass, its gradients are the
//! moment-matching difference of model and target marginals, and every
//! dynamic program is checked against brute-force enumeration in
//! [`oracle`]. The remaining modules provide a phrase-grounding-style
//! scoring model, a synthetic benchmark, and a training loop.

pub mod check;
pub mod cli;
pub mod crf;
pub mod error;
pub mod geometry;
pub mod numkernel;
pub mod oracle;
pub mod scorers;
pub mod synthdata;
pub mod trainer;

pub use crf::{Marginals, ScoreGradients, ScoreSet, SoftTargets, Transitions};
pub use error::{Error, Result};
pub use geometry::BBox;
pub use scorers::{ModelConfig, ModelKind, ModelParams, TransitionMode};
pub use synthdata::{GeneratorConfig, Instance};
pub use trainer::{Decoder, Regime, TrainConfig};
