//! A desk-scale laboratory for speculative-decoding draft LM heads.
//!
//! The crate provides seeded toy target/drafter models, four interchangeable
//! draft-head designs (full vocabulary, low-rank SlimSpec, static truncation
//! and routed top-k), the chain draft/verify loop with lossless rejection
//! sampling, forward-KL training with hand-derived gradients, CPU latency
//! measurement, and the acceptance-cost speedup model that ties acceptance
//! length and head latency together.

pub mod bench;
pub mod checkpoint;
pub mod dist;
pub mod engine;
pub mod error;
pub mod heads;
pub mod linalg;
pub mod models;
pub mod perfmodel;
pub mod seed;
pub mod training;

pub use dist::{DecodeTemperature, LogitVector, ProbDist, TokenId, Vocabulary};
pub use error::{LabError, Result};
pub use heads::{DraftHead, FlopCount, FullHead, HeadKind, RoutedHead, SlimSpecHead, TruncatedHead};
pub use models::{DrafterBackbone, ToyTargetModel};

/// Version string recorded in run manifests.
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
