//! Dual-speaker conversational talking-head modeling.
//!
//! Given Speaker-A's audio and facial motion and Speaker-B's audio, the model predicts
//! Speaker-B's blendshape coefficient sequence so that B speaks when it holds the floor and
//! reacts (nods, smiles) while listening.
//!
//! Module map:
//! - [`datamodel`]: clips, manifests, on-disk formats, normalization, turn accounting
//! - [`synthgen`]: deterministic synthetic dyadic conversations with known couplings
//! - [`model`]: the four-stage network (joint encoder, temporal enhancer, interaction, synthesis)
//! - [`training`]: losses, optimizer loop, checkpoints, finite-difference gradient checks
//! - [`metrics`]: FD, paired FD, MSE, SID and rPCC over EXP/JAW/POSE partitions
//! - [`autodiff`]: the reverse-mode engine the model is written against

pub mod autodiff;
pub mod config;
pub mod datamodel;
pub mod error;
pub mod metrics;
pub mod model;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
