//! Contextual object detection at desk scale.
//!
//! An image is encoded into spatial features; a few pooled *local tokens*
//! prefix a small causal language model, whose per-token latent states are
//! turned into conditional object queries for a set-prediction box decoder.
//! Training uses bipartite matching restricted to the ground truths whose name
//! equals the conditioning word; evaluation scores cloze accuracy and
//! name-aware average precision.

pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geometry;
mod layers;
pub mod lm;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
