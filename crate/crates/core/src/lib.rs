//! Spatio-temporal GPT world model for a procedural top-down driving world.
//!
//! Frames and ego poses are tokenized ([`tokenizer`], [`pose_codec`]), a
//! decoupled temporal / intra-frame / internal-autoregressive transformer
//! predicts the next state ([`model`]), and [`rollout`] drives long-horizon
//! controllable generation with drift and attention-cost accounting.

pub mod error;
pub mod formats;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod pose_codec;
pub mod rollout;
pub mod tokenizer;
pub mod world;

pub use error::{Error, Result};
