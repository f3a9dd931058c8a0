//! Dense tensors, reverse-mode differentiation, attention/normalization
//! primitives, AdamW and seeded randomness.

pub mod adamw;
pub mod attention;
pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod real;
pub mod rng;
pub mod rope;
pub mod tensor;

pub use adamw::{adamw_step, adamw_update, AdamWConfig, OptimizerState};
pub use attention::{masked_attention, AttentionGroup, AttentionLayout, GroupMask};
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use graph::{Graph, Var};
pub use params::ParamStore;
pub use real::Real;
pub use rng::{mix_seed, Rng, RngState};
pub use rope::{apply_rope, rope2d_encode, GridPos, RopeAngles};
pub use tensor::Tensor;
