//! Minimal dense neural-network kernel: matrices, forward/backward kernels,
//! a gradient tape, an adaptive-moment optimizer, and a finite-difference
//! gradient checker.

pub mod block;
pub mod gradcheck;
pub mod kernels;
pub mod matrix;
pub mod params;
pub mod tape;

pub use block::{ffn, mhsa, AttentionBlockParams};
pub use gradcheck::grad_check;
pub use kernels::{MaskMatrix, MASK_NEG};
pub use matrix::Matrix;
pub use params::{adam_step, clip_global_norm, AdamHyper, ParamStore};
pub use tape::{Graph, NodeId};
