//! Fault-tolerant locomotion controller built around a masked-attention
//! actor-critic policy and a two-stage PPO pipeline.
//!
//! The crate is organized as:
//! - [`nn`]: dense matrix kernel, reverse-mode gradients, optimizer, gradient checker
//! - [`policy`]: transformer and MLP actors, damage masking, mask-free critic
//! - [`damage`]: the eight-scenario fault taxonomy and physical constraint operators
//! - [`env`]: deterministic planar compensation environment
//! - [`ppo`]: rollout collection, GAE, clipped losses, two-stage training
//! - [`eval`]: scenario sweeps, distance/failure metrics, report emission

pub mod ckpt;
pub mod config;
pub mod damage;
pub mod env;
pub mod error;
pub mod eval;
pub mod nn;
pub mod policy;
pub mod ppo;
pub mod rng;

pub use error::UmcError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, UmcError>;
