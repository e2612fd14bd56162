//! Chunk-wise autoregressive flow-matching generation on a synthetic
//! audio-driven "talking sequence" world.
//!
//! The crate is organized around a fully deterministic pipeline: a procedural
//! world with exact oracles ([`world`]), an invertible causal latent codec
//! ([`codec`]), conditioning construction ([`conditioning`]), a small
//! transformer velocity field with tape-based reverse-mode differentiation
//! ([`model`], [`autodiff`]), teacher pre-training ([`teacher`]), asymmetric
//! distribution-matching distillation ([`distill`]), chunk-wise inference
//! ([`rollout`]), drift metrics ([`metrics`]), a corpus construction cascade
//! ([`corpus`]), and a batch experiment runner ([`experiment`]).

pub mod autodiff;
pub mod checkpoint;
pub mod clipstore;
pub mod codec;
pub mod conditioning;
pub mod config;
pub mod corpus;
pub mod distill;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rollout;
pub mod teacher;
pub mod util;
pub mod world;

pub use error::{Error, Result};
