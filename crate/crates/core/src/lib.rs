//! Fast autoregressive generation in continuous token spaces.
//!
//! * [`diffcore`]: tensors, reverse-mode tape, AdamW, EMA, checkpoints.
//! * [`shortcut_head`]: step-size-conditioned velocity head, its flow-matching
//!   and self-consistency losses, and the few-step Euler sampler.
//! * [`cvae_head`]: conditional VAE alternative head (one decoder call per token).
//! * [`conditioner`]: masked encoder-decoder and causal (KV-cached) backbones.
//! * [`ar_engine`]: training step, cosine-schedule masked generation, causal generation.
//! * [`toylab`]: toy distributions with exact conditionals, distribution metrics.
//! * [`costmodel`]: analytic FLOP and head-call accounting.
//! * [`gradsuite`]: finite-difference checks of ops, layers and losses.

pub mod ar_engine;
pub mod conditioner;
pub mod costmodel;
pub mod cvae_head;
pub mod diffcore;
pub mod error;
pub mod exec;
pub mod gradsuite;
pub mod nn;
pub mod shortcut_head;
pub mod toylab;

pub use error::{Error, Result};
