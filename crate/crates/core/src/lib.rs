//! Rollout-only dropout (Roll-Drop) laboratory.
//!
//! Trains locomotion policies with PPO on a deterministic planar legged
//! walker and measures how a tiny-probability dropout layer that is active
//! only while collecting trajectories changes robustness to multiplicative
//! observation noise.
//!
//! Module map:
//!
//! - [`rng`]: counter-based random streams (one per consumer and environment)
//! - [`nn`]: MLP with analytic backprop, Gaussian head, Roll-Drop layer, checkpoints
//! - [`env`]: the planar walker, its terrain, reward and observation
//! - [`rollout`]: vectorised collection and evaluation episodes
//! - [`ppo`]: GAE, clipped surrogate, Adam updates and the training loop
//! - [`harness`]: noise sweeps, dropout tuning, gain mismatch, multi-seed reports
//! - [`analysis`]: state/action distributions and SVG figures
//! - [`config`]: experiment configuration, presets and manifests
//! - [`cli`]: the `rolldrop` command line

pub mod analysis;
pub mod cli;
pub mod config;
pub mod env;
pub mod error;
pub mod harness;
pub mod nn;
pub mod ppo;
pub mod rng;
pub mod rollout;

pub use error::{Error, Result};
