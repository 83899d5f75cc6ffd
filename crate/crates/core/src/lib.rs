//! Horizon imagination for diffusion world models.
//!
//! The crate is organised bottom-up:
//!
//! * [`stable`]: coupled categorical sampling that keeps actions fixed while
//!   the underlying distribution does not move, plus the naive baseline.
//! * [`schedule`]: per-(step, frame) denoising-time matrices.
//! * [`env`]: the ring-world POMDP used as a desk-scale benchmark.
//! * [`nn`]: a small dense network with hand-written backpropagation and AdamW.
//! * [`flow`]: the rectified-flow denoiser and reward/termination predictor.
//! * [`imagination`]: schedule-driven parallel rollouts inside the world model.
//! * [`actor_critic`]: λ-returns, advantage scaling, actor and critic objectives.
//! * [`agent`]: the online collect / world-model / controller training loop.
//! * [`experiments`]: the controlled studies behind the `hilab` CLI.

pub mod actor_critic;
pub mod agent;
pub mod checkpoint;
pub mod config;
pub mod env;
pub mod error;
pub mod experiments;
pub mod flow;
pub mod imagination;
pub mod nn;
pub mod replay;
pub mod rng;
pub mod schedule;
pub mod stable;
pub mod window;

pub use error::{Error, Result};
