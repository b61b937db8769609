//! Log-key language modeling for anomaly detection.
//!
//! The crate is `no_std` (it needs `alloc`) and carries every algorithmic
//! piece of the toolkit:
//!
//! * [`parser`]: Drain-style fixed-depth template mining over log content.
//! * [`corpus`]: key sequences, the model vocabulary and one-class splits.
//! * [`tensor`]: a small f32 tensor engine with a reverse-mode tape and Adam.
//! * [`model`]: a GPT-2 style decoder-only transformer over log keys.
//! * [`pretrain`]: next-key language-model training on normal sequences.
//! * [`ppo`]: policy-gradient fine-tuning with the Top-K reward.
//! * [`detector`]: the single-violation Top-K detection rule.
//! * [`metrics`], [`synthetic`], [`eval`]: scoring, benchmark generation and sweeps.
//!
//! File formats, regex preprocessing and the command line live in the
//! `logsentinel` crate.
#![no_std]
#![warn(rust_2018_idioms)]

extern crate alloc;

pub mod corpus;
pub mod detector;
mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod parser;
pub mod ppo;
pub mod pretrain;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};

/// Seeded RNG used everywhere a stochastic choice is made.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate RNG from a 64-bit seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
