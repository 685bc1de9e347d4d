//! Off-policy meta-reinforcement-learning with variational task beliefs.
//!
//! The agent learns a permutation-invariant embedding of task transitions,
//! maintains a diagonal-Gaussian belief over a latent task variable, and
//! trains a belief-conditional soft actor-critic with an information
//! bottleneck on the policy's latent. Toy 2-D point-navigation families
//! stand in for heavyweight benchmarks so the whole pipeline runs at desk
//! scale.
//!
//! Crate layout:
//! - [`ndiff`]: tensors, reverse-mode differentiation tape, MLPs, Adam,
//!   diagonal-Gaussian utilities.
//! - [`envsim`]: analytic task families with hidden goals / hidden dynamics.
//! - [`replay`]: per-task replay buffers and context/target sampling.
//! - [`embed`]: deep-set encoder, decoders, beliefs, embedding loss.
//! - [`agent`]: two-stage policy, Q/V critics, their losses, Polyak targets.
//! - [`meta`]: meta-training / meta-testing orchestration and checkpoints.
//! - [`harness`]: CLI plumbing, config files, metrics summaries, and the
//!   discrete information-bottleneck bound verifier.

pub mod agent;
pub mod embed;
pub mod envsim;
pub mod harness;
pub mod meta;
pub mod ndiff;
pub mod replay;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("environment error: {0}")]
    Env(String),
    #[error("replay error: {0}")]
    Replay(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// Exit code for the CLI: config errors are distinguished from runtime errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
