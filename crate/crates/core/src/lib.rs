//! Low-rank reinforcement learning for finite-horizon tabular MDPs with a
//! generative model.
//!
//! The crate is organised bottom-up:
//!
//! - [`mdp`]: tabular MDPs, policies, exact dynamic-programming oracles and
//!   the sampling-only [`mdp::GenerativeModel`].
//! - [`spectral`]: SVD diagnostics (rank, incoherence, condition number),
//!   truncated pseudo-inverses and best rank-d approximations.
//! - [`estimation`]: anchor sampling and the anchor pseudo-inverse
//!   completion `Q(s, A#) Q(S#, A#)^+ Q(S#, a)` with its error-amplification
//!   diagnostics.
//! - [`generators`]: counterexample MDPs and synthetic low-Tucker-rank
//!   families with spectral certificates.
//! - [`algorithms`]: LR-EVI, LR-MCPI, vanilla baselines, the discounted
//!   variant, the rank-1 recursion driver and sample-size schedules.
//! - [`harness`]: experiment configuration, orchestration and CSV/JSON
//!   output used by the `lowrank-rl` binary.
//!
//! Step indices `h` are 1-based throughout (`1..=horizon`), state and
//! action indices are 0-based.

pub mod algorithms;
pub mod error;
pub mod estimation;
pub mod generators;
pub mod harness;
pub mod mdp;
pub mod numfmt;
pub mod rng;
pub mod spectral;

pub use error::{Error, Result};
