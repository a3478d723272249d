//! Pairwise reward modelling and pairwise PPO on a synthetic preference world.
//!
//! The crate implements a small but complete preference-learning pipeline:
//!
//! 1. [`synthworld`] defines a token world with a hidden, exactly computable
//!    quality function and a Bradley-Terry annotator, so every downstream
//!    statistic has a brute-force oracle.
//! 2. [`reward`] trains a pairwise reward model (binary yes/no head over an
//!    ordered response pair) with swap augmentation and a position-symmetry
//!    penalty, then distills it into a pointwise scorer.
//! 3. [`anchor`] picks per-prompt reference responses (best/worst-of-n) and
//!    computes winning-rate diagnostics against them.
//! 4. [`rl`] runs PPO where the terminal reward is the pairwise win
//!    probability of the sampled response against its anchor.
//! 5. [`klbound`] verifies a second-order bound on the per-update policy KL
//!    divergence on tiny exactly-enumerable policies.
//! 6. [`runner`] wires the stages into a deterministic, manifest-driven
//!    pipeline behind a CLI.
//!
//! Everything runs on [`numerics`], a minimal f64 tape autodiff with just the
//! operations the pipeline needs. All randomness flows from explicit seeds;
//! re-running any stage with the same config and seed produces byte-identical
//! artifacts.

pub mod anchor;
pub mod error;
pub mod io;
pub mod klbound;
pub mod numerics;
pub mod reward;
pub mod rl;
pub mod runner;
pub mod seeds;
pub mod synthworld;

pub use error::{Error, Result};
