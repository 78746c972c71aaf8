//! Controllable sequence generation with successor features.
//!
//! The library learns the dynamics of a small autoregressive language model
//! once, as successor features, and steers decoding at inference time by
//! capping each token's probability with a fused dead-end value estimate.
//! Per-subject reward vectors are fit by linear regression against terminal
//! labels, so subjects can be added, removed, or combined at runtime without
//! touching the trained networks.
//!
//! Module map:
//!
//! * [`seqmdp`] — vocabulary, states, and the deterministic append-transition.
//! * [`lm`] — the base policy: a smoothed n-gram model and an exact table model.
//! * [`featnet`] — state features and multi-task reward regression.
//! * [`sfnet`] — the successor-feature network and its MC / expected-SARSA trainers.
//! * [`rectify`] — subject fusion, probability capping, and the decoding loop.
//! * [`oracle`] — exact brute-force values on small instances.
//! * [`harness`] — corpus ingestion, subject scorers, metrics, config, stages.
//! * [`checkpoint`] — the `SFG1` binary container.

pub mod checkpoint;
pub mod error;
pub mod featnet;
pub mod gradcheck;
pub mod harness;
pub mod lm;
pub mod nn;
pub mod oracle;
pub mod rectify;
pub mod seqmdp;
pub mod sfnet;

pub use error::{Result, SfError};
pub use seqmdp::{SeqState, TokenId, Trajectory, Vocab};
