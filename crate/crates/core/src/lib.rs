//! Mixture-of-interpretable-experts (MoIE) policies for continuous-action
//! reinforcement learning.
//!
//! A policy is a diagonal Gaussian whose mean blends a small set of expert
//! actions. Each expert is anchored at a prototype state copied verbatim from
//! collected trajectories, so a trained policy reads as a list of
//! "when close to this state, do this action" rules plus a null default
//! action for unfamiliar states.
//!
//! Learning alternates two kinds of updates:
//! - gradient ascent on an importance-weighted advantage surrogate, with
//!   closed-form projections keeping every iterate inside a KL ball around
//!   the data-collecting policy and above an entropy floor ([`projection`],
//!   [`update`]);
//! - randomized discrete search over which dataset states serve as
//!   prototypes ([`search`]).

pub mod envs;
pub mod error;
pub mod gae;
pub mod policy;
pub mod projection;
pub mod search;
pub mod types;
pub mod update;
pub mod value;

pub use error::{Error, Result};
pub use policy::{KlBreakdown, MoiePolicy, PolicyTag};
pub use types::{parameter_count, seeded_rng, Rng, StateNormalizer, TrajectoryDataset, Transition};
