//! Decentralized multi-agent target tracking on occupancy grids.
//!
//! A team of sensing agents tracks one moving target. Each agent runs its
//! own trajectory particle filter over a sliding history window and keeps a
//! small database of time-stamped measurements. Instead of flooding the
//! network with raw data, agents ask a random nearby peer for help: the
//! query carries a handful of sampled trajectories, and the peer answers
//! with the single stored measurement that would change the asker's belief
//! the most, scored by KL divergence. Delayed answers are folded in by
//! rolling the filter back to a snapshot and re-simulating forward.
//!
//! The crate also ships the machinery to judge all of this: an exact
//! discrete forward-pass oracle, a full-communication reference filter, a
//! Laplace-smoothed grid KL metric, and a scenario engine that sweeps
//! communication rates and logs bandwidth-versus-accuracy curves.
//!
//! Module map:
//!
//! - [`world`]: grid maps, target motion kernel, visibility geometry.
//! - [`sensor`]: footprint measurements and their exact likelihood.
//! - [`filter`]: the per-agent trajectory particle filter with snapshots,
//!   the measurement database, and re-simulation.
//! - [`comms`]: query/response protocol, information scoring, the every-k
//!   broadcast baseline, and bandwidth accounting.
//! - [`engine`]: scenario configs, the synchronous simulation loop, metric
//!   logs, and rate sweeps.
//! - [`eval`]: grid distributions, the exact oracle, the reference filter,
//!   the KL metric, and static evidence combination.
//! - [`scenarios`]: bundled reference scenarios.

use std::fmt;

use serde::{Deserialize, Serialize};

pub mod comms;
pub mod engine;
pub mod error;
pub mod eval;
pub mod filter;
pub mod scenarios;
pub mod seed;
pub mod sensor;
pub mod world;

pub use error::{Error, Result};

/// Discrete simulation time. Step 0 is the prior; sensing starts at step 1.
pub type Timestep = u32;

/// Identifies one sensing agent. Ids are dense, starting at 0.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct AgentId(pub u32);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}
