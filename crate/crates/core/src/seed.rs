//! Deterministic random-stream derivation.
//!
//! Every run is driven by one 64-bit master seed. All randomness is drawn
//! from ChaCha substreams derived from that seed, one per (domain, index)
//! pair, so that independent parts of a simulation never share draws:
//!
//! - `World`: target start cell and target motion.
//! - `Placement`: random agent placement.
//! - `Sense / index = agent`: detection and noise draws of one agent.
//! - `Filter / index = agent`: prior sampling, resampling and particle
//!   motion of one agent (re-simulation continues the same stream).
//! - `Comms / index = agent`: peer picks and query-sample selection.
//! - `Reference`: the full-communication reference filter.
//! - `Repeat / index = i`: derives the per-repeat master seeds of a sweep.
//!
//! Within a filter stream the draw order is fixed: one uniform for the
//! systematic resampler, then one motion draw per particle in particle
//! order. Sensing draws happen after all motion draws of a step.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream families carved out of one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    World = 0,
    Placement = 1,
    Sense = 2,
    Filter = 3,
    Comms = 4,
    Reference = 5,
    Repeat = 6,
}

/// An independent ChaCha stream for `(master, domain, index)`.
pub fn stream(master: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(((domain as u64) << 32) ^ index);
    rng
}

/// Master seed of the i-th repeat in a sweep.
pub fn repeat_seed(master: u64, repeat: u64) -> u64 {
    stream(master, Domain::Repeat, repeat).next_u64()
}
