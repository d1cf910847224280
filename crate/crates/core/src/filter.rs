//! Per-agent trajectory particle filter over a sliding history window.
//!
//! Each particle is a whole state trajectory, not just the newest state, so
//! a measurement that refers to an earlier step can still reweight the
//! belief: its likelihood is evaluated at the trajectory entry for that
//! step. Propagation resamples an ancestor by weight (systematically, from
//! one uniform draw) and extends it with one motion draw, every step.
//!
//! The filter keeps a ring of snapshots, one per retained step, each taken
//! right after propagation and before that step's measurements are folded
//! in. When evidence arrives late, [`ParticleBelief::resimulate`] rolls the
//! belief back to the snapshot at the evidence's step and replays forward,
//! incorporating everything in the [`MeasurementDb`] at its proper time.
//! States, snapshots and stored measurements older than `now - window` are
//! discarded.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::eval::GridDist;
use crate::sensor::{likelihood, Measurement, MeasurementId, SensorParams};
use crate::world::{step_target, Cell, GridMap, MotionParams};
use crate::Timestep;

/// Sizing and robustness knobs of one filter.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FilterParams {
    pub n_particles: usize,
    /// History window length in steps; states and measurements older than
    /// `now - window` are dropped.
    pub window: u32,
    /// Likelihoods are clamped to at least this value before weights are
    /// renormalized, so one contradicting measurement cannot zero the
    /// whole particle set.
    pub weight_floor: f64,
}

impl FilterParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles < 2 {
            return Err(Error::Validation(format!(
                "n_particles must be at least 2, got {}",
                self.n_particles
            )));
        }
        if self.window < 1 {
            return Err(Error::Validation("window must be at least 1".into()));
        }
        if !(self.weight_floor > 0.0 && self.weight_floor <= 1e-3) {
            return Err(Error::Validation(format!(
                "weight_floor must be in (0, 1e-3], got {}",
                self.weight_floor
            )));
        }
        Ok(())
    }
}

/// Initial belief over the target cell.
#[derive(Debug, Clone, PartialEq)]
pub enum Prior {
    UniformFree,
    /// Uniform over an explicit set of free cells.
    Cells(Vec<Cell>),
}

/// One weighted state trajectory covering `[window_start, now]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryParticle {
    pub states: Vec<Cell>,
    pub weight: f64,
}

/// Particle set as it stood right after propagating to `time`, before any
/// measurement at `time` was incorporated. Stored flat to keep the ring
/// cheap.
#[derive(Debug, Clone)]
struct Snapshot {
    time: Timestep,
    window_start: Timestep,
    len: usize,
    states: Vec<Cell>,
    weights: Vec<f64>,
}

/// Weighted trajectory ensemble plus its snapshot ring.
#[derive(Debug, Clone)]
pub struct ParticleBelief {
    particles: Vec<TrajectoryParticle>,
    window_start: Timestep,
    now: Timestep,
    window: u32,
    snapshots: VecDeque<Snapshot>,
}

/// Draws `n` ancestor indices proportional to `weights` from the single
/// uniform `u`, in nondecreasing order.
fn systematic_ancestors(weights: &[f64], u: f64) -> Vec<usize> {
    let n = weights.len();
    let mut ancestors = Vec::with_capacity(n);
    let mut i = 0usize;
    let mut cum = weights[0];
    for k in 0..n {
        let pos = (k as f64 + u) / n as f64;
        while cum < pos && i + 1 < n {
            i += 1;
            cum += weights[i];
        }
        ancestors.push(i);
    }
    ancestors
}

/// Samples `params.n_particles` single-state trajectories i.i.d. from the
/// prior with equal weights, at time 0, and takes the first snapshot.
pub fn init_belief(
    map: &GridMap,
    prior: &Prior,
    params: &FilterParams,
    rng: &mut impl Rng,
) -> Result<ParticleBelief> {
    params.validate()?;
    let cells: Vec<Cell> = match prior {
        Prior::UniformFree => map.free_cells(),
        Prior::Cells(cs) => {
            if cs.is_empty() {
                return Err(Error::Validation("empty prior region".into()));
            }
            for &c in cs {
                if !map.is_free(c) {
                    return Err(Error::Validation(format!(
                        "prior cell {} is blocked or out of bounds",
                        c
                    )));
                }
            }
            cs.clone()
        }
    };
    let w = 1.0 / params.n_particles as f64;
    let particles = (0..params.n_particles)
        .map(|_| TrajectoryParticle {
            states: vec![cells[rng.gen_range(0..cells.len())]],
            weight: w,
        })
        .collect();
    let mut belief = ParticleBelief {
        particles,
        window_start: 0,
        now: 0,
        window: params.window,
        snapshots: VecDeque::new(),
    };
    belief.push_snapshot();
    Ok(belief)
}

impl ParticleBelief {
    pub fn now(&self) -> Timestep {
        self.now
    }

    pub fn window_start(&self) -> Timestep {
        self.window_start
    }

    pub fn window(&self) -> u32 {
        self.window
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn particles(&self) -> &[TrajectoryParticle] {
        &self.particles
    }

    fn push_snapshot(&mut self) {
        let len = self.particles[0].states.len();
        let mut states = Vec::with_capacity(self.particles.len() * len);
        let mut weights = Vec::with_capacity(self.particles.len());
        for p in &self.particles {
            states.extend_from_slice(&p.states);
            weights.push(p.weight);
        }
        self.snapshots.push_back(Snapshot {
            time: self.now,
            window_start: self.window_start,
            len,
            states,
            weights,
        });
    }

    fn restore_snapshot(&mut self, time: Timestep) {
        let front = self.snapshots.front().expect("snapshot ring is never empty").time;
        let idx = (time - front) as usize;
        let snap = &self.snapshots[idx];
        self.particles = snap
            .states
            .chunks(snap.len)
            .zip(&snap.weights)
            .map(|(s, &w)| TrajectoryParticle { states: s.to_vec(), weight: w })
            .collect();
        self.window_start = snap.window_start;
        self.now = snap.time;
        self.snapshots.truncate(idx + 1);
    }

    /// Advances to the next step: systematic ancestor resampling, one
    /// motion draw per particle (in particle order), equal weights, a new
    /// snapshot, and window trimming. Consumes exactly `1 + n` draws.
    pub fn propagate(&mut self, map: &GridMap, motion: &MotionParams, rng: &mut impl Rng) {
        let n = self.particles.len();
        let u: f64 = rng.gen();
        let weights: Vec<f64> = self.particles.iter().map(|p| p.weight).collect();
        let ancestors = systematic_ancestors(&weights, u);
        let w = 1.0 / n as f64;
        let mut next = Vec::with_capacity(n);
        for &a in &ancestors {
            let ancestor = &self.particles[a];
            let mut states = Vec::with_capacity(ancestor.states.len() + 1);
            states.extend_from_slice(&ancestor.states);
            let cur = *states.last().expect("non-empty trajectory");
            let stepped = step_target(map, motion, cur, rng).expect("particle states stay free");
            states.push(stepped);
            next.push(TrajectoryParticle { states, weight: w });
        }
        self.particles = next;
        self.now += 1;
        if self.now - self.window_start > self.window {
            self.window_start += 1;
            for p in &mut self.particles {
                p.states.remove(0);
            }
            while self
                .snapshots
                .front()
                .is_some_and(|s| s.time < self.window_start)
            {
                self.snapshots.pop_front();
            }
        }
        self.push_snapshot();
    }

    /// Multiplies each weight by the (floored) likelihood of `m` evaluated
    /// at the trajectory entry for `m.time`, then renormalizes.
    ///
    /// The caller is responsible for not feeding the same measurement
    /// twice; the [`MeasurementDb`] insert flag exists for that. Applying
    /// a measurement with `m.time < now` directly is only meaningful from
    /// within [`ParticleBelief::resimulate`].
    pub fn incorporate(
        &mut self,
        m: &Measurement,
        sensor: &SensorParams,
        floor: f64,
    ) -> Result<()> {
        if m.time < self.window_start || m.time > self.now {
            return Err(Error::StaleMeasurement(format!(
                "measurement {} at step {} is outside the window [{}, {}]",
                m.id, m.time, self.window_start, self.now
            )));
        }
        let idx = (m.time - self.window_start) as usize;
        let liks: Vec<f64> = self
            .particles
            .iter()
            .map(|p| likelihood(m, p.states[idx], sensor).map(|l| l.max(floor)))
            .collect::<Result<_>>()?;
        let mut total = 0.0;
        for (p, l) in self.particles.iter_mut().zip(&liks) {
            p.weight *= l;
            total += p.weight;
        }
        debug_assert!(total > 0.0, "floored likelihoods keep weights positive");
        for p in &mut self.particles {
            p.weight /= total;
        }
        Ok(())
    }

    /// Rolls back to the snapshot at `from` and replays forward to the
    /// current time, incorporating every stored measurement at its own
    /// step (same-step entries ordered by agent, then id). Snapshots for
    /// the replayed range are rewritten. Replay draws come from `rng` in
    /// the same order a fresh [`ParticleBelief::propagate`] run would use.
    pub fn resimulate(
        &mut self,
        db: &MeasurementDb,
        from: Timestep,
        map: &GridMap,
        motion: &MotionParams,
        sensor: &SensorParams,
        floor: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        if from < self.window_start {
            return Err(Error::StaleMeasurement(format!(
                "cannot re-simulate from step {} before window start {}",
                from, self.window_start
            )));
        }
        if from > self.now {
            return Err(Error::Range(format!(
                "cannot re-simulate from future step {} (now {})",
                from, self.now
            )));
        }
        let target = self.now;
        self.restore_snapshot(from);
        for m in db.entries_at(from) {
            self.incorporate(m, sensor, floor)?;
        }
        for s in from + 1..=target {
            self.propagate(map, motion, rng);
            for m in db.entries_at(s) {
                self.incorporate(m, sensor, floor)?;
            }
        }
        Ok(())
    }

    /// Weight histogram of the trajectory entries for step `s`.
    pub fn marginal_at(&self, map: &GridMap, s: Timestep) -> Result<GridDist> {
        if s < self.window_start || s > self.now {
            return Err(Error::Range(format!(
                "step {} outside the window [{}, {}]",
                s, self.window_start, self.now
            )));
        }
        let idx = (s - self.window_start) as usize;
        let mut d = GridDist::zeros(map);
        for p in &self.particles {
            d.add_mass(p.states[idx], p.weight);
        }
        Ok(d)
    }

    /// `1 / sum(w_i^2)`: the weight-degeneracy diagnostic.
    pub fn effective_sample_size(&self) -> f64 {
        let total: f64 = self.particles.iter().map(|p| p.weight).sum();
        let sq: f64 = self.particles.iter().map(|p| (p.weight / total).powi(2)).sum();
        1.0 / sq
    }

    /// Flat text table, one `weight<TAB>state state ...` row per particle.
    pub fn dump_table(&self) -> String {
        let mut s = String::new();
        for p in &self.particles {
            write!(s, "{}\t", p.weight).unwrap();
            let mut first = true;
            for c in &p.states {
                if !first {
                    s.push(' ');
                }
                write!(s, "{}", c).unwrap();
                first = false;
            }
            s.push('\n');
        }
        s
    }
}

/// Per-agent store of fresh measurements, keyed by id. Holds the subset of
/// the network's data this agent has seen, own readings included; it is
/// what query responses are drawn from and what re-simulation replays.
#[derive(Debug, Clone, Default)]
pub struct MeasurementDb {
    entries: BTreeMap<MeasurementId, Measurement>,
}

impl MeasurementDb {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts iff the id is unseen and the measurement is still fresh
    /// (`m.time >= now - window`); also evicts every expired entry. Returns
    /// whether `m` was added. Stale or duplicate input is not an error.
    pub fn insert(&mut self, m: Measurement, now: Timestep, window: u32) -> bool {
        self.evict(now, window);
        if (m.time as i64) < now as i64 - window as i64 {
            return false;
        }
        if self.entries.contains_key(&m.id) {
            return false;
        }
        self.entries.insert(m.id, m);
        true
    }

    pub fn evict(&mut self, now: Timestep, window: u32) {
        let cutoff = now as i64 - window as i64;
        self.entries.retain(|_, m| m.time as i64 >= cutoff);
    }

    pub fn contains(&self, id: MeasurementId) -> bool {
        self.entries.contains_key(&id)
    }

    /// All held ids in ascending order; the exclusion list attached to
    /// queries.
    pub fn ids(&self) -> Vec<MeasurementId> {
        self.entries.keys().copied().collect()
    }

    /// Entries stamped `t`, ordered by (agent, id).
    pub fn entries_at(&self, t: Timestep) -> Vec<&Measurement> {
        let mut out: Vec<&Measurement> =
            self.entries.values().filter(|m| m.time == t).collect();
        out.sort_by_key(|m| (m.agent, m.id));
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = &Measurement> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
