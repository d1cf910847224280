//! Occlusion-aware sensing.
//!
//! A measurement records the set of cells an agent could see at one step
//! (its footprint) together with at most one reported target detection
//! inside that footprint. Seeing *nothing* is evidence too: the likelihood
//! of an empty detection is below one inside the footprint and exactly one
//! outside it, so absence of a detection pushes belief mass out of the
//! sensed region without ever zeroing cells the sensor could not observe.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{visible_cells, AgentPose, Cell, Fov, GridMap};
use crate::{AgentId, Timestep};

/// Detection model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorParams {
    /// Probability that a target inside the footprint produces a detection.
    pub p_detect: f64,
    /// Probability mass that a detection reports a uniformly chosen other
    /// footprint cell instead of the true cell.
    pub pos_noise: f64,
    /// Chebyshev sensing range in cells.
    pub max_range: u32,
    pub fov: Fov,
}

impl SensorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_detect > 0.0 && self.p_detect <= 1.0) {
            return Err(Error::Validation(format!(
                "p_detect must be in (0,1], got {}",
                self.p_detect
            )));
        }
        if !(0.0..1.0).contains(&self.pos_noise) {
            return Err(Error::Validation(format!(
                "pos_noise must be in [0,1), got {}",
                self.pos_noise
            )));
        }
        Ok(())
    }
}

/// Globally unique measurement id: each agent senses once per step, so the
/// (agent, time) pair needs no coordination. Rendered as one token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MeasurementId {
    pub agent: AgentId,
    pub time: Timestep,
}

impl fmt::Display for MeasurementId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a{}t{}", self.agent.0, self.time)
    }
}

impl MeasurementId {
    /// Packed scalar form used by the flat wire encoding.
    pub fn token(&self) -> u64 {
        ((self.agent.0 as u64) << 32) | self.time as u64
    }
}

/// One time-stamped, agent-attributed sensor reading; the unit of
/// communication. `visible` is kept sorted so serialization is byte-stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub id: MeasurementId,
    pub agent: AgentId,
    pub time: Timestep,
    pub visible: Vec<Cell>,
    pub detection: Option<Cell>,
}

impl Measurement {
    pub fn new(
        agent: AgentId,
        time: Timestep,
        mut visible: Vec<Cell>,
        detection: Option<Cell>,
    ) -> Self {
        visible.sort_unstable();
        visible.dedup();
        Measurement {
            id: MeasurementId { agent, time },
            agent,
            time,
            visible,
            detection,
        }
    }

    pub fn footprint_contains(&self, c: Cell) -> bool {
        self.visible.binary_search(&c).is_ok()
    }

    /// Scalar count of the flat encoding: id + agent + time, two scalars
    /// per footprint cell, two more when a detection is present.
    pub fn scalar_cost(&self) -> u64 {
        3 + 2 * self.visible.len() as u64 + if self.detection.is_some() { 2 } else { 0 }
    }

    /// Canonical flat encoding. Field order: id, agent, time, footprint
    /// cells (sorted), detection. The length always equals
    /// [`Measurement::scalar_cost`].
    pub fn to_scalars(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scalar_cost() as usize);
        out.push(self.id.token() as f64);
        out.push(self.agent.0 as f64);
        out.push(self.time as f64);
        for c in &self.visible {
            out.push(c.x as f64);
            out.push(c.y as f64);
        }
        if let Some(d) = self.detection {
            out.push(d.x as f64);
            out.push(d.y as f64);
        }
        out
    }
}

/// Simulates one sensor reading of `target` from `pose` at `time`.
///
/// The footprint is [`visible_cells`]. A visible target is detected with
/// probability `p_detect`; a detection reports the true cell with
/// probability `1 - pos_noise` and a uniformly chosen other footprint cell
/// otherwise (with a single-cell footprint the noise collapses onto the
/// true cell). An invisible target never produces a detection.
pub fn sense(
    map: &GridMap,
    pose: &AgentPose,
    params: &SensorParams,
    target: Cell,
    time: Timestep,
    agent: AgentId,
    rng: &mut impl Rng,
) -> Result<Measurement> {
    if !map.is_free(target) {
        return Err(Error::Domain(format!("target {} is blocked or out of bounds", target)));
    }
    let visible = visible_cells(map, pose, params.max_range, params.fov)?;
    let mut detection = None;
    if visible.contains(&target) {
        let detected: bool = rng.gen::<f64>() < params.p_detect;
        if detected {
            let noisy: bool = rng.gen::<f64>() < params.pos_noise;
            detection = Some(if noisy && visible.len() > 1 {
                let k = rng.gen_range(0..visible.len() - 1);
                *visible.iter().filter(|&&c| c != target).nth(k).expect("other cell")
            } else {
                target
            });
        }
    }
    Ok(Measurement::new(agent, time, visible.into_iter().collect(), detection))
}

/// Exact probability of the measurement's detection outcome given the
/// target at `x`, under the [`sense`] model.
pub fn likelihood(m: &Measurement, x: Cell, params: &SensorParams) -> Result<f64> {
    if let Some(d) = m.detection {
        if !m.footprint_contains(d) {
            return Err(Error::MalformedMeasurement(format!(
                "detection {} outside footprint of {}",
                d, m.id
            )));
        }
    }
    let v = m.visible.len();
    if !m.footprint_contains(x) {
        // Outside the footprint the sensor is blind: no detection is
        // certain, any detection impossible.
        return Ok(match m.detection {
            None => 1.0,
            Some(_) => 0.0,
        });
    }
    Ok(match m.detection {
        None => 1.0 - params.p_detect,
        Some(d) if d == x => {
            let mut p = params.p_detect * (1.0 - params.pos_noise);
            if v == 1 {
                p += params.p_detect * params.pos_noise;
            }
            p
        }
        Some(_) => params.p_detect * params.pos_noise / (v as f64 - 1.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::Heading;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn open_map(w: usize, h: usize) -> GridMap {
        let row: String = ".".repeat(w) + "\n";
        GridMap::parse(&row.repeat(h)).unwrap()
    }

    fn params(p_detect: f64, pos_noise: f64, max_range: u32) -> SensorParams {
        SensorParams { p_detect, pos_noise, max_range, fov: Fov::Full }
    }

    #[test]
    fn invisible_target_never_detected() {
        let map = open_map(9, 1);
        let pose = AgentPose::new(Cell::new(0, 0), Heading::E);
        let p = params(1.0, 0.0, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let m = sense(&map, &pose, &p, Cell::new(8, 0), 1, AgentId(0), &mut rng).unwrap();
            assert_eq!(m.detection, None);
        }
    }

    #[test]
    fn perfect_sensor_reports_true_cell() {
        let map = open_map(5, 5);
        let pose = AgentPose::new(Cell::new(2, 2), Heading::N);
        let p = params(1.0, 0.0, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = sense(&map, &pose, &p, Cell::new(3, 3), 1, AgentId(0), &mut rng).unwrap();
        assert_eq!(m.detection, Some(Cell::new(3, 3)));
    }

    #[test]
    fn detection_rate_matches_p_detect() {
        let map = open_map(5, 5);
        let pose = AgentPose::new(Cell::new(2, 2), Heading::N);
        let p = params(0.7, 0.1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let trials = 100_000;
        let mut hits = 0;
        for _ in 0..trials {
            let m = sense(&map, &pose, &p, Cell::new(1, 1), 1, AgentId(0), &mut rng).unwrap();
            if m.detection.is_some() {
                hits += 1;
            }
        }
        let freq = hits as f64 / trials as f64;
        let se = (0.7 * 0.3 / trials as f64).sqrt();
        assert!((freq - 0.7).abs() < 3.0 * se, "freq {freq}");
    }

    #[test]
    fn likelihood_of_outcomes() {
        let map = open_map(5, 5);
        let pose = AgentPose::new(Cell::new(2, 2), Heading::N);
        // 5x5 fully visible at range 2 from the center: |visible| = 25.
        let visible = visible_cells(&map, &pose, 2, Fov::Full).unwrap();
        assert_eq!(visible.len(), 25);

        let p = params(0.9, 0.05, 2);
        let none = Measurement::new(AgentId(0), 1, visible.iter().copied().collect(), None);
        // Outside the footprint there is nothing outside on this map, so
        // build a smaller footprint for that case.
        let small = Measurement::new(
            AgentId(0),
            1,
            vec![Cell::new(0, 0), Cell::new(1, 0)],
            None,
        );
        assert_eq!(likelihood(&small, Cell::new(4, 4), &p).unwrap(), 1.0);
        assert!((likelihood(&none, Cell::new(2, 2), &p).unwrap() - 0.1).abs() < 1e-15);

        // Ten-cell footprint, detection at the true cell.
        let cells: Vec<Cell> = (0..10).map(|i| Cell::new(i, 0)).collect();
        let hit = Measurement::new(AgentId(0), 1, cells.clone(), Some(Cell::new(3, 0)));
        let l = likelihood(&hit, Cell::new(3, 0), &p).unwrap();
        assert!((l - 0.855).abs() < 1e-12, "got {l}");
        // Detection elsewhere in the footprint.
        let l = likelihood(&hit, Cell::new(4, 0), &p).unwrap();
        assert!((l - 0.9 * 0.05 / 9.0).abs() < 1e-15);
        // Detection present, target outside footprint: impossible.
        let l = likelihood(&hit, Cell::new(0, 5), &p).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn likelihood_rejects_detection_outside_footprint() {
        let m = Measurement::new(AgentId(0), 1, vec![Cell::new(0, 0)], Some(Cell::new(5, 5)));
        let p = params(0.9, 0.05, 2);
        assert!(matches!(
            likelihood(&m, Cell::new(0, 0), &p),
            Err(Error::MalformedMeasurement(_))
        ));
    }

    #[test]
    fn likelihood_sums_to_one_over_outcomes() {
        let p = params(0.9, 0.05, 2);
        let cells: Vec<Cell> = (0..7).map(|i| Cell::new(i, 0)).collect();
        for &x in cells.iter().chain([Cell::new(20, 20)].iter()) {
            let mut total = likelihood(
                &Measurement::new(AgentId(0), 1, cells.clone(), None),
                x,
                &p,
            )
            .unwrap();
            for &d in &cells {
                total += likelihood(
                    &Measurement::new(AgentId(0), 1, cells.clone(), Some(d)),
                    x,
                    &p,
                )
                .unwrap();
            }
            assert!((total - 1.0).abs() < 1e-12, "outcome mass {total} at {x}");
        }
        // Single-cell footprint: noise mass collapses onto the true cell.
        let one = vec![Cell::new(0, 0)];
        let mut total = likelihood(&Measurement::new(AgentId(0), 1, one.clone(), None), Cell::new(0, 0), &p).unwrap();
        total += likelihood(
            &Measurement::new(AgentId(0), 1, one.clone(), Some(Cell::new(0, 0))),
            Cell::new(0, 0),
            &p,
        )
        .unwrap();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sense_frequencies_match_likelihood() {
        let map = open_map(4, 1);
        let pose = AgentPose::new(Cell::new(1, 0), Heading::E);
        let p = params(0.8, 0.2, 2);
        let target = Cell::new(2, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trials = 100_000;
        let mut counts: HashMap<Option<Cell>, usize> = HashMap::new();
        let mut footprint = Vec::new();
        for _ in 0..trials {
            let m = sense(&map, &pose, &p, target, 1, AgentId(0), &mut rng).unwrap();
            footprint = m.visible.clone();
            *counts.entry(m.detection).or_default() += 1;
        }
        let proto = Measurement::new(AgentId(0), 1, footprint.clone(), None);
        let outcomes: Vec<Option<Cell>> =
            std::iter::once(None).chain(footprint.iter().map(|&c| Some(c))).collect();
        for outcome in outcomes {
            let m = Measurement { detection: outcome, ..proto.clone() };
            let prob = likelihood(&m, target, &p).unwrap();
            if prob < 0.01 {
                continue;
            }
            let freq = *counts.get(&outcome).unwrap_or(&0) as f64 / trials as f64;
            let se = (prob * (1.0 - prob) / trials as f64).sqrt();
            assert!(
                (freq - prob).abs() < 3.0 * se,
                "outcome {:?}: freq {} vs prob {}",
                outcome,
                freq,
                prob
            );
        }
    }

    #[test]
    fn scalar_encoding_length_matches_cost() {
        let cells: Vec<Cell> = (0..4).map(|i| Cell::new(i, 0)).collect();
        let with = Measurement::new(AgentId(3), 9, cells.clone(), Some(Cell::new(1, 0)));
        assert_eq!(with.scalar_cost(), 13);
        assert_eq!(with.to_scalars().len() as u64, with.scalar_cost());
        let without = Measurement::new(AgentId(3), 9, cells, None);
        assert_eq!(without.to_scalars().len() as u64, without.scalar_cost());
    }
}
