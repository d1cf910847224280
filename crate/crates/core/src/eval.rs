//! Ground-truth machinery: exact discrete filtering, the full-communication
//! reference filter, the Laplace-smoothed grid KL metric, and the static
//! evidence-combination rule (plus its deliberately wrong dynamic cousin).
//!
//! The state space is a small grid, so the exact posterior is a dense
//! forward pass over free cells: multiply in every measurement likelihood
//! at its own step, renormalize, and push the mass through the motion
//! kernel between steps. No likelihood floor is applied here; this is the
//! exact model the particle filters approximate.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::filter::{init_belief, FilterParams, Prior};
use crate::sensor::{likelihood, Measurement, SensorParams};
use crate::world::{Cell, GridMap, MotionParams};
use crate::Timestep;

/// Default ceiling on `free cells x steps` for the dense oracle.
pub const DEFAULT_ORACLE_BUDGET: usize = 50_000_000;

/// A probability distribution over the free cells of one map.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDist {
    width: i32,
    height: i32,
    mass: Vec<f64>,
    free: Vec<bool>,
}

impl GridDist {
    /// All-zero masses; callers fill and normalize.
    pub fn zeros(map: &GridMap) -> GridDist {
        GridDist {
            width: map.width(),
            height: map.height(),
            mass: vec![0.0; map.cell_count()],
            free: map.free_mask(),
        }
    }

    pub fn uniform_free(map: &GridMap) -> GridDist {
        let mut d = GridDist::zeros(map);
        let p = 1.0 / map.free_count() as f64;
        for i in 0..d.mass.len() {
            if d.free[i] {
                d.mass[i] = p;
            }
        }
        d
    }

    pub fn point_mass(map: &GridMap, cell: Cell) -> Result<GridDist> {
        if !map.is_free(cell) {
            return Err(Error::Domain(format!("cell {} is blocked or out of bounds", cell)));
        }
        let mut d = GridDist::zeros(map);
        let idx = map.index(cell);
        d.mass[idx] = 1.0;
        Ok(d)
    }

    /// Uniform over an explicit set of free cells.
    pub fn uniform_over(map: &GridMap, cells: &[Cell]) -> Result<GridDist> {
        if cells.is_empty() {
            return Err(Error::Validation("empty prior region".into()));
        }
        let mut d = GridDist::zeros(map);
        let p = 1.0 / cells.len() as f64;
        for &c in cells {
            if !map.is_free(c) {
                return Err(Error::Domain(format!("prior cell {} is blocked or out of bounds", c)));
            }
            d.mass[map.index(c)] += p;
        }
        Ok(d)
    }

    pub fn width(&self) -> i32 {
        self.width
    }

    pub fn height(&self) -> i32 {
        self.height
    }

    fn index(&self, c: Cell) -> Option<usize> {
        if c.x >= 0 && c.x < self.width && c.y >= 0 && c.y < self.height {
            Some((c.y * self.width + c.x) as usize)
        } else {
            None
        }
    }

    pub fn mass_at(&self, c: Cell) -> f64 {
        self.index(c).map_or(0.0, |i| self.mass[i])
    }

    pub(crate) fn add_mass(&mut self, c: Cell, w: f64) {
        let i = self.index(c).expect("cell within map");
        debug_assert!(self.free[i], "mass on blocked cell {c}");
        self.mass[i] += w;
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// Total mass inside a region of interest.
    pub fn mass_of(&self, cells: &[Cell]) -> f64 {
        cells.iter().map(|&c| self.mass_at(c)).sum()
    }

    pub fn free_count(&self) -> usize {
        self.free.iter().filter(|&&f| f).count()
    }

    pub fn normalize(&mut self) -> Result<()> {
        let total = self.total_mass();
        if total <= 0.0 {
            return Err(Error::DegenerateEvidence("all cell masses are zero".into()));
        }
        for m in &mut self.mass {
            *m /= total;
        }
        Ok(())
    }

    fn same_support(&self, other: &GridDist) -> bool {
        self.width == other.width && self.height == other.height && self.free == other.free
    }

    /// CSV export with a fixed `x,y,mass` header, free cells in row-major
    /// order.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,mass\n");
        for y in 0..self.height {
            for x in 0..self.width {
                let i = (y * self.width + x) as usize;
                if self.free[i] {
                    s.push_str(&format!("{},{},{}\n", x, y, self.mass[i]));
                }
            }
        }
        s
    }
}

/// Laplace-smoothed KL divergence between two distributions over the same
/// map, in nats. Each free-cell mass h becomes `(h + alpha) / (1 + alpha F)`
/// with `F` free cells; blocked cells take no pseudocount and no part in
/// the sum.
pub fn kl_grid(p: &GridDist, q: &GridDist, alpha: f64) -> Result<f64> {
    if !p.same_support(q) {
        return Err(Error::Domain("distributions are over different maps".into()));
    }
    if alpha <= 0.0 {
        return Err(Error::Validation(format!("alpha must be positive, got {alpha}")));
    }
    let f = p.free_count() as f64;
    let denom = 1.0 + alpha * f;
    let mut kl = 0.0;
    for i in 0..p.mass.len() {
        if !p.free[i] {
            continue;
        }
        let ps = (p.mass[i] + alpha) / denom;
        let qs = (q.mass[i] + alpha) / denom;
        kl += ps * (ps / qs).ln();
    }
    Ok(kl.max(0.0))
}

/// Measurements grouped by the step they apply to.
pub type EvidenceByStep = BTreeMap<Timestep, Vec<Measurement>>;

/// Groups a flat measurement list by step, ordering each step's entries by
/// (agent, id) so replays and oracle passes are deterministic.
pub fn group_by_step<'a>(ms: impl IntoIterator<Item = &'a Measurement>) -> EvidenceByStep {
    let mut by_step: EvidenceByStep = BTreeMap::new();
    for m in ms {
        by_step.entry(m.time).or_default().push(m.clone());
    }
    for v in by_step.values_mut() {
        v.sort_by_key(|m| (m.agent, m.id));
    }
    by_step
}

fn apply_evidence(
    dist: &mut GridDist,
    map: &GridMap,
    sensor: &SensorParams,
    ms: &[Measurement],
) -> Result<()> {
    if ms.is_empty() {
        return Ok(());
    }
    for c in map.free_cells() {
        let i = map.index(c);
        let mut l = 1.0;
        for m in ms {
            l *= likelihood(m, c, sensor)?;
        }
        dist.mass[i] *= l;
    }
    dist.normalize()
}

fn apply_transition(dist: &GridDist, map: &GridMap, motion: &MotionParams) -> GridDist {
    let mut next = GridDist::zeros(map);
    let q = (1.0 - motion.p_stay) / 4.0;
    for c in map.free_cells() {
        let m = dist.mass[map.index(c)];
        if m == 0.0 {
            continue;
        }
        let mut stay = motion.p_stay;
        for (dx, dy) in [(0, -1), (1, 0), (0, 1), (-1, 0)] {
            let n = Cell::new(c.x + dx, c.y + dy);
            if map.is_free(n) {
                next.mass[map.index(n)] += m * q;
            } else {
                stay += q;
            }
        }
        next.mass[map.index(c)] += m * stay;
    }
    next
}

/// Exact filtered marginals for steps `0..=t_end`, given every measurement.
///
/// Step 0 is the prior with step-0 evidence applied; each later step pushes
/// the mass through the motion kernel and multiplies in that step's
/// measurement likelihoods. Contradictory evidence (total mass zero, only
/// possible with hard-zero likelihoods) is an error, as is exceeding the
/// dense-computation budget.
pub fn brute_force_marginals(
    map: &GridMap,
    motion: &MotionParams,
    sensor: &SensorParams,
    prior: &GridDist,
    measurements: &EvidenceByStep,
    t_end: Timestep,
    budget: usize,
) -> Result<Vec<GridDist>> {
    let work = map.free_count() * (t_end as usize + 1);
    if work > budget {
        return Err(Error::Capacity(format!(
            "dense oracle needs {} cell-steps, budget is {}",
            work, budget
        )));
    }
    let empty = Vec::new();
    let mut dist = prior.clone();
    apply_evidence(&mut dist, map, sensor, measurements.get(&0).unwrap_or(&empty))?;
    let mut out = Vec::with_capacity(t_end as usize + 1);
    out.push(dist.clone());
    for t in 1..=t_end {
        dist = apply_transition(&dist, map, motion);
        apply_evidence(&mut dist, map, sensor, measurements.get(&t).unwrap_or(&empty))?;
        out.push(dist.clone());
    }
    Ok(out)
}

/// Exact filtered marginal at `t_end`. See [`brute_force_marginals`].
pub fn brute_force_posterior(
    map: &GridMap,
    motion: &MotionParams,
    sensor: &SensorParams,
    prior: &GridDist,
    measurements: &EvidenceByStep,
    t_end: Timestep,
) -> Result<GridDist> {
    let mut all = brute_force_marginals(
        map,
        motion,
        sensor,
        prior,
        measurements,
        t_end,
        DEFAULT_ORACLE_BUDGET,
    )?;
    Ok(all.pop().expect("at least the prior"))
}

/// Runs one particle filter over everybody's measurements and returns its
/// per-step marginals for `0..=t_end`; the reference posterior that
/// decentralized agents are scored against.
pub fn full_comm_filter(
    map: &GridMap,
    motion: &MotionParams,
    sensor: &SensorParams,
    params: &FilterParams,
    prior: &Prior,
    measurements: &EvidenceByStep,
    t_end: Timestep,
    rng: &mut impl Rng,
) -> Result<Vec<GridDist>> {
    let mut belief = init_belief(map, prior, params, rng)?;
    let empty = Vec::new();
    for m in measurements.get(&0).unwrap_or(&empty) {
        belief.incorporate(m, sensor, params.weight_floor)?;
    }
    let mut out = Vec::with_capacity(t_end as usize + 1);
    out.push(belief.marginal_at(map, 0)?);
    for t in 1..=t_end {
        belief.propagate(map, motion, rng);
        for m in measurements.get(&t).unwrap_or(&empty) {
            belief.incorporate(m, sensor, params.weight_floor)?;
        }
        out.push(belief.marginal_at(map, t)?);
    }
    Ok(out)
}

/// Combines local posteriors over the same *static* state into the joint
/// posterior: `prior(x) * prod_i local_i(x) / prior(x)`, normalized. Exact
/// when the agents' observations are conditionally independent given x.
pub fn combine_static_evidence(prior: &[f64], locals: &[Vec<f64>]) -> Result<Vec<f64>> {
    for local in locals {
        if local.len() != prior.len() {
            return Err(Error::Domain("local posterior over a different support".into()));
        }
    }
    let mut post = Vec::with_capacity(prior.len());
    for (x, &p) in prior.iter().enumerate() {
        let mut m = p;
        for local in locals {
            if p <= 0.0 {
                if local[x] > 0.0 {
                    return Err(Error::Domain(format!(
                        "local posterior positive at state {x} where prior is zero"
                    )));
                }
                m = 0.0;
            } else {
                m *= local[x] / p;
            }
        }
        post.push(m);
    }
    let total: f64 = post.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateEvidence("combined posterior is all zero".into()));
    }
    for v in &mut post {
        *v /= total;
    }
    Ok(post)
}

/// The static combination rule applied to *momentary* marginals of a moving
/// target. This is the estimator that dynamic state breaks; it exists so
/// the failure can be demonstrated, not for production use.
pub fn momentary_product(marginals: &[GridDist], prior: &GridDist) -> Result<GridDist> {
    if marginals.is_empty() {
        return Err(Error::Validation("no marginals to combine".into()));
    }
    for m in marginals {
        if !m.same_support(prior) {
            return Err(Error::Domain("marginal over a different map".into()));
        }
    }
    let mut out = prior.clone();
    for i in 0..out.mass.len() {
        if !out.free[i] {
            continue;
        }
        let p = prior.mass[i];
        for m in marginals {
            if p <= 0.0 {
                if m.mass[i] > 0.0 {
                    return Err(Error::Domain(
                        "marginal positive where the prior has zero mass".into(),
                    ));
                }
                out.mass[i] = 0.0;
            } else {
                out.mass[i] *= m.mass[i] / p;
            }
        }
    }
    out.normalize()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{visible_cells, AgentPose, Fov, Heading};
    use crate::AgentId;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn open_map(w: usize, h: usize) -> GridMap {
        let row: String = ".".repeat(w) + "\n";
        GridMap::parse(&row.repeat(h)).unwrap()
    }

    fn sensor() -> SensorParams {
        SensorParams { p_detect: 0.9, pos_noise: 0.05, max_range: 2, fov: Fov::Full }
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let map = open_map(3, 3);
        let d = GridDist::uniform_free(&map);
        assert_eq!(kl_grid(&d, &d, 0.01).unwrap(), 0.0);
    }

    #[test]
    fn kl_two_cell_point_masses() {
        let map = open_map(2, 1);
        let p = GridDist::point_mass(&map, Cell::new(0, 0)).unwrap();
        let q = GridDist::point_mass(&map, Cell::new(1, 0)).unwrap();
        let alpha = 0.01;
        // Independent scalar computation of the two-cell closed form.
        let ps: [f64; 2] = [(1.0 + alpha) / (1.0 + 2.0 * alpha), alpha / (1.0 + 2.0 * alpha)];
        let qs = [ps[1], ps[0]];
        let expect = ps[0] * (ps[0] / qs[0]).ln() + ps[1] * (ps[1] / qs[1]).ln();
        let got = kl_grid(&p, &q, alpha).unwrap();
        assert!((got - expect).abs() < 1e-12);
        assert!((got - 4.52).abs() < 0.01, "got {got}");
    }

    #[test]
    fn kl_vanishes_as_alpha_grows() {
        let map = open_map(2, 1);
        let p = GridDist::point_mass(&map, Cell::new(0, 0)).unwrap();
        let q = GridDist::point_mass(&map, Cell::new(1, 0)).unwrap();
        let big = kl_grid(&p, &q, 1.0).unwrap();
        let huge = kl_grid(&p, &q, 1e6).unwrap();
        assert!(huge < big);
        assert!(huge < 1e-5);
    }

    #[test]
    fn kl_rejects_mismatched_maps() {
        let a = GridDist::uniform_free(&open_map(2, 2));
        let b = GridDist::uniform_free(&open_map(3, 2));
        assert!(kl_grid(&a, &b, 0.01).is_err());
    }

    #[test]
    fn oracle_without_evidence_and_motion_keeps_prior() {
        let map = open_map(4, 3);
        let prior = GridDist::uniform_free(&map);
        let post = brute_force_posterior(
            &map,
            &MotionParams { p_stay: 1.0 },
            &sensor(),
            &prior,
            &EvidenceByStep::new(),
            5,
        )
        .unwrap();
        assert_eq!(post, prior);
    }

    /// One diffusion step on a 3-cell corridor, checked against an
    /// independent dense matrix-vector product built from transition_prob.
    #[test]
    fn oracle_single_diffusion_step_on_corridor() {
        let map = open_map(3, 1);
        let motion = MotionParams { p_stay: 0.5 };
        let cells = map.free_cells();

        let dense_step = |prior: &GridDist| -> Vec<f64> {
            let mut expect = vec![0.0; cells.len()];
            for &from in &cells {
                for (j, &to) in cells.iter().enumerate() {
                    expect[j] += prior.mass_at(from)
                        * crate::world::transition_prob(&map, &motion, from, to).unwrap();
                }
            }
            expect
        };

        // The kernel is symmetric, so the uniform prior is stationary.
        let uniform = GridDist::uniform_free(&map);
        let post =
            brute_force_posterior(&map, &motion, &sensor(), &uniform, &EvidenceByStep::new(), 1)
                .unwrap();
        for (j, &to) in cells.iter().enumerate() {
            assert!((post.mass_at(to) - dense_step(&uniform)[j]).abs() < 1e-15);
            assert!((post.mass_at(to) - 1.0 / 3.0).abs() < 1e-12);
        }

        // Point mass at the left end: stay mass 0.5 + 3 collapsed moves.
        let point = GridDist::point_mass(&map, Cell::new(0, 0)).unwrap();
        let post =
            brute_force_posterior(&map, &motion, &sensor(), &point, &EvidenceByStep::new(), 1)
                .unwrap();
        let expect = dense_step(&point);
        for (j, &to) in cells.iter().enumerate() {
            assert!((post.mass_at(to) - expect[j]).abs() < 1e-15);
        }
        assert!((post.mass_at(Cell::new(0, 0)) - 0.875).abs() < 1e-12);
        assert!((post.mass_at(Cell::new(1, 0)) - 0.125).abs() < 1e-12);
        assert!((post.mass_at(Cell::new(2, 0)) - 0.0).abs() < 1e-15);
    }

    #[test]
    fn oracle_perfect_detection_is_point_mass() {
        let map = open_map(5, 5);
        let pose = AgentPose::new(Cell::new(2, 2), Heading::N);
        let params = SensorParams { p_detect: 1.0, pos_noise: 0.0, max_range: 2, fov: Fov::Full };
        let footprint: Vec<Cell> =
            visible_cells(&map, &pose, 2, Fov::Full).unwrap().into_iter().collect();
        let hit = Measurement::new(AgentId(0), 1, footprint, Some(Cell::new(3, 1)));
        let mut ev = EvidenceByStep::new();
        ev.insert(1, vec![hit]);
        let post = brute_force_posterior(
            &map,
            &MotionParams { p_stay: 0.5 },
            &params,
            &GridDist::uniform_free(&map),
            &ev,
            1,
        )
        .unwrap();
        assert!((post.mass_at(Cell::new(3, 1)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_budget_is_enforced() {
        let map = open_map(10, 10);
        let err = brute_force_marginals(
            &map,
            &MotionParams { p_stay: 0.5 },
            &sensor(),
            &GridDist::uniform_free(&map),
            &EvidenceByStep::new(),
            10,
            100,
        );
        assert!(matches!(err, Err(Error::Capacity(_))));
    }

    #[test]
    fn combine_static_identity_and_example() {
        let prior = vec![0.5, 0.5];
        let local = vec![0.8, 0.2];
        let got = combine_static_evidence(&prior, &[local.clone()]).unwrap();
        assert!((got[0] - 0.8).abs() < 1e-15);

        let got = combine_static_evidence(&prior, &[local.clone(), local]).unwrap();
        assert!((got[0] - 0.64 / 0.68).abs() < 1e-12);
        assert!((got[1] - 0.04 / 0.68).abs() < 1e-12);

        let same = combine_static_evidence(&prior, &[prior.clone(), prior.clone()]).unwrap();
        assert!((same[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn combine_static_matches_joint_bayes_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let n = 10;
            let prior: Vec<f64> = {
                let raw: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 0.05).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            };
            let n_agents = rng.gen_range(1..5);
            let liks: Vec<Vec<f64>> =
                (0..n_agents).map(|_| (0..n).map(|_| rng.gen::<f64>() + 0.01).collect()).collect();
            let locals: Vec<Vec<f64>> = liks
                .iter()
                .map(|lik| {
                    let raw: Vec<f64> = prior.iter().zip(lik).map(|(p, l)| p * l).collect();
                    let s: f64 = raw.iter().sum();
                    raw.into_iter().map(|v| v / s).collect()
                })
                .collect();
            // Brute-force joint Bayes over the product of likelihoods.
            let joint: Vec<f64> = {
                let raw: Vec<f64> = (0..n)
                    .map(|x| prior[x] * liks.iter().map(|l| l[x]).product::<f64>())
                    .collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            };
            let got = combine_static_evidence(&prior, &locals).unwrap();
            for x in 0..n {
                assert!((got[x] - joint[x]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn combine_static_rejects_zero_prior_with_positive_local() {
        let prior = vec![1.0, 0.0];
        let local = vec![0.5, 0.5];
        assert!(combine_static_evidence(&prior, &[local]).is_err());
    }

    #[test]
    fn momentary_product_identity_cases() {
        let map = open_map(3, 1);
        let prior = GridDist::uniform_free(&map);
        let single = GridDist::point_mass(&map, Cell::new(1, 0)).unwrap();
        let got = momentary_product(std::slice::from_ref(&single), &prior).unwrap();
        assert_eq!(got, single);
        let same = momentary_product(&[prior.clone(), prior.clone()], &prior).unwrap();
        for c in map.free_cells() {
            assert!((same.mass_at(c) - prior.mass_at(c)).abs() < 1e-15);
        }
    }

    #[test]
    fn grid_dist_csv_shape() {
        let map = GridMap::parse(".#\n..\n").unwrap();
        let d = GridDist::uniform_free(&map);
        let csv = d.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "x,y,mass");
        assert_eq!(lines.len(), 1 + 3);
    }
}
