//! Scenario orchestration: configuration, the synchronous simulation loop,
//! neighbor topology, metric logging, and rate sweeps.
//!
//! A run is driven by one master seed and proceeds in lockstep. Each step
//! `t` of `1..=horizon`: the true target moves; every agent propagates its
//! filter to `t`, senses, stores and incorporates its own measurement; on
//! scheduled steps agents communicate (in ascending id order); finally one
//! metrics row per agent is appended. The world phase (target path, poses,
//! measurements) draws from streams separate from the filters and the
//! protocol, so the sensed data of a seed is identical across communication
//! strategies, and the reference posteriors consume exactly the same log.
//!
//! Both phases that touch only per-agent state may run on a thread pool;
//! sequential and parallel execution produce identical output.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::comms::{
    baseline_next, compose_query, select_response, BandwidthLedger, MsgClass,
};
use crate::error::{Error, Result};
use crate::eval::{
    brute_force_marginals, full_comm_filter, group_by_step, kl_grid, GridDist,
    DEFAULT_ORACLE_BUDGET,
};
use crate::filter::{init_belief, FilterParams, MeasurementDb, ParticleBelief, Prior};
use crate::seed::{repeat_seed, stream, Domain};
use crate::sensor::{sense, Measurement, SensorParams};
use crate::world::{step_target, AgentPose, Cell, GridMap, Heading, MotionParams};
use crate::{AgentId, Timestep};

/// Where the target starts and what the filters' prior is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StartSpec {
    /// Uniform over all free cells.
    Uniform,
    Cell { x: i32, y: i32 },
    /// Uniform over an explicit cell set.
    Region { cells: Vec<(i32, i32)> },
}

/// Communication strategy of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommStrategy {
    /// Query-response rounds every `rate` steps with `m_samples`-particle
    /// queries.
    Selective { m_samples: usize, rate: u32 },
    /// Broadcast the own latest measurement to all neighbors every `k`
    /// steps, no queries.
    Baseline { k: u32 },
    /// Every measurement reaches every agent, every step.
    Full,
    /// No communication at all.
    None,
}

/// Which reference posterior the per-step KL is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OracleMode {
    #[default]
    None,
    /// Dense forward pass over free cells given every measurement.
    Exact,
    /// A single particle filter fed every measurement.
    FullComm,
}

/// Map text, either inline or by path (relative paths resolve against the
/// config file's directory at load time).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MapSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inline: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

/// One agent's starting pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSpec {
    pub x: i32,
    pub y: i32,
    #[serde(default = "default_heading")]
    pub heading: Heading,
}

fn default_heading() -> Heading {
    Heading::N
}

/// Agent roster: explicit poses, or a count placed on random distinct free
/// cells from the placement stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AgentSpec {
    #[serde(default)]
    pub poses: Vec<PoseSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
}

/// A scripted pose change: from step `time` on, the agent stands at
/// (x, y). Lets scenarios move trackers along waypoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub agent: u32,
    pub time: Timestep,
    pub x: i32,
    pub y: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heading: Option<Heading>,
}

/// Everything one run needs. Serializable to/from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub seed: u64,
    pub horizon: Timestep,
    pub k_nbr: usize,
    pub target_start: StartSpec,
    #[serde(default)]
    pub oracle: OracleMode,
    /// Laplace pseudocount for the KL metric; defaults to 1/|free cells|.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub parallel: bool,
    pub map: MapSpec,
    pub motion: MotionParams,
    pub sensor: SensorParams,
    pub filter: FilterParams,
    pub comms: CommStrategy,
    pub agents: AgentSpec,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub waypoints: Vec<Waypoint>,
}

fn default_name() -> String {
    "scenario".into()
}

impl ScenarioConfig {
    /// Parses a TOML config. `base_dir` anchors a relative map path.
    pub fn from_toml_str(text: &str, base_dir: Option<&Path>) -> Result<ScenarioConfig> {
        let mut cfg: ScenarioConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.map.inline.is_none() {
            let Some(rel) = cfg.map.path.clone() else {
                return Err(Error::Config("map needs either `inline` or `path`".into()));
            };
            let path = match base_dir {
                Some(dir) => dir.join(&rel),
                Option::None => rel.clone().into(),
            };
            let text = std::fs::read_to_string(&path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            cfg.map.inline = Some(text);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ScenarioConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml_str(&text, path.parent())
    }

    pub fn n_agents(&self) -> usize {
        if self.agents.poses.is_empty() {
            self.agents.count.unwrap_or(0)
        } else {
            self.agents.poses.len()
        }
    }

    pub fn build_map(&self) -> Result<GridMap> {
        let Some(text) = &self.map.inline else {
            return Err(Error::Config("map text not resolved".into()));
        };
        GridMap::parse(text)
    }

    /// Every violated invariant, one message each; empty means valid.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let n = self.n_agents();
        if n < 1 {
            errs.push("agents: need at least one agent (poses or count)".into());
        }
        if self.horizon < 1 {
            errs.push("horizon: must be at least 1".into());
        }
        if n >= 1 && self.k_nbr > n - 1 {
            errs.push(format!(
                "k_nbr: must be at most n_agents - 1 = {}, got {}",
                n - 1,
                self.k_nbr
            ));
        }
        match &self.comms {
            CommStrategy::Selective { m_samples, rate } => {
                if *rate < 1 {
                    errs.push("comms.selective.rate: must be at least 1".into());
                }
                if *m_samples < 1 || *m_samples > self.filter.n_particles {
                    errs.push(format!(
                        "comms.selective.m_samples: must be in [1, n_particles={}], got {}",
                        self.filter.n_particles, m_samples
                    ));
                }
            }
            CommStrategy::Baseline { k } => {
                if *k < 1 {
                    errs.push("comms.baseline.k: must be at least 1".into());
                }
            }
            CommStrategy::Full | CommStrategy::None => {}
        }
        if let Err(e) = self.motion.validate() {
            errs.push(format!("motion: {e}"));
        }
        if let Err(e) = self.sensor.validate() {
            errs.push(format!("sensor: {e}"));
        }
        if let Err(e) = self.filter.validate() {
            errs.push(format!("filter: {e}"));
        }
        if let Some(a) = self.alpha {
            if a <= 0.0 {
                errs.push(format!("alpha: must be positive, got {a}"));
            }
        }
        match self.build_map() {
            Err(e) => errs.push(format!("map: {e}")),
            Ok(map) => {
                for (i, p) in self.agents.poses.iter().enumerate() {
                    if !map.is_free(Cell::new(p.x, p.y)) {
                        errs.push(format!(
                            "agents.poses[{i}]: ({}, {}) is not a free cell",
                            p.x, p.y
                        ));
                    }
                }
                if self.agents.poses.is_empty() {
                    if let Some(count) = self.agents.count {
                        if count > map.free_count() {
                            errs.push(format!(
                                "agents.count: {} agents cannot be placed on {} free cells",
                                count,
                                map.free_count()
                            ));
                        }
                    }
                }
                match &self.target_start {
                    StartSpec::Uniform => {}
                    StartSpec::Cell { x, y } => {
                        if !map.is_free(Cell::new(*x, *y)) {
                            errs.push(format!("target_start: ({x}, {y}) is not a free cell"));
                        }
                    }
                    StartSpec::Region { cells } => {
                        if cells.is_empty() {
                            errs.push("target_start: region is empty".into());
                        }
                        for &(x, y) in cells {
                            if !map.is_free(Cell::new(x, y)) {
                                errs.push(format!(
                                    "target_start: region cell ({x}, {y}) is not free"
                                ));
                            }
                        }
                    }
                }
                for (i, w) in self.waypoints.iter().enumerate() {
                    if w.agent as usize >= n {
                        errs.push(format!("waypoints[{i}]: agent {} out of range", w.agent));
                    }
                    if !map.is_free(Cell::new(w.x, w.y)) {
                        errs.push(format!(
                            "waypoints[{i}]: ({}, {}) is not a free cell",
                            w.x, w.y
                        ));
                    }
                }
            }
        }
        errs
    }

    fn validated(&self) -> Result<()> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs.join("; ")))
        }
    }

    fn prior(&self) -> Prior {
        match &self.target_start {
            StartSpec::Uniform => Prior::UniformFree,
            StartSpec::Cell { x, y } => Prior::Cells(vec![Cell::new(*x, *y)]),
            StartSpec::Region { cells } => {
                Prior::Cells(cells.iter().map(|&(x, y)| Cell::new(x, y)).collect())
            }
        }
    }

    fn prior_dist(&self, map: &GridMap) -> Result<GridDist> {
        match &self.target_start {
            StartSpec::Uniform => Ok(GridDist::uniform_free(map)),
            StartSpec::Cell { x, y } => GridDist::point_mass(map, Cell::new(*x, *y)),
            StartSpec::Region { cells } => {
                let cells: Vec<Cell> = cells.iter().map(|&(x, y)| Cell::new(x, y)).collect();
                GridDist::uniform_over(map, &cells)
            }
        }
    }

    fn kl_alpha(&self, map: &GridMap) -> f64 {
        self.alpha.unwrap_or(1.0 / map.free_count() as f64)
    }
}

/// The `k_nbr` agents closest to `agent` by Euclidean distance between
/// cell centers, self excluded, distance ties broken by lower id.
pub fn neighbors(poses: &[AgentPose], agent: usize, k_nbr: usize) -> Result<Vec<AgentId>> {
    let n = poses.len();
    if agent >= n {
        return Err(Error::Validation(format!("agent {agent} out of range")));
    }
    if k_nbr >= n {
        return Err(Error::Validation(format!(
            "k_nbr {} must be below the agent count {}",
            k_nbr, n
        )));
    }
    let me = poses[agent].cell;
    let mut order: Vec<(i64, usize)> = poses
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != agent)
        .map(|(i, p)| {
            let dx = (p.cell.x - me.x) as i64;
            let dy = (p.cell.y - me.y) as i64;
            (dx * dx + dy * dy, i)
        })
        .collect();
    order.sort_unstable();
    Ok(order.into_iter().take(k_nbr).map(|(_, i)| AgentId(i as u32)).collect())
}

/// Uniform random peer; `None` when the agent has nobody to talk to.
pub fn pick_peer(nbrs: &[AgentId], rng: &mut impl Rng) -> Option<AgentId> {
    if nbrs.is_empty() {
        Option::None
    } else {
        Some(nbrs[rng.gen_range(0..nbrs.len())])
    }
}

/// One metrics row; exactly one per agent per step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub time: Timestep,
    pub agent: u32,
    /// KL to the configured reference posterior, absent when the oracle is
    /// disabled.
    pub kl_to_oracle: Option<f64>,
    pub ess: f64,
    pub scalars_sent_cum: u64,
    pub msgs_sent_cum: u64,
}

/// Per-step, per-agent record of a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

pub const METRICS_CSV_HEADER: &str =
    "time,agent,kl_to_oracle,ess,scalars_sent_cum,msgs_sent_cum";

impl MetricsLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let kl = r.kl_to_oracle.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.time, r.agent, kl, r.ess, r.scalars_sent_cum, r.msgs_sent_cum
            ));
        }
        s
    }
}

/// Run-level aggregates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    /// Mean KL over all rows, when the oracle was enabled.
    pub mean_kl: Option<f64>,
    pub total_scalars: u64,
    pub total_msgs: u64,
    /// `n_agents * horizon`; divide the totals by this for per-agent,
    /// per-step figures.
    pub agent_steps: u64,
}

impl RunSummary {
    pub fn scalars_per_agent_step(&self) -> f64 {
        self.total_scalars as f64 / self.agent_steps as f64
    }

    pub fn msgs_per_agent_step(&self) -> f64 {
        self.total_msgs as f64 / self.agent_steps as f64
    }
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.mean_kl {
            Some(kl) => write!(
                f,
                "mean KL {:.6} nats, total bandwidth {} scalars ({:.2}/agent/step)",
                kl,
                self.total_scalars,
                self.scalars_per_agent_step()
            ),
            Option::None => write!(
                f,
                "mean KL n/a (oracle off), total bandwidth {} scalars ({:.2}/agent/step)",
                self.total_scalars,
                self.scalars_per_agent_step()
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutput {
    pub log: MetricsLog,
    pub summary: RunSummary,
}

/// Deterministic world phase: target path, per-step poses, and every
/// agent's measurement at every step, all drawn before any filtering runs.
pub struct WorldLog {
    pub target_path: Vec<Cell>,
    pub poses: Vec<Vec<AgentPose>>,
    pub measurements: Vec<Vec<Measurement>>,
}

fn resolve_initial_poses(cfg: &ScenarioConfig, map: &GridMap) -> Result<Vec<AgentPose>> {
    if !cfg.agents.poses.is_empty() {
        return Ok(cfg
            .agents
            .poses
            .iter()
            .map(|p| AgentPose::new(Cell::new(p.x, p.y), p.heading))
            .collect());
    }
    let count = cfg.agents.count.unwrap_or(0);
    let free = map.free_cells();
    let mut rng = stream(cfg.seed, Domain::Placement, 0);
    let mut idx: Vec<usize> = (0..free.len()).collect();
    for i in 0..count {
        let j = rng.gen_range(i..idx.len());
        idx.swap(i, j);
    }
    Ok(idx[..count]
        .iter()
        .map(|&i| AgentPose::new(free[i], Heading::N))
        .collect())
}

/// Simulates the world for `cfg.horizon` steps.
pub fn simulate_world(cfg: &ScenarioConfig, map: &GridMap) -> Result<WorldLog> {
    let n = cfg.n_agents();
    let t_end = cfg.horizon;
    let mut world_rng = stream(cfg.seed, Domain::World, 0);

    let start = match &cfg.target_start {
        StartSpec::Uniform => {
            let free = map.free_cells();
            free[world_rng.gen_range(0..free.len())]
        }
        StartSpec::Cell { x, y } => Cell::new(*x, *y),
        StartSpec::Region { cells } => {
            let (x, y) = cells[world_rng.gen_range(0..cells.len())];
            Cell::new(x, y)
        }
    };
    let mut target_path = Vec::with_capacity(t_end as usize + 1);
    target_path.push(start);
    for _ in 1..=t_end {
        let next = step_target(map, &cfg.motion, *target_path.last().unwrap(), &mut world_rng)?;
        target_path.push(next);
    }

    let mut poses = Vec::with_capacity(t_end as usize + 1);
    let mut current = resolve_initial_poses(cfg, map)?;
    for t in 0..=t_end {
        for w in &cfg.waypoints {
            if w.time == t {
                let pose = &mut current[w.agent as usize];
                pose.cell = Cell::new(w.x, w.y);
                if let Some(h) = w.heading {
                    pose.heading = h;
                }
            }
        }
        poses.push(current.clone());
    }

    let mut sense_rngs: Vec<ChaCha8Rng> =
        (0..n).map(|a| stream(cfg.seed, Domain::Sense, a as u64)).collect();
    let mut measurements: Vec<Vec<Measurement>> = Vec::with_capacity(t_end as usize + 1);
    measurements.push(Vec::new());
    for t in 1..=t_end {
        let mut row = Vec::with_capacity(n);
        for (a, rng) in sense_rngs.iter_mut().enumerate() {
            row.push(sense(
                map,
                &poses[t as usize][a],
                &cfg.sensor,
                target_path[t as usize],
                t,
                AgentId(a as u32),
                rng,
            )?);
        }
        measurements.push(row);
    }
    Ok(WorldLog { target_path, poses, measurements })
}

/// Per-step reference posteriors for the configured oracle mode.
pub fn reference_marginals(
    cfg: &ScenarioConfig,
    map: &GridMap,
    world: &WorldLog,
) -> Result<Option<Vec<GridDist>>> {
    let all = group_by_step(world.measurements.iter().flatten());
    match cfg.oracle {
        OracleMode::None => Ok(Option::None),
        OracleMode::Exact => Ok(Some(brute_force_marginals(
            map,
            &cfg.motion,
            &cfg.sensor,
            &cfg.prior_dist(map)?,
            &all,
            cfg.horizon,
            DEFAULT_ORACLE_BUDGET,
        )?)),
        OracleMode::FullComm => {
            let mut rng = stream(cfg.seed, Domain::Reference, 0);
            Ok(Some(full_comm_filter(
                map,
                &cfg.motion,
                &cfg.sensor,
                &cfg.filter,
                &cfg.prior(),
                &all,
                cfg.horizon,
                &mut rng,
            )?))
        }
    }
}

struct Agent {
    id: AgentId,
    belief: ParticleBelief,
    db: MeasurementDb,
    filter_rng: ChaCha8Rng,
    comms_rng: ChaCha8Rng,
    latest_own: Option<Measurement>,
}

impl Agent {
    /// Stores and folds in a received measurement: current ones are
    /// incorporated directly, older ones trigger re-simulation from their
    /// step. Duplicates and stale entries are dropped silently.
    fn deliver(
        &mut self,
        m: Measurement,
        now: Timestep,
        map: &GridMap,
        cfg: &ScenarioConfig,
    ) -> Result<()> {
        let time = m.time;
        if !self.db.insert(m.clone(), now, cfg.filter.window) {
            return Ok(());
        }
        if time == now {
            self.belief.incorporate(&m, &cfg.sensor, cfg.filter.weight_floor)
        } else {
            self.belief.resimulate(
                &self.db,
                time,
                map,
                &cfg.motion,
                &cfg.sensor,
                cfg.filter.weight_floor,
                &mut self.filter_rng,
            )
        }
    }
}

fn for_each_agent(agents: &mut [Agent], parallel: bool, f: impl Fn(&mut Agent) + Sync) {
    if parallel {
        agents.par_iter_mut().for_each(&f);
    } else {
        agents.iter_mut().for_each(|a| f(a));
    }
}

/// Runs one scenario to completion. Deterministic for a given config: all
/// randomness derives from `cfg.seed`, and the parallel mode produces the
/// same log as the sequential one.
pub fn run(cfg: &ScenarioConfig) -> Result<RunOutput> {
    cfg.validated()?;
    let map = cfg.build_map()?;
    let world = simulate_world(cfg, &map)?;
    let reference = reference_marginals(cfg, &map, &world)?;
    let alpha = cfg.kl_alpha(&map);
    let n = cfg.n_agents();
    let prior = cfg.prior();

    let mut agents: Vec<Agent> = (0..n)
        .map(|a| -> Result<Agent> {
            let mut filter_rng = stream(cfg.seed, Domain::Filter, a as u64);
            let belief = init_belief(&map, &prior, &cfg.filter, &mut filter_rng)?;
            Ok(Agent {
                id: AgentId(a as u32),
                belief,
                db: MeasurementDb::new(),
                filter_rng,
                comms_rng: stream(cfg.seed, Domain::Comms, a as u64),
                latest_own: Option::None,
            })
        })
        .collect::<Result<_>>()?;

    let mut ledger = BandwidthLedger::new(n);
    let mut log = MetricsLog::default();

    for t in 1..=cfg.horizon {
        // Per-agent phase: propagate to t, then sense and fold in the own
        // measurement. Touches only the agent's own state.
        let step_measurements = &world.measurements[t as usize];
        for_each_agent(&mut agents, cfg.parallel, |agent| {
            agent.belief.propagate(&map, &cfg.motion, &mut agent.filter_rng);
            let m = step_measurements[agent.id.0 as usize].clone();
            agent.db.insert(m.clone(), t, cfg.filter.window);
            agent
                .belief
                .incorporate(&m, &cfg.sensor, cfg.filter.weight_floor)
                .expect("own measurement is fresh");
            agent.latest_own = Some(m);
        });

        // Communication round, agents in ascending id order.
        let poses_t = &world.poses[t as usize];
        match &cfg.comms {
            CommStrategy::Selective { m_samples, rate } if t % rate == 0 => {
                for a in 0..n {
                    let nbrs = neighbors(poses_t, a, cfg.k_nbr)?;
                    let query = {
                        let agent = &mut agents[a];
                        let Some(peer) = pick_peer(&nbrs, &mut agent.comms_rng) else {
                            continue;
                        };
                        let mut q = compose_query(
                            &agent.belief,
                            agent.id,
                            *m_samples,
                            &mut agent.comms_rng,
                        )?;
                        q.exclusions = agent.db.ids();
                        (q, peer)
                    };
                    let (q, peer) = query;
                    ledger.record(AgentId(a as u32), MsgClass::Query, q.scalar_cost());
                    let resp = select_response(
                        &q,
                        &agents[peer.0 as usize].db,
                        &cfg.sensor,
                        cfg.filter.weight_floor,
                        peer,
                        cfg.filter.window,
                    );
                    ledger.record(peer, MsgClass::Response, resp.scalar_cost());
                    if let Some(m) = resp.payload {
                        agents[a].deliver(m, t, &map, cfg)?;
                    }
                }
            }
            CommStrategy::Selective { .. } => {}
            CommStrategy::Baseline { k } => {
                for a in 0..n {
                    let Some(m) = baseline_next(agents[a].latest_own.as_ref(), *k, t) else {
                        continue;
                    };
                    let nbrs = neighbors(poses_t, a, cfg.k_nbr)?;
                    for nbr in nbrs {
                        ledger.record(AgentId(a as u32), MsgClass::Broadcast, m.scalar_cost());
                        agents[nbr.0 as usize].deliver(m.clone(), t, &map, cfg)?;
                    }
                }
            }
            CommStrategy::Full => {
                for a in 0..n {
                    let m = agents[a].latest_own.clone().expect("sensed this step");
                    for b in 0..n {
                        if b == a {
                            continue;
                        }
                        ledger.record(AgentId(a as u32), MsgClass::Broadcast, m.scalar_cost());
                        agents[b].deliver(m.clone(), t, &map, cfg)?;
                    }
                }
            }
            CommStrategy::None => {}
        }

        // Metrics phase: marginals and KL are read-only per agent.
        let reference_t = reference.as_ref().map(|r| &r[t as usize]);
        let mut step_rows: Vec<(Option<f64>, f64)> = vec![(Option::None, 0.0); n];
        let compute = |agent: &Agent| -> (Option<f64>, f64) {
            let marginal =
                agent.belief.marginal_at(&map, t).expect("current step is in the window");
            let kl = reference_t.map(|r| kl_grid(&marginal, r, alpha).expect("same map"));
            (kl, agent.belief.effective_sample_size())
        };
        if cfg.parallel {
            agents.par_iter().map(compute).collect_into_vec(&mut step_rows);
        } else {
            for (slot, agent) in step_rows.iter_mut().zip(&agents) {
                *slot = compute(agent);
            }
        }
        for (a, (kl, ess)) in step_rows.into_iter().enumerate() {
            let id = AgentId(a as u32);
            log.rows.push(MetricsRow {
                time: t,
                agent: a as u32,
                kl_to_oracle: kl,
                ess,
                scalars_sent_cum: ledger.scalars_sent(id),
                msgs_sent_cum: ledger.msgs_sent(id),
            });
        }
    }

    let kl_rows: Vec<f64> = log.rows.iter().filter_map(|r| r.kl_to_oracle).collect();
    let mean_kl = if kl_rows.is_empty() {
        Option::None
    } else {
        Some(kl_rows.iter().sum::<f64>() / kl_rows.len() as f64)
    };
    let summary = RunSummary {
        mean_kl,
        total_scalars: ledger.total_scalars(),
        total_msgs: ledger.total_msgs(),
        agent_steps: n as u64 * cfg.horizon as u64,
    };
    Ok(RunOutput { log, summary })
}

/// Strategy axis of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    Selective,
    Baseline,
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "selective" => Ok(StrategyKind::Selective),
            "baseline" => Ok(StrategyKind::Baseline),
            other => Err(Error::Validation(format!(
                "unknown strategy {other:?} (expected selective or baseline)"
            ))),
        }
    }
}

impl StrategyKind {
    /// The concrete strategy at a given rate. Selective keeps the base
    /// config's query size; for the baseline the rate is the broadcast
    /// period k.
    fn at_rate(self, rate: u32, base: &CommStrategy) -> CommStrategy {
        match self {
            StrategyKind::Selective => {
                let m_samples = match base {
                    CommStrategy::Selective { m_samples, .. } => *m_samples,
                    _ => 10,
                };
                CommStrategy::Selective { m_samples, rate }
            }
            StrategyKind::Baseline => CommStrategy::Baseline { k: rate },
        }
    }
}

/// One aggregated sweep point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub strategy: String,
    pub rate: u32,
    pub repeats: u32,
    pub scalars_per_agent_step: f64,
    pub mean_kl: f64,
    pub std_kl: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_CSV_HEADER: &str =
    "strategy,rate,repeats,scalars_per_agent_step,mean_kl,std_kl";

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(SWEEP_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.strategy, r.rate, r.repeats, r.scalars_per_agent_step, r.mean_kl, r.std_kl
            ));
        }
        s
    }
}

/// Runs `base` under every (strategy, rate) pair, `repeats` times each with
/// per-repeat seeds, and aggregates bandwidth and KL-to-reference. Rows
/// come back sorted by bandwidth. Requires an oracle mode so KL is defined.
pub fn sweep(
    base: &ScenarioConfig,
    rates: &[u32],
    strategies: &[StrategyKind],
    repeats: u32,
) -> Result<SweepTable> {
    if repeats < 1 {
        return Err(Error::Validation("repeats must be at least 1".into()));
    }
    if base.oracle == OracleMode::None {
        return Err(Error::Validation(
            "sweep needs an oracle mode so mean KL is defined".into(),
        ));
    }
    let mut jobs = Vec::new();
    for &strategy in strategies {
        for &rate in rates {
            if rate < 1 {
                return Err(Error::Validation("rates must be at least 1".into()));
            }
            for repeat in 0..repeats {
                let mut cfg = base.clone();
                cfg.comms = strategy.at_rate(rate, &base.comms);
                cfg.seed = repeat_seed(base.seed, repeat as u64);
                jobs.push((strategy, rate, cfg));
            }
        }
    }
    let results: Vec<Result<(StrategyKind, u32, f64, f64)>> = jobs
        .par_iter()
        .map(|(strategy, rate, cfg)| {
            let out = run(cfg)?;
            let kl = out.summary.mean_kl.expect("oracle enabled");
            Ok((*strategy, *rate, out.summary.scalars_per_agent_step(), kl))
        })
        .collect();

    let mut rows = Vec::new();
    for &strategy in strategies {
        for &rate in rates {
            let mut bws = Vec::new();
            let mut kls = Vec::new();
            for r in &results {
                match r {
                    Ok((s, rt, bw, kl)) if *s == strategy && *rt == rate => {
                        bws.push(*bw);
                        kls.push(*kl);
                    }
                    Ok(_) => {}
                    Err(e) => return Err(Error::Validation(e.to_string())),
                }
            }
            let mean_bw = bws.iter().sum::<f64>() / bws.len() as f64;
            let mean_kl = kls.iter().sum::<f64>() / kls.len() as f64;
            let std_kl = if kls.len() < 2 {
                0.0
            } else {
                let var = kls.iter().map(|k| (k - mean_kl).powi(2)).sum::<f64>()
                    / (kls.len() - 1) as f64;
                var.sqrt()
            };
            rows.push(SweepRow {
                strategy: match strategy {
                    StrategyKind::Selective => "selective".into(),
                    StrategyKind::Baseline => "baseline".into(),
                },
                rate,
                repeats,
                scalars_per_agent_step: mean_bw,
                mean_kl,
                std_kl,
            });
        }
    }
    rows.sort_by(|a, b| {
        a.scalars_per_agent_step
            .total_cmp(&b.scalars_per_agent_step)
            .then_with(|| a.strategy.cmp(&b.strategy))
            .then(a.rate.cmp(&b.rate))
    });
    Ok(SweepTable { rows })
}
