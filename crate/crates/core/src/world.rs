//! Occupancy-grid world: the map, the target motion kernel, and the
//! line-of-sight visibility geometry that sensing and evaluation share.
//!
//! The target lives on a 4-connected grid of free cells. Each step it stays
//! put with probability `p_stay` and otherwise tries one of the four axis
//! neighbors with equal probability; a move into a wall or off the map
//! collapses back to staying, which keeps every kernel row stochastic with
//! a closed form at boundaries.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid coordinates. `x` is the column, `y` the row; row 0 is the first
/// text row of the map, so `y` grows southward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub const fn new(x: i32, y: i32) -> Self {
        Cell { x, y }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.x, self.y)
    }
}

/// Four-way heading; only used to restrict a sensor to its frontal half-plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Heading {
    N,
    E,
    S,
    W,
}

impl Heading {
    /// Unit step in grid coordinates (N points toward row 0).
    pub fn delta(self) -> (i32, i32) {
        match self {
            Heading::N => (0, -1),
            Heading::E => (1, 0),
            Heading::S => (0, 1),
            Heading::W => (-1, 0),
        }
    }
}

/// Sensor field of view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fov {
    Full,
    FrontalHalf,
}

/// A tracker's own pose. Tracker positions are assumed known; the heading
/// matters only under `Fov::FrontalHalf`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentPose {
    pub cell: Cell,
    pub heading: Heading,
}

impl AgentPose {
    pub fn new(cell: Cell, heading: Heading) -> Self {
        AgentPose { cell, heading }
    }
}

/// Target motion kernel parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    /// Probability of staying in place before any collapsed moves are added.
    pub p_stay: f64,
}

impl MotionParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_stay) {
            return Err(Error::Validation(format!(
                "p_stay must be in [0,1], got {}",
                self.p_stay
            )));
        }
        Ok(())
    }
}

/// Immutable occupancy grid. Shared freely between agents once loaded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridMap {
    width: i32,
    height: i32,
    blocked: Vec<bool>,
}

impl GridMap {
    /// Parses the ASCII map format: one row per line, `.` free, `#` blocked.
    /// Rows must all have the same length and at least one cell must be free.
    pub fn parse(text: &str) -> Result<GridMap> {
        let mut rows: Vec<&str> = text.lines().collect();
        while rows.last().is_some_and(|r| r.is_empty()) {
            rows.pop();
        }
        if rows.is_empty() {
            return Err(Error::MapFormat("empty map".into()));
        }
        let width = rows[0].chars().count();
        if width == 0 {
            return Err(Error::MapFormat("empty first row".into()));
        }
        let mut blocked = Vec::with_capacity(width * rows.len());
        for (y, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(Error::MapFormat(format!(
                    "row {} has {} cells, expected {}",
                    y,
                    row.chars().count(),
                    width
                )));
            }
            for (x, ch) in row.chars().enumerate() {
                match ch {
                    '.' => blocked.push(false),
                    '#' => blocked.push(true),
                    other => {
                        return Err(Error::MapFormat(format!(
                            "unknown character {:?} at ({}, {})",
                            other, x, y
                        )))
                    }
                }
            }
        }
        if blocked.iter().all(|&b| b) {
            return Err(Error::Validation("map has no free cell".into()));
        }
        Ok(GridMap {
            width: width as i32,
            height: rows.len() as i32,
            blocked,
        })
    }

    pub fn width(&self) -> i32 {
        self.width
    }

    pub fn height(&self) -> i32 {
        self.height
    }

    pub fn contains(&self, c: Cell) -> bool {
        c.x >= 0 && c.x < self.width && c.y >= 0 && c.y < self.height
    }

    /// In bounds and not a wall.
    pub fn is_free(&self, c: Cell) -> bool {
        self.contains(c) && !self.blocked[self.index(c)]
    }

    /// Dense row-major index of an in-bounds cell.
    pub fn index(&self, c: Cell) -> usize {
        debug_assert!(self.contains(c));
        (c.y * self.width + c.x) as usize
    }

    pub fn cell_count(&self) -> usize {
        (self.width * self.height) as usize
    }

    /// All free cells in row-major order.
    pub fn free_cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                let c = Cell::new(x, y);
                if self.is_free(c) {
                    out.push(c);
                }
            }
        }
        out
    }

    pub fn free_count(&self) -> usize {
        self.blocked.iter().filter(|&&b| !b).count()
    }

    /// Free mask in row-major order (`true` = free).
    pub fn free_mask(&self) -> Vec<bool> {
        self.blocked.iter().map(|&b| !b).collect()
    }

    /// Renders back to the ASCII format accepted by [`GridMap::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity((self.width as usize + 1) * self.height as usize);
        for y in 0..self.height {
            for x in 0..self.width {
                s.push(if self.blocked[self.index(Cell::new(x, y))] { '#' } else { '.' });
            }
            s.push('\n');
        }
        s
    }
}

const DIRS: [(i32, i32); 4] = [(0, -1), (1, 0), (0, 1), (-1, 0)];

fn require_free(map: &GridMap, c: Cell, what: &str) -> Result<()> {
    if !map.is_free(c) {
        return Err(Error::Domain(format!("{} {} is blocked or out of bounds", what, c)));
    }
    Ok(())
}

/// Probability that the target moves `from -> to` in one step.
///
/// Stay with `p_stay`; each axis neighbor gets `(1 - p_stay)/4`, and any
/// neighbor that is blocked or out of bounds folds its mass back into
/// staying. Rows sum to one over free cells.
pub fn transition_prob(map: &GridMap, params: &MotionParams, from: Cell, to: Cell) -> Result<f64> {
    require_free(map, from, "from")?;
    let q = (1.0 - params.p_stay) / 4.0;
    let mut stay = params.p_stay;
    let mut moved = 0.0;
    for (dx, dy) in DIRS {
        let n = Cell::new(from.x + dx, from.y + dy);
        if map.is_free(n) {
            if n == to {
                moved = q;
            }
        } else {
            stay += q;
        }
    }
    if to == from {
        Ok(stay)
    } else {
        Ok(moved)
    }
}

/// Draws the next target cell from the kernel of [`transition_prob`].
/// Consumes exactly one uniform draw.
pub fn step_target(
    map: &GridMap,
    params: &MotionParams,
    state: Cell,
    rng: &mut impl Rng,
) -> Result<Cell> {
    require_free(map, state, "state")?;
    let u: f64 = rng.gen();
    if u < params.p_stay {
        return Ok(state);
    }
    let q = (1.0 - params.p_stay) / 4.0;
    let idx = (((u - params.p_stay) / q) as usize).min(3);
    let (dx, dy) = DIRS[idx];
    let n = Cell::new(state.x + dx, state.y + dy);
    Ok(if map.is_free(n) { n } else { state })
}

/// True when the discrete line between the two cell centers crosses no
/// blocked cell (endpoints included).
pub fn line_of_sight(map: &GridMap, a: Cell, b: Cell) -> bool {
    let (mut x, mut y) = (a.x, a.y);
    let dx = (b.x - a.x).abs();
    let dy = -(b.y - a.y).abs();
    let sx = if a.x < b.x { 1 } else { -1 };
    let sy = if a.y < b.y { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if !map.is_free(Cell::new(x, y)) {
            return false;
        }
        if x == b.x && y == b.y {
            return true;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Every free cell within Chebyshev range of the pose that has line of
/// sight to it, optionally restricted to the frontal half-plane of the
/// pose's heading.
pub fn visible_cells(
    map: &GridMap,
    pose: &AgentPose,
    max_range: u32,
    fov: Fov,
) -> Result<BTreeSet<Cell>> {
    require_free(map, pose.cell, "pose")?;
    let r = max_range as i32;
    let (hx, hy) = pose.heading.delta();
    let mut out = BTreeSet::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let c = Cell::new(pose.cell.x + dx, pose.cell.y + dy);
            if !map.is_free(c) {
                continue;
            }
            if fov == Fov::FrontalHalf && dx * hx + dy * hy < 0 {
                continue;
            }
            if line_of_sight(map, pose.cell, c) {
                out.insert(c);
            }
        }
    }
    Ok(out)
}
