use std::cell::Cell as CallCounter;
use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SandboxError;
use crate::generation::RewardSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub const fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    pub fn manhattan(self, other: Cell) -> usize {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Up,
    Right,
    Down,
    Left,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Right, Action::Down, Action::Left];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Action {
        Action::ALL[i]
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (0, -1),
            Action::Right => (1, 0),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
        }
    }
}

/// Gridworld definition: reach `exit` from `start` within `horizon` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub start: Cell,
    pub exit: Cell,
    #[serde(default)]
    pub obstacles: BTreeSet<Cell>,
    /// Probability the chosen action is replaced by a uniformly random one.
    pub slip: f64,
    pub horizon: usize,
    pub gamma: f64,
}

impl GridSpec {
    /// 7x7 grid split by a wall of six obstacles on row 3 with a single gap,
    /// slip 0.1, horizon 60.
    pub fn desk_default() -> Self {
        let obstacles = (0..7).filter(|&x| x != 5).map(|x| Cell::new(x, 3)).collect();
        Self {
            width: 7,
            height: 7,
            start: Cell::new(0, 0),
            exit: Cell::new(6, 6),
            obstacles,
            slip: 0.1,
            horizon: 60,
            gamma: 0.99,
        }
    }

    /// Obstacle-free square grid from the top-left to the bottom-right corner.
    pub fn open(size: usize, slip: f64, horizon: usize) -> Self {
        Self {
            width: size,
            height: size,
            start: Cell::new(0, 0),
            exit: Cell::new(size - 1, size - 1),
            obstacles: BTreeSet::new(),
            slip,
            horizon,
            gamma: 0.99,
        }
    }

    pub fn validate(&self) -> Result<(), SandboxError> {
        let bad = |m: String| Err(SandboxError::InvalidGrid(m));
        if self.width == 0 || self.height == 0 {
            return bad("grid must be at least 1x1".into());
        }
        let inside = |c: &Cell| c.x < self.width && c.y < self.height;
        if !inside(&self.start) || !inside(&self.exit) {
            return bad("start and exit must lie inside the grid".into());
        }
        if let Some(c) = self.obstacles.iter().find(|c| !inside(c)) {
            return bad(format!("obstacle ({}, {}) lies outside the grid", c.x, c.y));
        }
        if self.start == self.exit {
            return bad("start and exit must differ".into());
        }
        if self.obstacles.contains(&self.start) || self.obstacles.contains(&self.exit) {
            return bad("start and exit must not be obstacles".into());
        }
        if !(0.0..1.0).contains(&self.slip) {
            return bad(format!("slip must lie in [0, 1), got {}", self.slip));
        }
        if self.horizon < self.width + self.height {
            return bad(format!(
                "horizon {} must be at least width + height = {}",
                self.horizon,
                self.width + self.height
            ));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        Ok(())
    }

    /// Text map: `#` obstacle, `S` start, `E` exit, `.` free.
    pub fn render(&self) -> String {
        let mut out = String::with_capacity((self.width + 1) * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let c = Cell::new(x, y);
                let ch = if c == self.start {
                    'S'
                } else if c == self.exit {
                    'E'
                } else if self.obstacles.contains(&c) {
                    '#'
                } else {
                    '.'
                };
                out.push(ch);
            }
            let _ = writeln!(out);
        }
        out
    }

    /// Parses a text map produced by [`GridSpec::render`].
    pub fn parse_map(map: &str, slip: f64, horizon: usize, gamma: f64) -> Result<Self, SandboxError> {
        let rows: Vec<&str> = map
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect();
        let bad = |m: String| Err(SandboxError::InvalidGrid(m));
        let Some(first) = rows.first() else {
            return bad("empty map".into());
        };
        let width = first.chars().count();
        let (mut start, mut exit) = (None, None);
        let mut obstacles = BTreeSet::new();
        for (y, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return bad(format!("map row {} has a different width", y + 1));
            }
            for (x, ch) in row.chars().enumerate() {
                let c = Cell::new(x, y);
                match ch {
                    '.' => {}
                    '#' => {
                        obstacles.insert(c);
                    }
                    'S' if start.is_none() => start = Some(c),
                    'E' if exit.is_none() => exit = Some(c),
                    'S' | 'E' => return bad(format!("duplicate `{ch}` in map")),
                    other => return bad(format!("unexpected character `{other}` in map")),
                }
            }
        }
        let (Some(start), Some(exit)) = (start, exit) else {
            return bad("map needs exactly one `S` and one `E`".into());
        };
        let spec = Self {
            width,
            height: rows.len(),
            start,
            exit,
            obstacles,
            slip,
            horizon,
            gamma,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// A validated grid with per-cell lookup tables.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    spec: GridSpec,
    blocked: Vec<bool>,
    exit_distance: Vec<usize>,
    near_obstacle: Vec<bool>,
    max_distance: f64,
}

impl Grid {
    pub fn new(spec: GridSpec) -> Result<Self, SandboxError> {
        spec.validate()?;
        let (w, h) = (spec.width, spec.height);
        let cells = w * h;
        let mut blocked = vec![false; cells];
        for c in &spec.obstacles {
            blocked[c.y * w + c.x] = true;
        }
        let mut exit_distance = vec![0; cells];
        let mut near_obstacle = vec![false; cells];
        for y in 0..h {
            for x in 0..w {
                let c = Cell::new(x, y);
                exit_distance[y * w + x] = c.manhattan(spec.exit);
                near_obstacle[y * w + x] = Action::ALL.iter().any(|a| {
                    let (dx, dy) = a.delta();
                    match (x.checked_add_signed(dx), y.checked_add_signed(dy)) {
                        (Some(nx), Some(ny)) if nx < w && ny < h => blocked[ny * w + nx],
                        _ => false,
                    }
                });
            }
        }
        let max_distance = ((w - 1) + (h - 1)).max(1) as f64;
        Ok(Self {
            spec,
            blocked,
            exit_distance,
            near_obstacle,
            max_distance,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn cell_count(&self) -> usize {
        self.spec.width * self.spec.height
    }

    pub fn index(&self, c: Cell) -> usize {
        c.y * self.spec.width + c.x
    }

    pub fn is_blocked(&self, c: Cell) -> bool {
        self.blocked[self.index(c)]
    }

    /// Deterministic move; walls and obstacles leave the agent in place.
    pub fn apply(&self, c: Cell, a: Action) -> Cell {
        let (dx, dy) = a.delta();
        match (c.x.checked_add_signed(dx), c.y.checked_add_signed(dy)) {
            (Some(x), Some(y)) if x < self.spec.width && y < self.spec.height => {
                let next = Cell::new(x, y);
                if self.is_blocked(next) {
                    c
                } else {
                    next
                }
            }
            _ => c,
        }
    }

    pub fn max_distance(&self) -> f64 {
        self.max_distance
    }

    pub fn exit_distance(&self, c: Cell) -> usize {
        self.exit_distance[self.index(c)]
    }

    pub fn near_obstacle(&self, c: Cell) -> bool {
        self.near_obstacle[self.index(c)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub from: Cell,
    pub action: Action,
    /// Action actually executed after slipping.
    pub executed: Action,
    pub to: Cell,
    pub task_reward: f64,
    pub reached_exit: bool,
    /// Episode over: exit reached or horizon hit.
    pub done: bool,
}

impl Transition {
    pub fn truncated(&self) -> bool {
        self.done && !self.reached_exit
    }
}

/// One environment step from `cell`, which has already taken `steps_taken`
/// steps in the current episode.
pub fn env_step<R: Rng + ?Sized>(
    grid: &Grid,
    cell: Cell,
    action: Action,
    steps_taken: usize,
    rng: &mut R,
) -> Transition {
    let slip = grid.spec.slip;
    let executed = if slip > 0.0 && rng.random::<f64>() < slip {
        Action::from_index(rng.random_range(0..Action::COUNT))
    } else {
        action
    };
    let to = grid.apply(cell, executed);
    let reached_exit = to == grid.spec.exit;
    Transition {
        from: cell,
        action,
        executed,
        to,
        task_reward: if reached_exit { 1.0 } else { 0.0 },
        reached_exit,
        done: reached_exit || steps_taken + 1 >= grid.spec.horizon,
    }
}

pub const FEATURE_COUNT: usize = 5;

pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "neg_exit_distance",
    "obstacle_proximity",
    "step_cost",
    "distance_progress",
    "exit_bonus",
];

/// Shaping features of a transition, in [`FEATURE_NAMES`] order.
pub fn features(grid: &Grid, t: &Transition) -> [f64; FEATURE_COUNT] {
    let d_next = grid.exit_distance(t.to) as f64;
    let d_prev = grid.exit_distance(t.from) as f64;
    [
        -d_next / grid.max_distance,
        if grid.near_obstacle(t.to) { -1.0 } else { 0.0 },
        -1.0,
        (d_prev - d_next) / grid.max_distance,
        if t.reached_exit { 1.0 } else { 0.0 },
    ]
}

thread_local! {
    static SHAPED_CALLS: CallCounter<u64> = const { CallCounter::new(0) };
}

/// Number of [`shaped_reward`] calls made on this thread so far.
pub fn shaped_reward_calls() -> u64 {
    SHAPED_CALLS.with(|c| c.get())
}

/// `sum_j w_j * c_j(transition)`; a non-finite result is an error.
pub fn shaped_reward(spec: &RewardSpec, grid: &Grid, t: &Transition) -> Result<f64, SandboxError> {
    SHAPED_CALLS.with(|c| c.set(c.get() + 1));
    let value: f64 = spec
        .weights
        .iter()
        .zip(features(grid, t))
        .map(|(w, c)| w * c)
        .sum();
    if value.is_finite() {
        Ok(value)
    } else {
        Err(SandboxError::InvalidReward {
            uid: spec.uid,
            value,
        })
    }
}
