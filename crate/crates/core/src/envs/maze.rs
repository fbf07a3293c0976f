//! Continuous point agent in a grid of wall cells.
//!
//! Cell `(row, col)` covers `x in [col, col + 1]`, `y in [row, row + 1]`.
//! The agent is a square of half-size `agent_half_size`; each step moves it by
//! `step_size * clip(a, -1, 1)` plus Gaussian noise, one axis at a time, and
//! stops it flush against any wall face it would cross.

use std::collections::VecDeque;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Env, EnvSpec, RewardKind, Step};
use crate::error::{Result, VmgError};

pub type Cell = (usize, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MazeLayout {
    pub name: String,
    pub version: u32,
    /// `#` is a wall, anything else is free floor.
    pub rows: Vec<String>,
    pub start: Cell,
    pub goal: Cell,
    pub goal_radius: f64,
    pub step_size: f64,
    pub agent_half_size: f64,
    pub noise_sigma: f64,
    /// Uniform jitter applied to the reset position on each axis.
    pub reset_jitter: f64,
    pub max_episode_steps: usize,
    /// Mean return of seeded uniform-random rollouts.
    pub random_score: f64,
    /// Mean return of the noise-free scripted controller.
    pub expert_score: f64,
}

impl MazeLayout {
    pub fn from_json(text: &str) -> Result<Self> {
        let layout: MazeLayout = serde_json::from_str(text)?;
        layout.validate()?;
        Ok(layout)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(VmgError::Schema(format!("maze layout {}: {m}", self.name)));
        let width = self.rows.first().map_or(0, |r| r.len());
        if self.rows.len() < 3 || width < 3 || self.rows.iter().any(|r| r.len() != width) {
            return bad("rows must form a rectangle of at least 3x3".into());
        }
        let border = |r: usize, c: usize| r == 0 || c == 0 || r + 1 == self.rows.len() || c + 1 == width;
        for r in 0..self.rows.len() {
            for c in 0..width {
                if border(r, c) && !self.is_wall(r, c) {
                    return bad(format!("border cell ({r}, {c}) must be a wall"));
                }
            }
        }
        for (what, cell) in [("start", self.start), ("goal", self.goal)] {
            if cell.0 >= self.rows.len() || cell.1 >= width || self.is_wall(cell.0, cell.1) {
                return bad(format!("{what} cell {cell:?} is not free floor"));
            }
        }
        if !(self.agent_half_size > 0.0 && self.agent_half_size < 0.5) {
            return bad("agent_half_size must lie in (0, 0.5)".into());
        }
        if !(self.step_size > 0.0) || !(self.goal_radius > 0.0) || self.noise_sigma < 0.0 {
            return bad("step_size and goal_radius must be > 0, noise_sigma >= 0".into());
        }
        if self.max_episode_steps == 0 {
            return bad("max_episode_steps must be > 0".into());
        }
        if self.reset_jitter < 0.0 || self.reset_jitter + self.agent_half_size > 0.5 {
            return bad("reset_jitter keeps the agent inside its start cell".into());
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.rows.len()
    }

    pub fn width(&self) -> usize {
        self.rows[0].len()
    }

    pub fn is_wall(&self, row: usize, col: usize) -> bool {
        self.rows
            .get(row)
            .and_then(|r| r.as_bytes().get(col))
            .is_none_or(|&b| b == b'#')
    }

    fn is_wall_i(&self, row: i64, col: i64) -> bool {
        row < 0 || col < 0 || self.is_wall(row as usize, col as usize)
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        (0..self.height())
            .flat_map(|r| (0..self.width()).map(move |c| (r, c)))
            .filter(|&(r, c)| !self.is_wall(r, c))
            .collect()
    }

    pub fn cell_center(cell: Cell) -> [f64; 2] {
        [cell.1 as f64 + 0.5, cell.0 as f64 + 0.5]
    }

    pub fn cell_of(pos: &[f64]) -> Cell {
        (pos[1].floor().max(0.0) as usize, pos[0].floor().max(0.0) as usize)
    }

    /// 4-connected shortest cell path, both ends included.
    pub fn cell_path(&self, from: Cell, to: Cell) -> Option<Vec<Cell>> {
        let (h, w) = (self.height(), self.width());
        let mut prev = vec![None; h * w];
        let mut seen = vec![false; h * w];
        seen[from.0 * w + from.1] = true;
        let mut queue = VecDeque::from([from]);
        while let Some((r, c)) = queue.pop_front() {
            if (r, c) == to {
                let mut path = vec![to];
                let mut cur = to;
                while let Some(p) = prev[cur.0 * w + cur.1] {
                    path.push(p);
                    cur = p;
                }
                path.reverse();
                return Some(path);
            }
            let next = [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)];
            for (nr, nc) in next {
                if nr < h && nc < w && !self.is_wall(nr, nc) && !seen[nr * w + nc] {
                    seen[nr * w + nc] = true;
                    prev[nr * w + nc] = Some((r, c));
                    queue.push_back((nr, nc));
                }
            }
        }
        None
    }

    pub fn in_goal(&self, goal: Cell, pos: &[f64]) -> bool {
        let g = Self::cell_center(goal);
        (pos[0] - g[0]).hypot(pos[1] - g[1]) <= self.goal_radius
    }

    /// Rows of cells overlapped by the agent's extent `[lo, hi]` along one axis.
    fn overlapped(lo: f64, hi: f64) -> std::ops::RangeInclusive<i64> {
        let first = lo.floor() as i64;
        let mut last = hi.floor() as i64;
        if hi == hi.floor() {
            last -= 1; // Flush contact does not overlap the next cell.
        }
        first..=last
    }

    /// Moves along one axis (`axis` 0 = x, 1 = y), stopping at the first wall face.
    fn move_axis(&self, pos: [f64; 2], axis: usize, delta: f64) -> f64 {
        let h = self.agent_half_size;
        let other = 1 - axis;
        let span = Self::overlapped(pos[other] - h, pos[other] + h);
        let blocked = |k: i64| {
            span.clone().any(|o| {
                if axis == 0 {
                    self.is_wall_i(o, k)
                } else {
                    self.is_wall_i(k, o)
                }
            })
        };
        let cur = pos[axis];
        let target = cur + delta;
        if delta > 0.0 {
            // Cell boundaries crossed by the leading edge, nearest first.
            let mut b = (cur + h).floor() + 1.0;
            if (cur + h) == (cur + h).floor() {
                b = cur + h;
            }
            while b <= target + h {
                if blocked(b as i64) {
                    return b - h;
                }
                b += 1.0;
            }
        } else if delta < 0.0 {
            let mut b = (cur - h).ceil() - 1.0;
            if (cur - h) == (cur - h).ceil() {
                b = cur - h;
            }
            while b >= target - h {
                if blocked(b as i64 - 1) {
                    return b + h;
                }
                b -= 1.0;
            }
        }
        target
    }

    /// Deterministic part of a step: clip, scale and collide.
    pub fn advance(&self, pos: &[f64], action: &[f64], noise: [f64; 2]) -> [f64; 2] {
        let dx = self.step_size * action[0].clamp(-1.0, 1.0) + noise[0];
        let dy = self.step_size * action[1].clamp(-1.0, 1.0) + noise[1];
        let mut p = [pos[0], pos[1]];
        p[0] = self.move_axis(p, 0, dx);
        p[1] = self.move_axis(p, 1, dy);
        p
    }

    pub fn spec(&self) -> EnvSpec {
        EnvSpec {
            name: self.name.clone(),
            state_dim: 2,
            action_dim: 2,
            action_bounds: vec![(-1.0, 1.0); 2],
            max_episode_steps: self.max_episode_steps,
            reward_kind: RewardKind::SparseGoal,
            random_score: self.random_score,
            expert_score: self.expert_score,
        }
    }
}

/// Episode task: where the agent starts and which cell holds the goal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MazeTask {
    pub start: Cell,
    pub goal: Cell,
}

pub struct PointMazeEnv {
    layout: MazeLayout,
    spec: EnvSpec,
    task: MazeTask,
    pos: [f64; 2],
    steps: usize,
    rng: ChaCha8Rng,
    noise: Normal<f64>,
    active: bool,
}

impl PointMazeEnv {
    pub fn new(layout: MazeLayout) -> Result<Self> {
        let task = MazeTask {
            start: layout.start,
            goal: layout.goal,
        };
        Self::with_task(layout, task)
    }

    pub fn with_task(layout: MazeLayout, task: MazeTask) -> Result<Self> {
        layout.validate()?;
        for cell in [task.start, task.goal] {
            if layout.is_wall(cell.0, cell.1) {
                return Err(VmgError::invalid(format!("task cell {cell:?} is a wall")));
            }
        }
        let noise = Normal::new(0.0, layout.noise_sigma)
            .map_err(|e| VmgError::invalid(format!("noise sigma: {e}")))?;
        Ok(PointMazeEnv {
            spec: layout.spec(),
            pos: MazeLayout::cell_center(task.start),
            layout,
            task,
            steps: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
            noise,
            active: false,
        })
    }

    pub fn layout(&self) -> &MazeLayout {
        &self.layout
    }

    pub fn task(&self) -> MazeTask {
        self.task
    }

    pub fn position(&self) -> [f64; 2] {
        self.pos
    }

    /// Places the agent at an arbitrary free position, for tests and tools.
    pub fn set_position(&mut self, pos: [f64; 2]) {
        self.pos = pos;
        self.steps = 0;
        self.active = true;
    }
}

impl Env for PointMazeEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let c = MazeLayout::cell_center(self.task.start);
        let j = self.layout.reset_jitter;
        self.pos = if j > 0.0 {
            [
                c[0] + self.rng.random_range(-j..=j),
                c[1] + self.rng.random_range(-j..=j),
            ]
        } else {
            c
        };
        self.steps = 0;
        self.active = true;
        self.pos.to_vec()
    }

    fn step(&mut self, action: &[f64]) -> Result<Step> {
        if !self.active {
            return Err(VmgError::State("step called on a finished or unreset episode".into()));
        }
        if action.len() != 2 {
            return Err(VmgError::invalid(format!("maze action needs 2 entries, got {}", action.len())));
        }
        let clipped = action.iter().any(|a| !(-1.0..=1.0).contains(a));
        let noise = if self.layout.noise_sigma > 0.0 {
            [self.noise.sample(&mut self.rng), self.noise.sample(&mut self.rng)]
        } else {
            [0.0, 0.0]
        };
        let was_in = self.layout.in_goal(self.task.goal, &self.pos);
        self.pos = self.layout.advance(&self.pos, action, noise);
        self.steps += 1;
        let entered = !was_in && self.layout.in_goal(self.task.goal, &self.pos);
        let truncated = !entered && self.steps >= self.layout.max_episode_steps;
        self.active = !(entered || truncated);
        Ok(Step {
            state: self.pos.to_vec(),
            reward: if entered { 1.0 } else { 0.0 },
            terminal: entered,
            truncated,
            clipped,
        })
    }
}

pub const UMAZE_JSON: &str = include_str!("../../layouts/umaze.json");
pub const MEDIUM_MAZE_JSON: &str = include_str!("../../layouts/medium_maze.json");

pub fn umaze() -> MazeLayout {
    MazeLayout::from_json(UMAZE_JSON).expect("bundled layout is valid")
}

pub fn medium_maze() -> MazeLayout {
    MazeLayout::from_json(MEDIUM_MAZE_JSON).expect("bundled layout is valid")
}
