//! Scripted behaviour policies and offline dataset collection.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::chain::ChainConfig;
use super::maze::{Cell, MazeLayout, MazeTask};
use super::{EnvSpec, Policy};
use crate::dataset::{Dataset, DatasetMeta, Episode};
use crate::error::{Result, VmgError};

/// How a goal-reaching task is rewarded when labelling a dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalReward {
    /// 1 whenever the next state lies in the goal region.
    #[default]
    Inside,
    /// 1 only on the step that enters the goal region.
    Entering,
}

/// Reward function `(s, a, s') -> r` for reaching `goal` in `layout`.
pub fn goal_reward(
    layout: &MazeLayout,
    goal: Cell,
    mode: GoalReward,
) -> impl Fn(&[f64], &[f64], &[f64]) -> f64 + Clone {
    let layout = layout.clone();
    move |s, _a, s2| {
        let inside = layout.in_goal(goal, s2);
        let hit = match mode {
            GoalReward::Inside => inside,
            GoalReward::Entering => inside && !layout.in_goal(goal, s),
        };
        if hit {
            1.0
        } else {
            0.0
        }
    }
}

/// Uniform random actions within the bounds.
pub struct RandomPolicy {
    bounds: Vec<(f64, f64)>,
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(spec: &EnvSpec) -> Self {
        RandomPolicy {
            bounds: spec.action_bounds.clone(),
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }
}

impl Policy for RandomPolicy {
    fn reset(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7a9d);
    }

    fn act(&mut self, _state: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .bounds
            .iter()
            .map(|&(lo, hi)| self.rng.random_range(lo..=hi))
            .collect())
    }
}

/// Mean-reverting action noise.
#[derive(Debug, Clone)]
struct OuNoise {
    theta: f64,
    sigma: f64,
    x: [f64; 2],
}

impl OuNoise {
    fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> [f64; 2] {
        for x in &mut self.x {
            let e: f64 = StandardNormal.sample(rng);
            *x += -self.theta * *x + self.sigma * e;
        }
        self.x
    }
}

/// Follows the shortest cell path to a goal cell, steering at the centre of
/// the next cell, with optional mean-reverting action noise.
pub struct ScriptedMazePolicy {
    layout: MazeLayout,
    goal: Cell,
    noise: OuNoise,
    rng: ChaCha8Rng,
}

impl ScriptedMazePolicy {
    pub fn new(layout: MazeLayout, goal: Cell, noise_sigma: f64, ou_theta: f64) -> Self {
        ScriptedMazePolicy {
            layout,
            goal,
            noise: OuNoise {
                theta: ou_theta,
                sigma: noise_sigma,
                x: [0.0; 2],
            },
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn set_goal(&mut self, goal: Cell) {
        self.goal = goal;
    }

    /// Noise-free steering action toward the goal from `pos`.
    pub fn steer(&self, pos: &[f64]) -> Vec<f64> {
        let here = MazeLayout::cell_of(pos);
        let aim = match self.layout.cell_path(here, self.goal) {
            Some(path) if path.len() > 1 => MazeLayout::cell_center(path[1]),
            _ => MazeLayout::cell_center(self.goal),
        };
        let step = self.layout.step_size;
        vec![
            ((aim[0] - pos[0]) / step).clamp(-1.0, 1.0),
            ((aim[1] - pos[1]) / step).clamp(-1.0, 1.0),
        ]
    }

}

fn add_noise<R: Rng + ?Sized>(action: &mut [f64], noise: &mut OuNoise, rng: &mut R) {
    if noise.sigma > 0.0 {
        let n = noise.sample(rng);
        for (a, e) in action.iter_mut().zip(n) {
            *a = (*a + e).clamp(-1.0, 1.0);
        }
    }
}

impl Policy for ScriptedMazePolicy {
    fn reset(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0a11_ce5c_0de);
        self.noise.x = [0.0; 2];
    }

    fn act(&mut self, state: &[f64]) -> Result<Vec<f64>> {
        let mut a = self.steer(state);
        add_noise(&mut a, &mut self.noise, &mut self.rng);
        Ok(a)
    }
}

/// Proportional controller `a = 0.5 (target - s)` plus Gaussian noise.
pub struct ChainController {
    target: f64,
    noise_sigma: f64,
    rng: ChaCha8Rng,
}

impl ChainController {
    pub fn new(target: f64, noise_sigma: f64) -> Self {
        ChainController {
            target,
            noise_sigma,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }
}

impl Policy for ChainController {
    fn reset(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0c4a_1a);
    }

    fn act(&mut self, state: &[f64]) -> Result<Vec<f64>> {
        let e: f64 = if self.noise_sigma > 0.0 {
            StandardNormal.sample(&mut self.rng)
        } else {
            0.0
        };
        Ok(vec![(0.5 * (self.target - state[0]) + self.noise_sigma * e).clamp(-1.0, 1.0)])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectMode {
    /// Random start cells and a chain of random target cells; fixed-length episodes.
    Diverse,
    /// From the task start to the task goal; episodes end on goal entry or at the cap.
    Goal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MazeCollectConfig {
    pub episodes: usize,
    /// Fixed length in diverse mode, step cap in goal mode.
    pub episode_len: usize,
    pub noise_sigma: f64,
    pub ou_theta: f64,
    pub mode: CollectMode,
    pub reward: GoalReward,
    /// Reward goal; in goal mode also the start and steering target.
    pub task: Option<MazeTask>,
    pub seed: u64,
}

impl MazeCollectConfig {
    pub fn diverse(episodes: usize, episode_len: usize, seed: u64) -> Self {
        MazeCollectConfig {
            episodes,
            episode_len,
            noise_sigma: 2.0,
            ou_theta: 1.0,
            mode: CollectMode::Diverse,
            reward: GoalReward::Inside,
            task: None,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub free_cells: usize,
    pub visited_cells: usize,
    pub fraction: f64,
}

pub fn coverage(layout: &MazeLayout, dataset: &Dataset) -> CoverageReport {
    let visited: BTreeSet<Cell> = dataset
        .all_states()
        .rows()
        .into_iter()
        .map(|r| MazeLayout::cell_of(r.as_slice().expect("standard layout")))
        .filter(|&(r, c)| !layout.is_wall(r, c))
        .collect();
    let free = layout.free_cells().len();
    CoverageReport {
        free_cells: free,
        visited_cells: visited.len(),
        fraction: visited.len() as f64 / free as f64,
    }
}

fn jittered(layout: &MazeLayout, cell: Cell, rng: &mut ChaCha8Rng) -> [f64; 2] {
    let c = MazeLayout::cell_center(cell);
    let j = layout.reset_jitter;
    if j > 0.0 {
        [c[0] + rng.random_range(-j..=j), c[1] + rng.random_range(-j..=j)]
    } else {
        c
    }
}

/// Rolls the scripted controller through the maze dynamics and labels each
/// transition with [`goal_reward`].
pub fn collect_maze(layout: &MazeLayout, config: &MazeCollectConfig) -> Result<(Dataset, CoverageReport)> {
    if config.episodes == 0 || config.episode_len == 0 {
        return Err(VmgError::invalid("collection needs episodes >= 1 and episode_len >= 1"));
    }
    let task = config.task.unwrap_or(MazeTask {
        start: layout.start,
        goal: layout.goal,
    });
    let reward = goal_reward(layout, task.goal, config.reward);
    let step_noise = Normal::new(0.0, layout.noise_sigma)
        .map_err(|e| VmgError::invalid(format!("noise sigma: {e}")))?;
    let free = layout.free_cells();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut policy = ScriptedMazePolicy::new(layout.clone(), task.goal, config.noise_sigma, config.ou_theta);
    let mut episodes = Vec::with_capacity(config.episodes);
    for _ in 0..config.episodes {
        policy.noise.x = [0.0; 2];
        let start = match config.mode {
            CollectMode::Diverse => free[rng.random_range(0..free.len())],
            CollectMode::Goal => task.start,
        };
        let mut target = match config.mode {
            CollectMode::Diverse => free[rng.random_range(0..free.len())],
            CollectMode::Goal => task.goal,
        };
        policy.set_goal(target);
        let mut pos = jittered(layout, start, &mut rng);
        let mut states = vec![pos];
        let mut actions = Vec::new();
        let mut rewards = Vec::new();
        let mut terminal = false;
        for _ in 0..config.episode_len {
            if config.mode == CollectMode::Diverse && MazeLayout::cell_of(&pos) == target {
                target = free[rng.random_range(0..free.len())];
                policy.set_goal(target);
            }
            let mut a = policy.steer(&pos);
            add_noise(&mut a, &mut policy.noise, &mut rng);
            let n = if layout.noise_sigma > 0.0 {
                [step_noise.sample(&mut rng), step_noise.sample(&mut rng)]
            } else {
                [0.0, 0.0]
            };
            let next = layout.advance(&pos, &a, n);
            rewards.push(reward(&pos, &a, &next));
            if config.mode == CollectMode::Goal
                && layout.in_goal(task.goal, &next)
                && !layout.in_goal(task.goal, &pos)
            {
                terminal = true;
            }
            actions.push(a);
            states.push(next);
            pos = next;
            if terminal {
                break;
            }
        }
        let t = actions.len();
        let states = Array2::from_shape_fn((t + 1, 2), |(i, j)| states[i][j]);
        let actions = Array2::from_shape_fn((t, 2), |(i, j)| actions[i][j]);
        episodes.push(Episode::new(states, actions, rewards, terminal)?);
    }
    let dataset = Dataset::new(
        episodes,
        DatasetMeta {
            env: layout.name.clone(),
            seed: Some(config.seed),
        },
    )?;
    let report = coverage(layout, &dataset);
    log::info!(
        "collected {} transitions, {}/{} free cells visited",
        dataset.num_transitions(),
        report.visited_cells,
        report.free_cells
    );
    Ok((dataset, report))
}

/// Noisy proportional controller toward random targets on the chain.
pub fn collect_chain(
    config: &ChainConfig,
    episodes: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if episodes == 0 {
        return Err(VmgError::invalid("collection needs episodes >= 1"));
    }
    let env = super::chain::ChainEnv::new(config.clone())?;
    let step_noise = Normal::new(0.0, config.noise_sigma)
        .map_err(|e| VmgError::invalid(format!("noise sigma: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = config.bound;
    let len = config.max_episode_steps;
    let mut eps = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let w = config.start_spread;
        let mut s = if w > 0.0 { rng.random_range(-w..=w) } else { 0.0 };
        let target = if rng.random_bool(0.5) {
            config.goal
        } else {
            rng.random_range(-b..=b)
        };
        let mut states = vec![s];
        let mut actions = Vec::with_capacity(len);
        let mut rewards = Vec::with_capacity(len);
        for _ in 0..len {
            let e: f64 = StandardNormal.sample(&mut rng);
            let a = (0.5 * (target - s) + noise_sigma * e).clamp(-1.0, 1.0);
            let n = if config.noise_sigma > 0.0 { step_noise.sample(&mut rng) } else { 0.0 };
            s = env.advance(s, a, n);
            actions.push(a);
            rewards.push(env.reward_at(s));
            states.push(s);
        }
        eps.push(Episode::new(
            Array2::from_shape_vec((len + 1, 1), states).expect("shape"),
            Array2::from_shape_vec((len, 1), actions).expect("shape"),
            rewards,
            false,
        )?);
    }
    Dataset::new(
        eps,
        DatasetMeta {
            env: "chain".into(),
            seed: Some(seed),
        },
    )
}
