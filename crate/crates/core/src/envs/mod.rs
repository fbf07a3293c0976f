//! Built-in toy environments and scripted data collectors.

pub mod chain;
pub mod collect;
pub mod maze;
pub mod reward;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VmgError};

pub use chain::{ChainConfig, ChainEnv};
pub use collect::{
    collect_chain, collect_maze, coverage, goal_reward, ChainController, CollectMode,
    CoverageReport, GoalReward, MazeCollectConfig, RandomPolicy, ScriptedMazePolicy,
};
pub use maze::{MazeLayout, MazeTask, PointMazeEnv};
pub use reward::{RewardFn, RewardSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    SparseGoal,
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_bounds: Vec<(f64, f64)>,
    pub max_episode_steps: usize,
    pub reward_kind: RewardKind,
    /// Normalized-score anchors.
    pub random_score: f64,
    pub expert_score: f64,
}

impl EnvSpec {
    pub fn clip_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(&self.action_bounds)
            .map(|(a, (lo, hi))| a.clamp(*lo, *hi))
            .collect()
    }

    /// `100 * (score - random) / (expert - random)`.
    pub fn normalized_score(&self, score: f64) -> f64 {
        100.0 * (score - self.random_score) / (self.expert_score - self.random_score)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state: Vec<f64>,
    pub reward: f64,
    /// Goal reached.
    pub terminal: bool,
    /// Step cap reached without reaching the goal.
    pub truncated: bool,
    /// The action was outside the bounds and was clipped.
    pub clipped: bool,
}

impl Step {
    pub fn done(&self) -> bool {
        self.terminal || self.truncated
    }
}

pub trait Env {
    fn spec(&self) -> &EnvSpec;
    /// Starts an episode; all randomness of the episode derives from `seed`.
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<Step>;
}

/// Maps states to actions during rollouts.
pub trait Policy {
    /// Called at the start of each episode with the episode seed.
    fn reset(&mut self, seed: u64);
    fn act(&mut self, state: &[f64]) -> Result<Vec<f64>>;
}

pub const ENV_NAMES: [&str; 3] = ["umaze", "medium-maze", "chain"];

/// Builds a named built-in environment.
pub fn make_env(name: &str) -> Result<Box<dyn Env>> {
    match name {
        "umaze" => Ok(Box::new(PointMazeEnv::new(maze::umaze())?)),
        "medium-maze" => Ok(Box::new(PointMazeEnv::new(maze::medium_maze())?)),
        "chain" => Ok(Box::new(ChainEnv::new(ChainConfig::default())?)),
        other => Err(VmgError::invalid(format!(
            "unknown environment {other:?}; expected one of {}",
            ENV_NAMES.join(", ")
        ))),
    }
}

pub fn maze_layout(name: &str) -> Option<MazeLayout> {
    match name {
        "umaze" => Some(maze::umaze()),
        "medium-maze" => Some(maze::medium_maze()),
        _ => None,
    }
}

/// Episodes and first seed of the rollouts behind the normalized-score anchors.
pub const ANCHOR_EPISODES: usize = 100;
pub const ANCHOR_FIRST_SEED: u64 = 0;

/// Recomputes `(random_score, expert_score)` for a built-in environment:
/// mean returns of uniform random actions and of the noise-free scripted
/// controller. The layouts freeze these values.
pub fn compute_anchors(name: &str) -> Result<(f64, f64)> {
    let mut env = make_env(name)?;
    let mut random = RandomPolicy::new(env.spec());
    let mut expert: Box<dyn Policy> = match maze_layout(name) {
        Some(layout) => {
            let goal = layout.goal;
            Box::new(ScriptedMazePolicy::new(layout, goal, 0.0, 1.0))
        }
        None => Box::new(ChainController::new(ChainConfig::default().goal, 0.0)),
    };
    let mut mean_return = |policy: &mut dyn Policy| -> Result<f64> {
        let mut total = 0.0;
        for i in 0..ANCHOR_EPISODES as u64 {
            let seed = ANCHOR_FIRST_SEED + i;
            let mut state = env.reset(seed);
            policy.reset(seed);
            loop {
                let step = env.step(&policy.act(&state)?)?;
                total += step.reward;
                if step.done() {
                    break;
                }
                state = step.state;
            }
        }
        Ok(total / ANCHOR_EPISODES as f64)
    };
    let r = mean_return(&mut random)?;
    let e = mean_return(expert.as_mut())?;
    Ok((r, e))
}
