//! One-dimensional drift environment with a dense distance reward.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Env, EnvSpec, RewardKind, Step};
use crate::error::{Result, VmgError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    /// Position is clamped to `[-bound, bound]`.
    pub bound: f64,
    pub goal: f64,
    pub noise_sigma: f64,
    /// Reset position is uniform in `[-start_spread, start_spread]`.
    pub start_spread: f64,
    pub max_episode_steps: usize,
    pub random_score: f64,
    pub expert_score: f64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            bound: 5.0,
            goal: 3.0,
            noise_sigma: 0.05,
            start_spread: 4.0,
            max_episode_steps: 50,
            random_score: -172.684_158_186_623_96,
            expert_score: -7.651_030_603_907_259,
        }
    }
}

pub struct ChainEnv {
    config: ChainConfig,
    spec: EnvSpec,
    pos: f64,
    steps: usize,
    rng: ChaCha8Rng,
    noise: Normal<f64>,
    active: bool,
}

impl ChainEnv {
    pub fn new(config: ChainConfig) -> Result<Self> {
        if !(config.bound > 0.0) || config.goal.abs() > config.bound || config.max_episode_steps == 0 {
            return Err(VmgError::invalid("chain needs bound > 0, |goal| <= bound, max_episode_steps > 0"));
        }
        let noise = Normal::new(0.0, config.noise_sigma)
            .map_err(|e| VmgError::invalid(format!("noise sigma: {e}")))?;
        let spec = EnvSpec {
            name: "chain".into(),
            state_dim: 1,
            action_dim: 1,
            action_bounds: vec![(-1.0, 1.0)],
            max_episode_steps: config.max_episode_steps,
            reward_kind: RewardKind::Dense,
            random_score: config.random_score,
            expert_score: config.expert_score,
        };
        Ok(ChainEnv {
            config,
            spec,
            pos: 0.0,
            steps: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
            noise,
            active: false,
        })
    }

    pub fn config(&self) -> &ChainConfig {
        &self.config
    }

    pub fn set_position(&mut self, pos: f64) {
        self.pos = pos.clamp(-self.config.bound, self.config.bound);
        self.steps = 0;
        self.active = true;
    }

    /// `clamp(s + clip(a) + noise)`.
    pub fn advance(&self, pos: f64, action: f64, noise: f64) -> f64 {
        (pos + action.clamp(-1.0, 1.0) + noise).clamp(-self.config.bound, self.config.bound)
    }

    pub fn reward_at(&self, pos: f64) -> f64 {
        -(pos - self.config.goal).abs()
    }
}

impl Env for ChainEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let w = self.config.start_spread;
        self.pos = if w > 0.0 { self.rng.random_range(-w..=w) } else { 0.0 };
        self.steps = 0;
        self.active = true;
        vec![self.pos]
    }

    fn step(&mut self, action: &[f64]) -> Result<Step> {
        if !self.active {
            return Err(VmgError::State("step called on a finished or unreset episode".into()));
        }
        if action.len() != 1 {
            return Err(VmgError::invalid(format!("chain action needs 1 entry, got {}", action.len())));
        }
        let noise = if self.config.noise_sigma > 0.0 {
            self.noise.sample(&mut self.rng)
        } else {
            0.0
        };
        self.pos = self.advance(self.pos, action[0], noise);
        self.steps += 1;
        let truncated = self.steps >= self.config.max_episode_steps;
        self.active = !truncated;
        Ok(Step {
            state: vec![self.pos],
            reward: self.reward_at(self.pos),
            terminal: false,
            truncated,
            clipped: !(-1.0..=1.0).contains(&action[0]),
        })
    }
}
