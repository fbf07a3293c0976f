//! Offline experience: episodes of transitions.
//!
//! An [`Episode`] stores its `T + 1` visited states once, so consecutive
//! transitions chain by construction. The on-disk formats store explicit
//! `next_observations` and the loaders reject any file where they disagree
//! with the following observation.

mod io;

use ndarray::{Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VmgError};
use crate::hash::sha256_hex;

pub use io::{load, save, DatasetFormat};

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    states: Array2<f64>,
    actions: Array2<f64>,
    rewards: Vec<f64>,
    terminal: bool,
}

impl Episode {
    /// `states` has one more row than `actions`; `terminal` marks the last transition.
    pub fn new(
        states: Array2<f64>,
        actions: Array2<f64>,
        rewards: Vec<f64>,
        terminal: bool,
    ) -> Result<Self> {
        let t = actions.nrows();
        if t == 0 {
            return Err(VmgError::Schema("episode has no transitions".into()));
        }
        if states.nrows() != t + 1 {
            return Err(VmgError::Schema(format!(
                "episode with {t} actions needs {} states, got {}",
                t + 1,
                states.nrows()
            )));
        }
        if rewards.len() != t {
            return Err(VmgError::Schema(format!(
                "episode with {t} actions has {} rewards",
                rewards.len()
            )));
        }
        if let Some(bad) = states
            .iter()
            .chain(actions.iter())
            .chain(rewards.iter())
            .find(|v| !v.is_finite())
        {
            return Err(VmgError::Schema(format!("episode contains non-finite value {bad}")));
        }
        Ok(Episode {
            states,
            actions,
            rewards,
            terminal,
        })
    }

    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.actions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn states(&self) -> &Array2<f64> {
        &self.states
    }

    pub fn actions(&self) -> &Array2<f64> {
        &self.actions
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn terminal(&self) -> bool {
        self.terminal
    }

    pub fn state(&self, t: usize) -> ArrayView1<'_, f64> {
        self.states.row(t)
    }

    pub fn transition(&self, t: usize) -> Transition {
        Transition {
            state: self.states.row(t).to_vec(),
            action: self.actions.row(t).to_vec(),
            reward: self.rewards[t],
            next_state: self.states.row(t + 1).to_vec(),
            terminal: self.terminal && t + 1 == self.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub env: String,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    episodes: Vec<Episode>,
    state_dim: usize,
    action_dim: usize,
    meta: DatasetMeta,
    /// `transition_offsets[e]` is the global index of episode `e`'s first transition.
    transition_offsets: Vec<usize>,
    state_offsets: Vec<usize>,
}

/// One translator training example: the state at `t`, the state `k` steps
/// later, and the action taken at `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct TranslatorPair {
    pub state: Vec<f64>,
    pub future_state: Vec<f64>,
    pub action: Vec<f64>,
    pub k: usize,
}

impl Dataset {
    pub fn new(episodes: Vec<Episode>, meta: DatasetMeta) -> Result<Self> {
        let first = episodes
            .first()
            .ok_or_else(|| VmgError::Schema("no episodes".into()))?;
        let state_dim = first.states.ncols();
        let action_dim = first.actions.ncols();
        for (i, ep) in episodes.iter().enumerate() {
            if ep.states.ncols() != state_dim || ep.actions.ncols() != action_dim {
                return Err(VmgError::Schema(format!(
                    "episode {i} has dims ({}, {}), expected ({state_dim}, {action_dim})",
                    ep.states.ncols(),
                    ep.actions.ncols()
                )));
            }
        }
        let mut transition_offsets = Vec::with_capacity(episodes.len());
        let mut state_offsets = Vec::with_capacity(episodes.len());
        let (mut n, mut s) = (0, 0);
        for ep in &episodes {
            transition_offsets.push(n);
            state_offsets.push(s);
            n += ep.len();
            s += ep.len() + 1;
        }
        Ok(Dataset {
            episodes,
            state_dim,
            action_dim,
            meta,
            transition_offsets,
            state_offsets,
        })
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    /// Total transition count `N`.
    pub fn num_transitions(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    /// Total stored states: `N` plus one final state per episode.
    pub fn num_states(&self) -> usize {
        self.num_transitions() + self.episodes.len()
    }

    /// Global state index of state `t` in episode `e`.
    pub fn state_index(&self, e: usize, t: usize) -> usize {
        self.state_offsets[e] + t
    }

    /// Maps a global transition index to `(episode, step)`.
    pub fn locate(&self, index: usize) -> (usize, usize) {
        let e = self.transition_offsets.partition_point(|&o| o <= index) - 1;
        (e, index - self.transition_offsets[e])
    }

    pub fn transition(&self, index: usize) -> Transition {
        let (e, t) = self.locate(index);
        self.episodes[e].transition(t)
    }

    /// All states in storage order (episode by episode, `T + 1` rows each).
    pub fn all_states(&self) -> Array2<f64> {
        let views: Vec<_> = self.episodes.iter().map(|e| e.states.view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("equal state dims")
    }

    /// Iterates `(state_index, next_state_index, reward)` for every transition.
    pub fn transition_state_indices(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.episodes.iter().enumerate().flat_map(move |(e, ep)| {
            let base = self.state_offsets[e];
            ep.rewards
                .iter()
                .enumerate()
                .map(move |(t, &r)| (base + t, base + t + 1, r))
        })
    }

    /// Uniform with replacement over all transitions.
    pub fn sample_transition_indices<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        if batch_size < 2 {
            return Err(VmgError::invalid(format!(
                "batch size must be >= 2 for in-batch negatives, got {batch_size}"
            )));
        }
        let n = self.num_transitions();
        Ok((0..batch_size).map(|_| rng.random_range(0..n)).collect())
    }

    pub fn sample_transition_batch<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<Transition>> {
        Ok(self
            .sample_transition_indices(batch_size, rng)?
            .into_iter()
            .map(|i| self.transition(i))
            .collect())
    }

    /// Row-stacked `(states, actions, next_states)` for the given transitions.
    pub fn gather(&self, indices: &[usize]) -> TransitionBatch {
        let b = indices.len();
        let mut states = Array2::zeros((b, self.state_dim));
        let mut actions = Array2::zeros((b, self.action_dim));
        let mut next_states = Array2::zeros((b, self.state_dim));
        for (row, &i) in indices.iter().enumerate() {
            let (e, t) = self.locate(i);
            let ep = &self.episodes[e];
            states.row_mut(row).assign(&ep.states.row(t));
            actions.row_mut(row).assign(&ep.actions.row(t));
            next_states.row_mut(row).assign(&ep.states.row(t + 1));
        }
        TransitionBatch {
            states,
            actions,
            next_states,
        }
    }

    /// New dataset with rewards replaced by `reward_fn(s, a, s')`; states,
    /// actions, and episode boundaries are copied unchanged.
    pub fn relabel_rewards<F>(&self, reward_fn: F) -> Result<Dataset>
    where
        F: Fn(&[f64], &[f64], &[f64]) -> f64,
    {
        let mut episodes = Vec::with_capacity(self.episodes.len());
        for (e, ep) in self.episodes.iter().enumerate() {
            let mut rewards = Vec::with_capacity(ep.len());
            for t in 0..ep.len() {
                let s = ep.states.row(t);
                let a = ep.actions.row(t);
                let s2 = ep.states.row(t + 1);
                let r = reward_fn(
                    s.as_slice().expect("row-major"),
                    a.as_slice().expect("row-major"),
                    s2.as_slice().expect("row-major"),
                );
                if !r.is_finite() {
                    return Err(VmgError::NumericFault {
                        location: format!("transition {}", self.transition_offsets[e] + t),
                        detail: format!("reward function returned {r}"),
                    });
                }
                rewards.push(r);
            }
            episodes.push(Episode {
                states: ep.states.clone(),
                actions: ep.actions.clone(),
                rewards,
                terminal: ep.terminal,
            });
        }
        Dataset::new(episodes, self.meta.clone())
    }

    /// Reward-free access for the learning stages.
    pub fn trajectories(&self) -> Trajectories<'_> {
        Trajectories { inner: self }
    }

    /// SHA-256 of the binary encoding.
    pub fn content_hash(&self) -> String {
        sha256_hex(&io::to_binary(self))
    }
}

/// Row-stacked transitions used by training losses.
#[derive(Debug, Clone)]
pub struct TransitionBatch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub next_states: Array2<f64>,
}

/// View of a dataset that exposes states and actions but no rewards.
#[derive(Clone, Copy)]
pub struct Trajectories<'a> {
    inner: &'a Dataset,
}

impl<'a> Trajectories<'a> {
    pub fn state_dim(&self) -> usize {
        self.inner.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.inner.action_dim
    }

    pub fn num_transitions(&self) -> usize {
        self.inner.num_transitions()
    }

    pub fn num_episodes(&self) -> usize {
        self.inner.episodes.len()
    }

    pub fn locate(&self, index: usize) -> (usize, usize) {
        self.inner.locate(index)
    }

    pub fn episode_len(&self, e: usize) -> usize {
        self.inner.episodes[e].len()
    }

    pub fn episode_states(&self, e: usize) -> &'a Array2<f64> {
        &self.inner.episodes[e].states
    }

    pub fn episode_actions(&self, e: usize) -> &'a Array2<f64> {
        &self.inner.episodes[e].actions
    }

    pub fn sample_transition_indices<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        self.inner.sample_transition_indices(batch_size, rng)
    }

    pub fn gather(&self, indices: &[usize]) -> TransitionBatch {
        self.inner.gather(indices)
    }
}

/// Draws `k` uniformly from `1..=min(K, T - t)` and returns the pair used to
/// train the action translator. Returns `Ok(None)` when `t` is the final
/// state of the episode (no action and no future); the caller resamples.
pub fn sample_translator_pair<R: Rng + ?Sized>(
    states: &Array2<f64>,
    actions: &Array2<f64>,
    t: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<Option<TranslatorPair>> {
    let len = actions.nrows();
    if horizon == 0 {
        return Err(VmgError::invalid("translator horizon K must be >= 1"));
    }
    if t > len {
        return Err(VmgError::invalid(format!(
            "step {t} outside episode with {} states",
            len + 1
        )));
    }
    if t == len {
        return Ok(None);
    }
    let max_k = horizon.min(len - t);
    let k = rng.random_range(1..=max_k);
    Ok(Some(TranslatorPair {
        state: states.row(t).to_vec(),
        future_state: states.row(t + k).to_vec(),
        action: actions.row(t).to_vec(),
        k,
    }))
}
