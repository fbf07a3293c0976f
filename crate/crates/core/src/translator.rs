//! Goal-conditioned action regression.
//!
//! The translator maps `(s, s_target)` to the action that moves the agent
//! from `s` toward `s_target`. Training pairs take the logged action at step
//! `t` and a state `k` steps later, with `k` uniform in `1..=min(K, T - t)`.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{sample_translator_pair, Trajectories};
use crate::error::{Result, VmgError};
use crate::hash::sha256_hex;
use crate::metric::{checkpoint_path, EpochLoss, TrainConfig};
use crate::nn::{adam_step, AdamConfig, AdamState, BoundMlp, Checkpoint, Mlp, Tape, Var, HIDDEN_WIDTH};

pub const DEFAULT_HORIZON: usize = 10;

const CHECKPOINT_KIND: &str = "vmg-translator";

#[derive(Debug, Clone, PartialEq)]
pub struct Translator {
    pub net: Mlp,
    pub horizon: usize,
}

#[derive(Serialize, Deserialize)]
struct TranslatorMeta {
    horizon: usize,
    state_dim: usize,
    action_dim: usize,
    epoch: usize,
}

#[derive(Debug, Clone)]
pub struct TranslatorTrainOutcome {
    pub model: Translator,
    /// Per-epoch regression loss, stored in the `total` field.
    pub curves: Vec<EpochLoss>,
    pub checkpoints: Vec<(usize, std::path::PathBuf)>,
}

impl Translator {
    pub fn new(state_dim: usize, action_dim: usize, horizon: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::with_hidden(state_dim, action_dim, horizon, HIDDEN_WIDTH, rng)
    }

    pub fn with_hidden(
        state_dim: usize,
        action_dim: usize,
        horizon: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Translator {
            net: Mlp::with_hidden(2 * state_dim, hidden, action_dim, rng),
            horizon,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.net.in_dim() / 2
    }

    pub fn action_dim(&self) -> usize {
        self.net.out_dim()
    }

    pub fn translate(&self, state: &[f64], target: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.state_dim() || target.len() != self.state_dim() {
            return Err(VmgError::invalid(format!(
                "translator expects states of length {}, got {} and {}",
                self.state_dim(),
                state.len(),
                target.len()
            )));
        }
        let mut input = Vec::with_capacity(2 * state.len());
        input.extend_from_slice(state);
        input.extend_from_slice(target);
        self.net.forward(&input)
    }

    /// Draws `batch_size` training pairs. Returns `(inputs, actions)` where
    /// each input row is `[s_t, s_{t+k}]`.
    pub fn sample_batch(
        &self,
        data: Trajectories<'_>,
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let sd = data.state_dim();
        let mut inputs = Array2::zeros((batch_size, 2 * sd));
        let mut actions = Array2::zeros((batch_size, data.action_dim()));
        let idx = data.sample_transition_indices(batch_size.max(2), rng)?;
        for (row, &i) in idx.iter().take(batch_size).enumerate() {
            let (e, t) = data.locate(i);
            let pair = sample_translator_pair(
                data.episode_states(e),
                data.episode_actions(e),
                t,
                self.horizon,
                rng,
            )?
            .ok_or_else(|| VmgError::Internal("transition index mapped to a final state".into()))?;
            let mut r = inputs.row_mut(row);
            for j in 0..sd {
                r[j] = pair.state[j];
                r[sd + j] = pair.future_state[j];
            }
            actions
                .row_mut(row)
                .assign(&ndarray::ArrayView1::from(&pair.action[..]));
        }
        Ok((inputs, actions))
    }

    /// Mean squared action error over a batch.
    pub fn loss(&self, inputs: &Array2<f64>, actions: &Array2<f64>) -> Result<f64> {
        let pred = self.net.forward_batch(inputs)?;
        let err = &pred - actions;
        Ok(err.map_axis(Axis(1), |r| r.dot(&r)).mean().unwrap_or(0.0))
    }

    /// Records `mean_i |Tran(x_i) - a_i|^2` on `tape`.
    pub fn loss_on_tape(&self, tape: &mut Tape, inputs: Array2<f64>, actions: Array2<f64>) -> (BoundMlp, Var) {
        let bound = tape.bind_mlp(&self.net);
        let x = tape.leaf(inputs);
        let a = tape.leaf(actions);
        let pred = bound.forward(tape, x);
        let err = tape.sub(pred, a);
        let sq = tape.row_sq_norm(err);
        (bound, tape.mean(sq))
    }

    pub fn to_checkpoint(&self, epoch: usize) -> Checkpoint {
        let meta = TranslatorMeta {
            horizon: self.horizon,
            state_dim: self.state_dim(),
            action_dim: self.action_dim(),
            epoch,
        };
        let mut ck = Checkpoint::new(
            CHECKPOINT_KIND,
            serde_json::to_value(meta).expect("meta serializes"),
        );
        ck.push_mlp("translator", &self.net);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(VmgError::Schema(format!(
                "expected a {CHECKPOINT_KIND} checkpoint, found {}",
                ck.kind
            )));
        }
        let meta: TranslatorMeta = serde_json::from_value(ck.meta.clone())?;
        let net = ck.take_mlp("translator")?;
        if net.in_dim() != 2 * meta.state_dim || net.out_dim() != meta.action_dim {
            return Err(VmgError::Schema("translator checkpoint shapes are inconsistent".into()));
        }
        Ok(Translator {
            net,
            horizon: meta.horizon,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }

    pub fn content_hash(&self) -> String {
        sha256_hex(&self.to_checkpoint(0).to_bytes())
    }
}

/// Fits the translator by mean squared error on sampled `(s_t, s_{t+k}) -> a_t` pairs.
///
/// Only states and actions are visible to this function.
pub fn train_translator(
    mut model: Translator,
    data: Trajectories<'_>,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TranslatorTrainOutcome> {
    if model.state_dim() != data.state_dim() || model.action_dim() != data.action_dim() {
        return Err(VmgError::invalid("translator dimensions do not match the dataset"));
    }
    let mut adam = AdamState::new(
        &model.net,
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let steps = config.steps_for(data.num_transitions());
    let mut curves = Vec::with_capacity(config.epochs);
    let mut checkpoints = Vec::new();
    for epoch in 1..=config.epochs {
        let mut sum = 0.0;
        for _ in 0..steps {
            let (inputs, actions) = model.sample_batch(data, config.batch_size, &mut rng)?;
            let mut tape = Tape::new();
            let (bound, loss) = model.loss_on_tape(&mut tape, inputs, actions);
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(VmgError::NumericFault {
                    location: format!("translator training epoch {epoch}"),
                    detail: format!("loss became {value}"),
                });
            }
            sum += value;
            let grads = tape.backward(loss)?;
            let g = grads.mlp_grads(&bound, &model.net);
            adam_step(&mut model.net, &g, &mut adam)?;
        }
        let mean = sum / steps as f64;
        curves.push(EpochLoss {
            epoch,
            contrastive: 0.0,
            action: mean,
            total: mean,
        });
        if let Some(dir) = checkpoint_dir {
            if epoch % config.checkpoint_every.max(1) == 0 || epoch == config.epochs {
                let mut ck = model.to_checkpoint(epoch);
                ck.push_adam("translator", &adam);
                let path = checkpoint_path(dir, "translator", epoch);
                ck.write(&path)?;
                checkpoints.push((epoch, path));
            }
        }
    }
    Ok(TranslatorTrainOutcome {
        model,
        curves,
        checkpoints,
    })
}
