//! Metric-space learning.
//!
//! Three networks share one embedding space of dimension `d`:
//!
//! * the state encoder maps a state `s` to a feature `f_s`,
//! * the action encoder maps `(f_s, a)` to a displacement `df`, so that
//!   `f_s + df` predicts the feature of the next state,
//! * the action decoder maps `(f_s, df)` back to `a`.
//!
//! Training minimizes `L_metric = L_c + L_a` where, per batch of `B`
//! transitions and margin `m`,
//!
//! ```text
//! L_c = mean_i |pred_i - f'_i|^2 + mean_{i != j} max(m - |pred_i - f'_j|^2, 0)
//! L_a = mean_i |dec(f_i, df_i) - a_i|^2 + mean_i max(|df_i| - m, 0)
//! ```
//!
//! with every other next state in the batch acting as a negative for item `i`.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Trajectories, TransitionBatch};
use crate::error::{Result, VmgError};
use crate::hash::sha256_hex;
use crate::nn::{adam_step, AdamConfig, AdamState, BoundMlp, Checkpoint, Mlp, Tape, Var, HIDDEN_WIDTH};

pub const DEFAULT_METRIC_DIM: usize = 10;
pub const DEFAULT_MARGIN: f64 = 1.0;

const CHECKPOINT_KIND: &str = "vmg-metric";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricModel {
    pub enc_s: Mlp,
    pub enc_a: Mlp,
    pub dec_a: Mlp,
    pub metric_dim: usize,
    pub margin: f64,
}

#[derive(Serialize, Deserialize)]
struct MetricMeta {
    metric_dim: usize,
    margin: f64,
    state_dim: usize,
    action_dim: usize,
    epoch: usize,
}

impl MetricModel {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        metric_dim: usize,
        margin: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self::with_hidden(state_dim, action_dim, metric_dim, margin, HIDDEN_WIDTH, rng)
    }

    pub fn with_hidden(
        state_dim: usize,
        action_dim: usize,
        metric_dim: usize,
        margin: f64,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        MetricModel {
            enc_s: Mlp::with_hidden(state_dim, hidden, metric_dim, rng),
            enc_a: Mlp::with_hidden(metric_dim + action_dim, hidden, metric_dim, rng),
            dec_a: Mlp::with_hidden(2 * metric_dim, hidden, action_dim, rng),
            metric_dim,
            margin,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.enc_s.in_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.dec_a.out_dim()
    }

    pub fn encode_state(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.enc_s.forward(s)
    }

    pub fn encode_states(&self, states: &Array2<f64>) -> Result<Array2<f64>> {
        self.enc_s.forward_batch(states)
    }

    /// The displacement `df` that action `a` causes at state `s`.
    pub fn transition_feature(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        if a.len() != self.action_dim() {
            return Err(VmgError::invalid(format!(
                "expected action of length {}, got {}",
                self.action_dim(),
                a.len()
            )));
        }
        let mut input = self.encode_state(s)?;
        input.extend_from_slice(a);
        self.enc_a.forward(&input)
    }

    /// `f_s + df`.
    pub fn predict_next_feature(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        let f = self.encode_state(s)?;
        let df = self.transition_feature(s, a)?;
        Ok(f.iter().zip(&df).map(|(x, d)| x + d).collect())
    }

    fn check_batch(&self, batch: &TransitionBatch) -> Result<()> {
        if batch.states.ncols() != self.state_dim() || batch.next_states.ncols() != self.state_dim()
        {
            return Err(VmgError::invalid("batch state dimension does not match the model"));
        }
        if batch.actions.ncols() != self.action_dim() {
            return Err(VmgError::invalid("batch action dimension does not match the model"));
        }
        Ok(())
    }

    pub fn contrastive_loss(&self, batch: &TransitionBatch) -> Result<f64> {
        let mut tape = Tape::new();
        let (_, nodes) = self.losses_on_tape(&mut tape, batch)?;
        Ok(tape.scalar(nodes.contrastive))
    }

    pub fn action_loss(&self, batch: &TransitionBatch) -> Result<f64> {
        let mut tape = Tape::new();
        let (_, nodes) = self.losses_on_tape(&mut tape, batch)?;
        Ok(tape.scalar(nodes.action))
    }

    /// Records the forward pass of all three networks and both loss heads.
    pub fn losses_on_tape(
        &self,
        tape: &mut Tape,
        batch: &TransitionBatch,
    ) -> Result<(BoundMetric, MetricLossNodes)> {
        self.check_batch(batch)?;
        if batch.states.nrows() < 2 {
            return Err(VmgError::invalid(format!(
                "contrastive loss needs at least 2 transitions, got {}",
                batch.states.nrows()
            )));
        }
        let bound = BoundMetric {
            enc_s: tape.bind_mlp(&self.enc_s),
            enc_a: tape.bind_mlp(&self.enc_a),
            dec_a: tape.bind_mlp(&self.dec_a),
        };
        let s = tape.leaf(batch.states.clone());
        let a = tape.leaf(batch.actions.clone());
        let s2 = tape.leaf(batch.next_states.clone());

        let f = bound.enc_s.forward(tape, s);
        let f_next = bound.enc_s.forward(tape, s2);
        let fa = tape.concat_cols(f, a);
        let df = bound.enc_a.forward(tape, fa);
        let pred = tape.add(f, df);

        let contrastive = contrastive_head(tape, pred, f_next, self.margin);

        let fdf = tape.concat_cols(f, df);
        let a_rec = bound.dec_a.forward(tape, fdf);
        let action = action_head(tape, a_rec, a, df, self.margin);

        let total = tape.add(contrastive, action);
        Ok((
            bound,
            MetricLossNodes {
                contrastive,
                action,
                total,
            },
        ))
    }

    pub fn to_checkpoint(&self, epoch: usize) -> Checkpoint {
        let meta = MetricMeta {
            metric_dim: self.metric_dim,
            margin: self.margin,
            state_dim: self.state_dim(),
            action_dim: self.action_dim(),
            epoch,
        };
        let mut ck = Checkpoint::new(
            CHECKPOINT_KIND,
            serde_json::to_value(meta).expect("meta serializes"),
        );
        ck.push_mlp("enc_s", &self.enc_s);
        ck.push_mlp("enc_a", &self.enc_a);
        ck.push_mlp("dec_a", &self.dec_a);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(VmgError::Schema(format!(
                "expected a {CHECKPOINT_KIND} checkpoint, found {}",
                ck.kind
            )));
        }
        let meta: MetricMeta = serde_json::from_value(ck.meta.clone())?;
        let model = MetricModel {
            enc_s: ck.take_mlp("enc_s")?,
            enc_a: ck.take_mlp("enc_a")?,
            dec_a: ck.take_mlp("dec_a")?,
            metric_dim: meta.metric_dim,
            margin: meta.margin,
        };
        if model.enc_s.out_dim() != meta.metric_dim
            || model.enc_a.in_dim() != meta.metric_dim + meta.action_dim
            || model.dec_a.in_dim() != 2 * meta.metric_dim
        {
            return Err(VmgError::Schema("metric checkpoint shapes are inconsistent".into()));
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }

    /// SHA-256 of the parameter tensors, independent of training metadata.
    pub fn content_hash(&self) -> String {
        sha256_hex(&self.to_checkpoint(0).to_bytes())
    }
}

/// Feature-level contrastive loss.
///
/// `pred` and `targets` are `(B, d)`; row `j != i` of `targets` is a negative for row `i`.
pub fn contrastive_head(tape: &mut Tape, pred: Var, targets: Var, margin: f64) -> Var {
    let diff = tape.sub(pred, targets);
    let pos_sq = tape.row_sq_norm(diff);
    let pos = tape.mean(pos_sq);
    let pair = tape.pairwise_sq_dist(pred, targets);
    let hinge = tape.hinge_below(pair, margin);
    let neg = tape.mean_off_diagonal(hinge);
    tape.add(pos, neg)
}

/// Reconstruction error plus the penalty on displacements longer than `margin`.
pub fn action_head(tape: &mut Tape, reconstructed: Var, actions: Var, df: Var, margin: f64) -> Var {
    let err = tape.sub(reconstructed, actions);
    let err_sq = tape.row_sq_norm(err);
    let rec = tape.mean(err_sq);
    let len = tape.row_norm(df);
    let over = tape.hinge_above(len, margin);
    let penalty = tape.mean(over);
    tape.add(rec, penalty)
}

pub struct BoundMetric {
    pub enc_s: BoundMlp,
    pub enc_a: BoundMlp,
    pub dec_a: BoundMlp,
}

#[derive(Debug, Clone, Copy)]
pub struct MetricLossNodes {
    pub contrastive: Var,
    pub action: Var,
    pub total: Var,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (and at the last epoch).
    pub checkpoint_every: usize,
    /// Gradient steps per epoch; `None` means one pass, `ceil(N / batch_size)`.
    pub steps_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 800,
            batch_size: 100,
            learning_rate: 1e-3,
            seed: 0,
            checkpoint_every: 50,
            steps_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn steps_for(&self, num_transitions: usize) -> usize {
        self.steps_per_epoch
            .unwrap_or_else(|| num_transitions.div_ceil(self.batch_size))
            .max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub contrastive: f64,
    pub action: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct MetricTrainOutcome {
    pub model: MetricModel,
    pub curves: Vec<EpochLoss>,
    /// `(epoch, path)` of every checkpoint written.
    pub checkpoints: Vec<(usize, PathBuf)>,
}

pub fn checkpoint_path(dir: &Path, prefix: &str, epoch: usize) -> PathBuf {
    dir.join(format!("{prefix}_epoch{epoch:04}.ckpt"))
}

/// Minimizes `L_c + L_a` with Adam.
///
/// On a non-finite loss the run stops with a numeric-fault error; checkpoints
/// already on disk are left in place.
pub fn train_metric(
    mut model: MetricModel,
    data: Trajectories<'_>,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<MetricTrainOutcome> {
    if data.num_transitions() == 0 {
        return Err(VmgError::invalid("cannot train on an empty dataset"));
    }
    let adam_cfg = AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut adam_s = AdamState::new(&model.enc_s, adam_cfg)?;
    let mut adam_a = AdamState::new(&model.enc_a, adam_cfg)?;
    let mut adam_d = AdamState::new(&model.dec_a, adam_cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let steps = config.steps_for(data.num_transitions());

    let mut curves = Vec::with_capacity(config.epochs);
    let mut checkpoints = Vec::new();
    for epoch in 1..=config.epochs {
        let (mut sum_c, mut sum_a) = (0.0, 0.0);
        for _ in 0..steps {
            let idx = data.sample_transition_indices(config.batch_size, &mut rng)?;
            let batch = data.gather(&idx);
            let mut tape = Tape::new();
            let (bound, nodes) = model.losses_on_tape(&mut tape, &batch)?;
            let (lc, la) = (tape.scalar(nodes.contrastive), tape.scalar(nodes.action));
            if !(lc + la).is_finite() {
                let last = checkpoints.last().map(|(e, _): &(usize, PathBuf)| *e);
                return Err(VmgError::NumericFault {
                    location: format!("metric training epoch {epoch}"),
                    detail: format!("loss became {}; last good checkpoint epoch {last:?}", lc + la),
                });
            }
            sum_c += lc;
            sum_a += la;
            let grads = tape.backward(nodes.total)?;
            let g = grads.mlp_grads(&bound.enc_s, &model.enc_s);
            adam_step(&mut model.enc_s, &g, &mut adam_s)?;
            let g = grads.mlp_grads(&bound.enc_a, &model.enc_a);
            adam_step(&mut model.enc_a, &g, &mut adam_a)?;
            let g = grads.mlp_grads(&bound.dec_a, &model.dec_a);
            adam_step(&mut model.dec_a, &g, &mut adam_d)?;
        }
        let n = steps as f64;
        curves.push(EpochLoss {
            epoch,
            contrastive: sum_c / n,
            action: sum_a / n,
            total: (sum_c + sum_a) / n,
        });
        if let Some(dir) = checkpoint_dir {
            if epoch % config.checkpoint_every.max(1) == 0 || epoch == config.epochs {
                let mut ck = model.to_checkpoint(epoch);
                ck.push_adam("enc_s", &adam_s);
                ck.push_adam("enc_a", &adam_a);
                ck.push_adam("dec_a", &adam_d);
                let path = checkpoint_path(dir, "metric", epoch);
                ck.write(&path)?;
                checkpoints.push((epoch, path));
            }
        }
        log::debug!(
            "metric epoch {epoch}: L_c {:.5} L_a {:.5}",
            sum_c / n,
            sum_a / n
        );
    }
    Ok(MetricTrainOutcome {
        model,
        curves,
        checkpoints,
    })
}
