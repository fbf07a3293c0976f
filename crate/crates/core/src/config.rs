//! Pipeline configuration.
//!
//! Configs are TOML with an explicit `schema_version`. Every section and key
//! is optional; missing values resolve from the selected hyperparameter
//! preset and the training defaults. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envs::collect::{CollectMode, GoalReward};
use crate::error::{Result, VmgError};
use crate::graph::RewardMode;
use crate::metric::{TrainConfig, DEFAULT_MARGIN, DEFAULT_METRIC_DIM};
use crate::nn::HIDDEN_WIDTH;
use crate::planner::PlanConfig;
use crate::translator::DEFAULT_HORIZON;

pub const SCHEMA_VERSION: u32 = 1;

/// Per-domain hyperparameter rows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Kitchen,
    #[default]
    Antmaze,
    Pen,
    Door,
    Hammer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PresetValues {
    pub margin: f64,
    pub horizon: usize,
    pub gamma_m: f64,
    pub discount: f64,
    pub subgoal_index: usize,
    pub search_horizon: Option<usize>,
}

impl Preset {
    pub fn values(self) -> PresetValues {
        let (gamma_m, discount, subgoal_index, search_horizon) = match self {
            Preset::Kitchen => (0.5, 0.95, 2, None),
            Preset::Antmaze => (0.8, 0.8, 1, None),
            Preset::Pen | Preset::Door => (0.3, 0.8, 2, Some(12)),
            Preset::Hammer => (1.0, 0.8, 2, Some(12)),
        };
        PresetValues {
            margin: 1.0,
            horizon: 10,
            gamma_m,
            discount,
            subgoal_index,
            search_horizon,
        }
    }
}

/// Where the offline data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Import this dataset file instead of collecting.
    pub path: Option<PathBuf>,
    pub episodes: usize,
    pub episode_len: usize,
    pub noise_sigma: f64,
    pub ou_theta: f64,
    pub mode: CollectMode,
    pub reward: GoalReward,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            episodes: 200,
            episode_len: 100,
            noise_sigma: 2.0,
            ou_theta: 1.0,
            mode: CollectMode::Diverse,
            reward: GoalReward::Inside,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricConfig {
    pub metric_dim: usize,
    pub margin: f64,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub checkpoint_every: usize,
    pub steps_per_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslatorConfig {
    pub horizon: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub checkpoint_every: usize,
    pub steps_per_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    pub gamma_m: f64,
    pub reward_mode: RewardMode,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointSelection {
    /// Use the final epoch.
    #[default]
    Last,
    /// Evaluate saved checkpoints in the selection window and keep the best.
    Best,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    /// One full training run per model seed.
    pub model_seeds: Vec<u64>,
    pub first_episode_seed: u64,
    pub checkpoint_selection: CheckpointSelection,
    /// First epoch eligible for best-checkpoint selection.
    pub select_from_epoch: usize,
    pub selection_episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 100,
            model_seeds: vec![0, 1, 2],
            first_episode_seed: 1_000_000,
            checkpoint_selection: CheckpointSelection::Last,
            select_from_epoch: 500,
            selection_episodes: 20,
        }
    }
}

/// Fully resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub preset: Preset,
    pub env: String,
    pub data: DataConfig,
    pub metric: MetricConfig,
    pub translator: TranslatorConfig,
    pub graph: GraphConfig,
    pub plan: PlanConfig,
    pub eval: EvalConfig,
}

// The partial mirror below accepts any subset of keys.

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    schema_version: Option<u32>,
    preset: Option<Preset>,
    env: Option<String>,
    #[serde(default)]
    data: RawData,
    #[serde(default)]
    metric: RawMetric,
    #[serde(default)]
    translator: RawTranslator,
    #[serde(default)]
    graph: RawGraph,
    #[serde(default)]
    plan: RawPlan,
    #[serde(default)]
    eval: RawEval,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    path: Option<PathBuf>,
    episodes: Option<usize>,
    episode_len: Option<usize>,
    noise_sigma: Option<f64>,
    ou_theta: Option<f64>,
    mode: Option<CollectMode>,
    reward: Option<GoalReward>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMetric {
    metric_dim: Option<usize>,
    margin: Option<f64>,
    hidden: Option<usize>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    checkpoint_every: Option<usize>,
    steps_per_epoch: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTranslator {
    horizon: Option<usize>,
    hidden: Option<usize>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    checkpoint_every: Option<usize>,
    steps_per_epoch: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    gamma_m: Option<f64>,
    reward_mode: Option<RewardMode>,
}

/// `search_horizon = "inf"` or an integer.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawHorizon {
    Steps(usize),
    Word(String),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPlan {
    search_horizon: Option<RawHorizon>,
    subgoal_index: Option<usize>,
    discount: Option<f64>,
    greedy: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEval {
    episodes: Option<usize>,
    model_seeds: Option<Vec<u64>>,
    first_episode_seed: Option<u64>,
    checkpoint_selection: Option<CheckpointSelection>,
    select_from_epoch: Option<usize>,
    selection_episodes: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::from_preset(Preset::default())
    }
}

impl PipelineConfig {
    pub fn from_preset(preset: Preset) -> Self {
        let p = preset.values();
        let train = TrainConfig::default();
        PipelineConfig {
            schema_version: SCHEMA_VERSION,
            preset,
            env: "umaze".into(),
            data: DataConfig::default(),
            metric: MetricConfig {
                metric_dim: DEFAULT_METRIC_DIM,
                margin: DEFAULT_MARGIN,
                hidden: HIDDEN_WIDTH,
                epochs: train.epochs,
                batch_size: train.batch_size,
                learning_rate: train.learning_rate,
                checkpoint_every: train.checkpoint_every,
                steps_per_epoch: None,
            },
            translator: TranslatorConfig {
                horizon: DEFAULT_HORIZON,
                hidden: HIDDEN_WIDTH,
                epochs: train.epochs,
                batch_size: train.batch_size,
                learning_rate: train.learning_rate,
                checkpoint_every: train.checkpoint_every,
                steps_per_epoch: None,
            },
            graph: GraphConfig {
                gamma_m: p.gamma_m,
                reward_mode: RewardMode::AvgWithInternal,
            },
            plan: PlanConfig {
                search_horizon: p.search_horizon,
                subgoal_index: p.subgoal_index,
                discount: p.discount,
                greedy: false,
            },
            eval: EvalConfig::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| {
            let key = e
                .message()
                .split('`')
                .nth(1)
                .unwrap_or("<document>")
                .to_string();
            VmgError::Config {
                key,
                constraint: e.message().to_string(),
            }
        })?;
        let cfg = Self::resolve(raw)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn resolve(raw: RawConfig) -> Result<Self> {
        if let Some(v) = raw.schema_version {
            if v != SCHEMA_VERSION {
                return Err(VmgError::config("schema_version", format!("must be {SCHEMA_VERSION}")));
            }
        }
        let mut c = Self::from_preset(raw.preset.unwrap_or_default());
        if let Some(env) = raw.env {
            c.env = env;
        }
        let d = raw.data;
        set(&mut c.data.path, d.path.map(Some));
        set(&mut c.data.episodes, d.episodes);
        set(&mut c.data.episode_len, d.episode_len);
        set(&mut c.data.noise_sigma, d.noise_sigma);
        set(&mut c.data.ou_theta, d.ou_theta);
        set(&mut c.data.mode, d.mode);
        set(&mut c.data.reward, d.reward);
        set(&mut c.data.seed, d.seed);
        let m = raw.metric;
        set(&mut c.metric.metric_dim, m.metric_dim);
        set(&mut c.metric.margin, m.margin);
        set(&mut c.metric.hidden, m.hidden);
        set(&mut c.metric.epochs, m.epochs);
        set(&mut c.metric.batch_size, m.batch_size);
        set(&mut c.metric.learning_rate, m.learning_rate);
        set(&mut c.metric.checkpoint_every, m.checkpoint_every);
        set(&mut c.metric.steps_per_epoch, m.steps_per_epoch.map(Some));
        let t = raw.translator;
        set(&mut c.translator.horizon, t.horizon);
        set(&mut c.translator.hidden, t.hidden);
        set(&mut c.translator.epochs, t.epochs);
        set(&mut c.translator.batch_size, t.batch_size);
        set(&mut c.translator.learning_rate, t.learning_rate);
        set(&mut c.translator.checkpoint_every, t.checkpoint_every);
        set(&mut c.translator.steps_per_epoch, t.steps_per_epoch.map(Some));
        set(&mut c.graph.gamma_m, raw.graph.gamma_m);
        set(&mut c.graph.reward_mode, raw.graph.reward_mode);
        let p = raw.plan;
        if let Some(h) = p.search_horizon {
            c.plan.search_horizon = match h {
                RawHorizon::Steps(n) => Some(n),
                RawHorizon::Word(w) if w == "inf" => None,
                RawHorizon::Word(w) => {
                    return Err(VmgError::config(
                        "plan.search_horizon",
                        format!("must be a positive integer or \"inf\", got {w:?}"),
                    ))
                }
            };
        }
        set(&mut c.plan.subgoal_index, p.subgoal_index);
        set(&mut c.plan.discount, p.discount);
        set(&mut c.plan.greedy, p.greedy);
        let e = raw.eval;
        set(&mut c.eval.episodes, e.episodes);
        set(&mut c.eval.model_seeds, e.model_seeds);
        set(&mut c.eval.first_episode_seed, e.first_episode_seed);
        set(&mut c.eval.checkpoint_selection, e.checkpoint_selection);
        set(&mut c.eval.select_from_epoch, e.select_from_epoch);
        set(&mut c.eval.selection_episodes, e.selection_episodes);
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, constraint: &str| {
            if ok {
                Ok(())
            } else {
                Err(VmgError::config(key, constraint))
            }
        };
        check(self.schema_version == SCHEMA_VERSION, "schema_version", "must be 1")?;
        check(
            crate::envs::ENV_NAMES.contains(&self.env.as_str()),
            "env",
            "must be one of umaze, medium-maze, chain",
        )?;
        check(self.data.episodes >= 1, "data.episodes", "must be >= 1")?;
        check(self.data.episode_len >= 1, "data.episode_len", "must be >= 1")?;
        check(self.data.noise_sigma >= 0.0, "data.noise_sigma", "must be >= 0")?;
        check(
            self.data.ou_theta >= 0.0 && self.data.ou_theta <= 1.0,
            "data.ou_theta",
            "must lie in [0, 1]",
        )?;
        check(self.metric.metric_dim >= 1, "metric.metric_dim", "must be >= 1")?;
        check(self.metric.margin > 0.0, "metric.margin", "must be > 0")?;
        check(self.metric.hidden >= 1, "metric.hidden", "must be >= 1")?;
        check(self.metric.epochs >= 1, "metric.epochs", "must be >= 1")?;
        check(self.metric.batch_size >= 2, "metric.batch_size", "must be >= 2")?;
        check(self.metric.learning_rate > 0.0, "metric.learning_rate", "must be > 0")?;
        check(self.metric.checkpoint_every >= 1, "metric.checkpoint_every", "must be >= 1")?;
        check(
            self.metric.steps_per_epoch != Some(0),
            "metric.steps_per_epoch",
            "must be >= 1",
        )?;
        check(self.translator.horizon >= 1, "translator.horizon", "must be >= 1")?;
        check(self.translator.hidden >= 1, "translator.hidden", "must be >= 1")?;
        check(self.translator.epochs >= 1, "translator.epochs", "must be >= 1")?;
        check(self.translator.batch_size >= 1, "translator.batch_size", "must be >= 1")?;
        check(self.translator.learning_rate > 0.0, "translator.learning_rate", "must be > 0")?;
        check(
            self.translator.checkpoint_every >= 1,
            "translator.checkpoint_every",
            "must be >= 1",
        )?;
        check(
            self.translator.steps_per_epoch != Some(0),
            "translator.steps_per_epoch",
            "must be >= 1",
        )?;
        check(self.graph.gamma_m > 0.0, "gamma_m", "must be > 0")?;
        check(
            self.plan.discount > 0.0 && self.plan.discount < 1.0,
            "plan.discount",
            "must lie in (0, 1)",
        )?;
        check(self.plan.subgoal_index >= 1, "plan.subgoal_index", "must be >= 1")?;
        check(
            self.plan.search_horizon != Some(0),
            "plan.search_horizon",
            "must be >= 1 or \"inf\"",
        )?;
        check(self.eval.episodes >= 1, "eval.episodes", "must be >= 1")?;
        check(!self.eval.model_seeds.is_empty(), "eval.model_seeds", "must not be empty")?;
        check(
            self.eval.selection_episodes >= 1,
            "eval.selection_episodes",
            "must be >= 1",
        )?;
        Ok(())
    }

    /// Canonical TOML; parsing it back yields an equal config.
    pub fn to_toml(&self) -> String {
        let mut v = toml::Value::try_from(self).expect("config serializes");
        if let Some(plan) = v.get_mut("plan").and_then(|p| p.as_table_mut()) {
            if self.plan.search_horizon.is_none() {
                plan.insert("search_horizon".into(), toml::Value::String("inf".into()));
            }
        }
        toml::to_string_pretty(&v).expect("config serializes")
    }

    pub fn metric_train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.metric.epochs,
            batch_size: self.metric.batch_size,
            learning_rate: self.metric.learning_rate,
            seed,
            checkpoint_every: self.metric.checkpoint_every,
            steps_per_epoch: self.metric.steps_per_epoch,
        }
    }

    pub fn translator_train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.translator.epochs,
            batch_size: self.translator.batch_size,
            learning_rate: self.translator.learning_rate,
            seed,
            checkpoint_every: self.translator.checkpoint_every,
            steps_per_epoch: self.translator.steps_per_epoch,
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
