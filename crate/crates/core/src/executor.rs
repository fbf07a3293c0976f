//! Closed-loop control with a memory graph, and rollout evaluation.

use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::envs::{Env, EnvSpec, Policy};
use crate::error::{Result, VmgError};
use crate::graph::{classify, MemoryGraph, RewardMode};
use crate::metric::MetricModel;
use crate::planner::{Plan, PlanConfig, ValueTable};
use crate::translator::Translator;

/// Everything needed to act: encoder, graph, plan and translator.
#[derive(Debug, Clone)]
pub struct Agent {
    metric: MetricModel,
    graph: MemoryGraph,
    plan: Plan,
    translator: Translator,
    action_bounds: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub action: Vec<f64>,
    pub current_vertex: usize,
    pub target_vertex: usize,
}

impl Agent {
    /// Assembles an agent, checking that the graph was built with `metric`.
    pub fn new(
        metric: MetricModel,
        graph: MemoryGraph,
        plan: Plan,
        translator: Translator,
        action_bounds: Vec<(f64, f64)>,
    ) -> Result<Self> {
        if graph.meta.model_hash != metric.content_hash() {
            return Err(VmgError::State(
                "graph was built with a different metric model".into(),
            ));
        }
        if plan.values.values.len() != graph.num_vertices() || plan.mdp.num_edges() != graph.edges.len() {
            return Err(VmgError::State("value table does not belong to this graph".into()));
        }
        if translator.state_dim() != metric.state_dim() || translator.action_dim() != action_bounds.len() {
            return Err(VmgError::State("translator dimensions do not match the environment".into()));
        }
        Ok(Agent {
            metric,
            graph,
            plan,
            translator,
            action_bounds,
        })
    }

    /// Builds the graph, runs value iteration and assembles the agent.
    pub fn build(
        metric: MetricModel,
        translator: Translator,
        dataset: &Dataset,
        gamma_m: f64,
        mode: RewardMode,
        config: PlanConfig,
        action_bounds: Vec<(f64, f64)>,
    ) -> Result<Self> {
        let graph = MemoryGraph::build(&metric, dataset, gamma_m, mode)?;
        let plan = Plan::compute(&graph, config)?;
        Self::new(metric, graph, plan, translator, action_bounds)
    }

    pub fn metric(&self) -> &MetricModel {
        &self.metric
    }

    pub fn graph(&self) -> &MemoryGraph {
        &self.graph
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    pub fn translator(&self) -> &Translator {
        &self.translator
    }

    pub fn with_plan_config(&self, config: PlanConfig) -> Result<Agent> {
        let plan = Plan::compute(&self.graph, config)?;
        Agent::new(
            self.metric.clone(),
            self.graph.clone(),
            plan,
            self.translator.clone(),
            self.action_bounds.clone(),
        )
    }

    /// Encodes the state, plans on the graph and translates toward the chosen vertex.
    pub fn decide(&self, state: &[f64]) -> Result<Decision> {
        let feature = self.metric.encode_state(state)?;
        let current = classify(&feature, &self.graph.vertices)?;
        let target = self.plan.select(current)?;
        let raw = self
            .translator
            .translate(state, &self.graph.vertices[target].representative_state)?;
        let action = raw
            .iter()
            .zip(&self.action_bounds)
            .map(|(a, (lo, hi))| a.clamp(*lo, *hi))
            .collect();
        Ok(Decision {
            action,
            current_vertex: current,
            target_vertex: target,
        })
    }

    pub fn act(&self, state: &[f64]) -> Result<Vec<f64>> {
        Ok(self.decide(state)?.action)
    }

    /// Recomputes edge rewards, values and weights for relabelled rewards.
    /// Neural models and graph structure are shared unchanged.
    pub fn relabel_and_replan<F>(&self, dataset: &Dataset, reward_fn: F) -> Result<(Agent, Duration)>
    where
        F: Fn(&[f64], &[f64], &[f64]) -> f64,
    {
        if dataset.num_states() != self.graph.assignment.len() {
            return Err(VmgError::invalid(
                "dataset does not match the one the graph was built from",
            ));
        }
        let start = Instant::now();
        let relabelled = dataset.relabel_rewards(reward_fn)?;
        let graph = self.graph.with_rewards(&relabelled, self.graph.meta.reward_mode)?;
        let plan = Plan::compute(&graph, self.plan.config)?;
        let elapsed = start.elapsed();
        let agent = Agent {
            metric: self.metric.clone(),
            graph,
            plan,
            translator: self.translator.clone(),
            action_bounds: self.action_bounds.clone(),
        };
        Ok((agent, elapsed))
    }
}

/// File names inside an agent bundle directory.
pub const BUNDLE_METRIC: &str = "metric.ckpt";
pub const BUNDLE_TRANSLATOR: &str = "translator.ckpt";
pub const BUNDLE_GRAPH: &str = "graph.json";
pub const BUNDLE_PLAN: &str = "plan.json";

/// Planning state stored next to the models in a bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundlePlan {
    pub config: PlanConfig,
    pub values: ValueTable,
    pub action_bounds: Vec<(f64, f64)>,
}

impl Agent {
    /// Writes the agent as a directory of model, graph and plan files.
    pub fn save_bundle(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.metric.to_checkpoint(0).write(&dir.join(BUNDLE_METRIC))?;
        self.translator.to_checkpoint(0).write(&dir.join(BUNDLE_TRANSLATOR))?;
        self.graph.save(&dir.join(BUNDLE_GRAPH))?;
        let plan = BundlePlan {
            config: self.plan.config,
            values: self.plan.values.clone(),
            action_bounds: self.action_bounds.clone(),
        };
        std::fs::write(dir.join(BUNDLE_PLAN), serde_json::to_vec_pretty(&plan)?)?;
        Ok(())
    }

    pub fn load_bundle(dir: &Path) -> Result<Self> {
        let metric = MetricModel::load(&dir.join(BUNDLE_METRIC))?;
        let translator = Translator::load(&dir.join(BUNDLE_TRANSLATOR))?;
        let graph = MemoryGraph::load(&dir.join(BUNDLE_GRAPH))?;
        let plan: BundlePlan = serde_json::from_slice(&std::fs::read(dir.join(BUNDLE_PLAN))?)?;
        let values = Plan::from_values(&graph, plan.values, plan.config)?;
        Agent::new(metric, graph, values, translator, plan.action_bounds)
    }
}

impl Policy for Agent {
    fn reset(&mut self, _seed: u64) {}

    fn act(&mut self, state: &[f64]) -> Result<Vec<f64>> {
        Agent::act(self, state)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub seed: u64,
    pub episode_return: f64,
    pub success: bool,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Seed of the trained models evaluated, when applicable.
    pub model_seed: Option<u64>,
    pub episodes: Vec<EpisodeResult>,
    pub success_rate: f64,
    pub mean_return: f64,
    pub std_return: f64,
    pub normalized_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub env: String,
    pub runs: Vec<RunReport>,
    pub success_mean: f64,
    /// Sample standard deviation across runs; 0 for a single run.
    pub success_std: f64,
    pub return_mean: f64,
    pub return_std: f64,
    pub normalized_score_mean: f64,
    pub normalized_score_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs one episode per seed `first_seed..first_seed + episodes`.
///
/// Errors from the policy or environment carry the step index.
pub fn evaluate(
    policy: &mut dyn Policy,
    env: &mut dyn Env,
    episodes: usize,
    first_seed: u64,
    model_seed: Option<u64>,
) -> Result<RunReport> {
    if episodes == 0 {
        return Err(VmgError::invalid("evaluation needs at least one episode"));
    }
    let mut results = Vec::with_capacity(episodes);
    for i in 0..episodes as u64 {
        let seed = first_seed + i;
        let mut state = env.reset(seed);
        policy.reset(seed);
        let (mut ret, mut length) = (0.0, 0);
        let success;
        loop {
            let at = |e: VmgError| VmgError::AtStep {
                step: length,
                source: Box::new(e),
            };
            let action = policy.act(&state).map_err(at)?;
            let step = env.step(&action).map_err(at)?;
            ret += step.reward;
            length += 1;
            state = step.state.clone();
            if step.done() {
                success = step.terminal;
                break;
            }
        }
        results.push(EpisodeResult {
            seed,
            episode_return: ret,
            success,
            length,
        });
    }
    Ok(summarize(env.spec(), results, model_seed))
}

pub fn summarize(spec: &EnvSpec, episodes: Vec<EpisodeResult>, model_seed: Option<u64>) -> RunReport {
    let returns: Vec<f64> = episodes.iter().map(|e| e.episode_return).collect();
    let (mean_return, std_return) = mean_std(&returns);
    let success_rate = episodes.iter().filter(|e| e.success).count() as f64 / episodes.len().max(1) as f64;
    RunReport {
        model_seed,
        success_rate,
        mean_return,
        std_return,
        normalized_score: spec.normalized_score(mean_return),
        episodes,
    }
}

/// Aggregates per-model-seed runs.
pub fn aggregate(spec: &EnvSpec, runs: Vec<RunReport>) -> EvalReport {
    let success: Vec<f64> = runs.iter().map(|r| r.success_rate).collect();
    let returns: Vec<f64> = runs.iter().map(|r| r.mean_return).collect();
    let norm: Vec<f64> = runs.iter().map(|r| r.normalized_score).collect();
    let (success_mean, success_std) = mean_std(&success);
    let (return_mean, return_std) = mean_std(&returns);
    let (normalized_score_mean, normalized_score_std) = mean_std(&norm);
    EvalReport {
        env: spec.name.clone(),
        runs,
        success_mean,
        success_std,
        return_mean,
        return_std,
        normalized_score_mean,
        normalized_score_std,
    }
}
