//! Staged experiment runner with content-hash caching.
//!
//! Stages run in order: collect (or import), train-metric, train-translator,
//! optional checkpoint selection, build-graph, plan, evaluate, report. Each
//! stage has a key derived from its parameters and the hashes of the files it
//! reads. A stage whose key matches the previous manifest and whose outputs
//! are intact is skipped. Every run rewrites `manifest.json` in the output
//! directory; wall-clock timings live only there, never in artifacts.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{CheckpointSelection, PipelineConfig};
use crate::dataset::{self, Dataset};
use crate::envs::{self, collect, ChainConfig};
use crate::error::{Result, VmgError};
use crate::executor::{aggregate, evaluate, Agent, RunReport};
use crate::graph::MemoryGraph;
use crate::hash::{file_sha256, sha256_hex};
use crate::metric::{train_metric, MetricModel};
use crate::planner::{Plan, ValueTable};
use crate::translator::{train_translator, Translator};

pub const MANIFEST_FILE: &str = "manifest.json";

const METRIC_INIT_SALT: u64 = 0x6d65_7472_6963;
const TRANSLATOR_INIT_SALT: u64 = 0x7472_616e_736c;
const SELECTION_SEED_OFFSET: u64 = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ran,
    Cached,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub seed: Option<u64>,
    pub key: String,
    pub status: StageStatus,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub seconds: f64,
}

impl StageRecord {
    pub fn label(&self) -> String {
        stage_label(&self.name, self.seed)
    }
}

fn stage_label(name: &str, seed: Option<u64>) -> String {
    match seed {
        Some(s) => format!("{name}[seed {s}]"),
        None => name.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config: PipelineConfig,
    pub stages: Vec<StageRecord>,
    pub failure: Option<Failure>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn stage(&self, name: &str, seed: Option<u64>) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name && s.seed == seed)
    }

    /// All output artifacts by relative path.
    pub fn outputs(&self) -> HashMap<String, String> {
        self.stages
            .iter()
            .flat_map(|s| s.outputs.iter().map(|a| (a.path.clone(), a.sha256.clone())))
            .collect()
    }
}

struct Runner {
    out: PathBuf,
    previous: HashMap<(String, Option<u64>), StageRecord>,
    manifest: Manifest,
    /// Producer label for every output written so far in this run.
    producers: HashMap<String, (String, String)>,
}

impl Runner {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn save(&self) -> Result<()> {
        self.manifest.save(&self.out.join(MANIFEST_FILE))
    }

    fn hash_inputs(&self, inputs: &[String]) -> Result<Vec<Artifact>> {
        inputs
            .iter()
            .map(|rel| {
                let path = self.path(rel);
                let sha = file_sha256(&path)?;
                if let Some((producer, expected)) = self.producers.get(rel) {
                    if &sha != expected {
                        return Err(VmgError::HashMismatch {
                            stage: producer.clone(),
                            path,
                        });
                    }
                }
                Ok(Artifact {
                    path: rel.clone(),
                    sha256: sha,
                })
            })
            .collect()
    }

    /// Runs `body` unless an identical earlier run left intact outputs.
    /// `body` returns the relative paths it wrote.
    fn stage<F>(
        &mut self,
        name: &str,
        seed: Option<u64>,
        params: serde_json::Value,
        inputs: Vec<String>,
        body: F,
    ) -> Result<()>
    where
        F: FnOnce(&Path) -> Result<Vec<String>>,
    {
        let label = stage_label(name, seed);
        let result = self.try_stage(name, seed, params, inputs, body);
        if let Err(e) = &result {
            self.manifest.failure = Some(Failure {
                stage: label.clone(),
                error: e.to_string(),
            });
            self.save()?;
        }
        result.map_err(|e| match e {
            e @ VmgError::HashMismatch { .. } => e,
            e => VmgError::Stage {
                stage: label,
                source: Box::new(e),
            },
        })
    }

    fn try_stage<F>(
        &mut self,
        name: &str,
        seed: Option<u64>,
        params: serde_json::Value,
        inputs: Vec<String>,
        body: F,
    ) -> Result<()>
    where
        F: FnOnce(&Path) -> Result<Vec<String>>,
    {
        let label = stage_label(name, seed);
        let start = Instant::now();
        let inputs = self.hash_inputs(&inputs)?;
        let key = sha256_hex(
            json!({"stage": name, "seed": seed, "params": params, "inputs": inputs})
                .to_string()
                .as_bytes(),
        );
        let mut status = StageStatus::Ran;
        let mut outputs = None;
        if let Some(prev) = self.previous.get(&(name.to_string(), seed)) {
            if prev.key == key && prev.outputs.iter().all(|a| self.path(&a.path).exists()) {
                for a in &prev.outputs {
                    if file_sha256(&self.path(&a.path))? != a.sha256 {
                        return Err(VmgError::HashMismatch {
                            stage: label,
                            path: self.path(&a.path),
                        });
                    }
                }
                status = StageStatus::Cached;
                outputs = Some(prev.outputs.clone());
            }
        }
        let outputs = match outputs {
            Some(o) => o,
            None => {
                log::info!("running stage {label}");
                let written = body(&self.out)?;
                written
                    .into_iter()
                    .map(|rel| {
                        Ok(Artifact {
                            sha256: file_sha256(&self.path(&rel))?,
                            path: rel,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        for a in &outputs {
            self.producers
                .insert(a.path.clone(), (label.clone(), a.sha256.clone()));
        }
        self.manifest.stages.push(StageRecord {
            name: name.to_string(),
            seed,
            key,
            status,
            inputs,
            outputs,
            seconds: start.elapsed().as_secs_f64(),
        });
        self.save()
    }
}

fn write_json<T: Serialize>(out: &Path, rel: &str, value: &T) -> Result<String> {
    let path = out.join(rel);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&path, serde_json::to_vec_pretty(value)?)?;
    Ok(rel.to_string())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

pub const DATASET_PATH: &str = "data/dataset.bin";

pub fn metric_path(seed: u64) -> String {
    format!("models/metric_s{seed}.ckpt")
}

pub fn translator_path(seed: u64) -> String {
    format!("models/translator_s{seed}.ckpt")
}

pub fn graph_path(seed: u64) -> String {
    format!("graphs/graph_s{seed}.json")
}

pub fn values_path(seed: u64) -> String {
    format!("plans/values_s{seed}.json")
}

pub fn run_path(seed: u64) -> String {
    format!("eval/run_s{seed}.json")
}

pub const REPORT_PATH: &str = "eval/report.json";

/// Collects the dataset a config describes (without touching disk).
pub fn collect_for_config(config: &PipelineConfig) -> Result<Dataset> {
    let d = &config.data;
    if let Some(layout) = envs::maze_layout(&config.env) {
        let cfg = collect::MazeCollectConfig {
            episodes: d.episodes,
            episode_len: d.episode_len,
            noise_sigma: d.noise_sigma,
            ou_theta: d.ou_theta,
            mode: d.mode,
            reward: d.reward,
            task: None,
            seed: d.seed,
        };
        Ok(collect::collect_maze(&layout, &cfg)?.0)
    } else {
        collect::collect_chain(&ChainConfig::default(), d.episodes, d.noise_sigma, d.seed)
    }
}

pub fn init_metric(config: &PipelineConfig, state_dim: usize, action_dim: usize, seed: u64) -> MetricModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ METRIC_INIT_SALT);
    MetricModel::with_hidden(
        state_dim,
        action_dim,
        config.metric.metric_dim,
        config.metric.margin,
        config.metric.hidden,
        &mut rng,
    )
}

pub fn init_translator(config: &PipelineConfig, state_dim: usize, action_dim: usize, seed: u64) -> Translator {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ TRANSLATOR_INIT_SALT);
    Translator::with_hidden(
        state_dim,
        action_dim,
        config.translator.horizon,
        config.translator.hidden,
        &mut rng,
    )
}

/// Builds, plans and evaluates one (metric, translator) pair.
pub fn evaluate_models(
    config: &PipelineConfig,
    dataset: &Dataset,
    metric: MetricModel,
    translator: Translator,
    episodes: usize,
    first_seed: u64,
    model_seed: Option<u64>,
) -> Result<RunReport> {
    let mut env = envs::make_env(&config.env)?;
    let bounds = env.spec().action_bounds.clone();
    let mut agent = Agent::build(
        metric,
        translator,
        dataset,
        config.graph.gamma_m,
        config.graph.reward_mode,
        config.plan,
        bounds,
    )?;
    evaluate(&mut agent, env.as_mut(), episodes, first_seed, model_seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub epoch: usize,
    /// `(epoch, success_rate, mean_return)` per candidate.
    pub candidates: Vec<(usize, f64, f64)>,
}

fn checkpoint_files(dir: &Path, prefix: &str) -> Result<Vec<(usize, String)>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(rest) = name.strip_prefix(&format!("{prefix}_epoch")) {
            if let Some(num) = rest.strip_suffix(".ckpt") {
                if let Ok(e) = num.parse() {
                    out.push((e, name));
                }
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Runs every stage in `out`, reusing cached results from an earlier manifest there.
pub fn run_pipeline(config: &PipelineConfig, out: &Path) -> Result<Manifest> {
    config.validate()?;
    std::fs::create_dir_all(out)?;
    let previous = match Manifest::load(&out.join(MANIFEST_FILE)) {
        Ok(m) => m
            .stages
            .into_iter()
            .map(|s| ((s.name.clone(), s.seed), s))
            .collect(),
        Err(_) => HashMap::new(),
    };
    let mut r = Runner {
        out: out.to_path_buf(),
        previous,
        manifest: Manifest {
            schema_version: crate::config::SCHEMA_VERSION,
            config: config.clone(),
            stages: Vec::new(),
            failure: None,
        },
        producers: HashMap::new(),
    };

    // Data.
    match &config.data.path {
        Some(src) => {
            let src_hash = file_sha256(src)?;
            let src = src.clone();
            r.stage("import", None, json!({"source_sha256": src_hash}), vec![], |out| {
                let ds = dataset::load(&src)?;
                std::fs::create_dir_all(out.join("data"))?;
                dataset::save(&ds, &out.join(DATASET_PATH))?;
                Ok(vec![DATASET_PATH.to_string()])
            })?;
        }
        None => {
            let params = json!({"env": config.env, "data": config.data});
            r.stage("collect", None, params, vec![], |out| {
                let ds = collect_for_config(config)?;
                std::fs::create_dir_all(out.join("data"))?;
                dataset::save(&ds, &out.join(DATASET_PATH))?;
                let mut written = vec![DATASET_PATH.to_string()];
                if let Some(layout) = envs::maze_layout(&config.env) {
                    let report = collect::coverage(&layout, &ds);
                    written.push(write_json(out, "data/coverage.json", &report)?);
                }
                Ok(written)
            })?;
        }
    }
    let dataset = dataset::load(&r.path(DATASET_PATH))?;

    for &seed in &config.eval.model_seeds {
        let dset = vec![DATASET_PATH.to_string()];

        r.stage(
            "train-metric",
            Some(seed),
            json!({"metric": config.metric}),
            dset.clone(),
            |out| {
                let dir_rel = format!("models/metric_s{seed}");
                std::fs::create_dir_all(out.join(&dir_rel))?;
                let model = init_metric(config, dataset.state_dim(), dataset.action_dim(), seed);
                let res = train_metric(
                    model,
                    dataset.trajectories(),
                    &config.metric_train(seed),
                    Some(&out.join(&dir_rel)),
                )?;
                let last = config.metric.epochs;
                res.model.to_checkpoint(last).write(&out.join(metric_path(seed)))?;
                let mut written = vec![
                    metric_path(seed),
                    write_json(out, &format!("models/metric_s{seed}_curves.json"), &res.curves)?,
                ];
                for (_, p) in res.checkpoints {
                    let name = p.file_name().expect("file name").to_string_lossy().into_owned();
                    written.push(format!("{dir_rel}/{name}"));
                }
                Ok(written)
            },
        )?;

        r.stage(
            "train-translator",
            Some(seed),
            json!({"translator": config.translator}),
            dset.clone(),
            |out| {
                let dir_rel = format!("models/translator_s{seed}");
                std::fs::create_dir_all(out.join(&dir_rel))?;
                let model = init_translator(config, dataset.state_dim(), dataset.action_dim(), seed);
                let res = train_translator(
                    model,
                    dataset.trajectories(),
                    &config.translator_train(seed),
                    Some(&out.join(&dir_rel)),
                )?;
                res.model
                    .to_checkpoint(config.translator.epochs)
                    .write(&out.join(translator_path(seed)))?;
                let mut written = vec![
                    translator_path(seed),
                    write_json(out, &format!("models/translator_s{seed}_curves.json"), &res.curves)?,
                ];
                for (_, p) in res.checkpoints {
                    let name = p.file_name().expect("file name").to_string_lossy().into_owned();
                    written.push(format!("{dir_rel}/{name}"));
                }
                Ok(written)
            },
        )?;

        let (mut metric_rel, mut translator_rel) = (metric_path(seed), translator_path(seed));
        if config.eval.checkpoint_selection == CheckpointSelection::Best {
            let m_dir = r.path(&format!("models/metric_s{seed}"));
            let t_dir = r.path(&format!("models/translator_s{seed}"));
            let m_ck = checkpoint_files(&m_dir, "metric")?;
            let t_ck = checkpoint_files(&t_dir, "translator")?;
            let candidates: Vec<usize> = m_ck
                .iter()
                .map(|(e, _)| *e)
                .filter(|e| *e >= config.eval.select_from_epoch && t_ck.iter().any(|(te, _)| te == e))
                .collect();
            let mut inputs = dset.clone();
            for &e in &candidates {
                inputs.push(format!("models/metric_s{seed}/metric_epoch{e:04}.ckpt"));
                inputs.push(format!("models/translator_s{seed}/translator_epoch{e:04}.ckpt"));
            }
            let params = json!({
                "env": config.env,
                "graph": config.graph,
                "plan": config.plan,
                "episodes": config.eval.selection_episodes,
                "first_seed": config.eval.first_episode_seed + SELECTION_SEED_OFFSET,
            });
            let sel_m = format!("models/selected_metric_s{seed}.ckpt");
            let sel_t = format!("models/selected_translator_s{seed}.ckpt");
            r.stage("select-checkpoint", Some(seed), params, inputs, |out| {
                let mut scored = Vec::new();
                for &e in &candidates {
                    let m = MetricModel::load(&out.join(format!("models/metric_s{seed}/metric_epoch{e:04}.ckpt")))?;
                    let t = Translator::load(&out.join(format!(
                        "models/translator_s{seed}/translator_epoch{e:04}.ckpt"
                    )))?;
                    let rep = evaluate_models(
                        config,
                        &dataset,
                        m,
                        t,
                        config.eval.selection_episodes,
                        config.eval.first_episode_seed + SELECTION_SEED_OFFSET,
                        Some(seed),
                    )?;
                    scored.push((e, rep.success_rate, rep.mean_return));
                }
                let (epoch, m, t) = match scored
                    .iter()
                    .copied()
                    .reduce(|a, b| if (b.1, b.2) > (a.1, a.2) { b } else { a })
                {
                    Some((e, _, _)) => (
                        e,
                        MetricModel::load(&out.join(format!("models/metric_s{seed}/metric_epoch{e:04}.ckpt")))?,
                        Translator::load(&out.join(format!(
                            "models/translator_s{seed}/translator_epoch{e:04}.ckpt"
                        )))?,
                    ),
                    None => {
                        log::warn!("no checkpoints in the selection window; keeping the final epoch");
                        (
                            config.metric.epochs,
                            MetricModel::load(&out.join(metric_path(seed)))?,
                            Translator::load(&out.join(translator_path(seed)))?,
                        )
                    }
                };
                m.to_checkpoint(epoch).write(&out.join(&sel_m))?;
                t.to_checkpoint(epoch).write(&out.join(&sel_t))?;
                let sel = Selection {
                    epoch,
                    candidates: scored,
                };
                Ok(vec![
                    sel_m.clone(),
                    sel_t.clone(),
                    write_json(out, &format!("models/selection_s{seed}.json"), &sel)?,
                ])
            })?;
            metric_rel = format!("models/selected_metric_s{seed}.ckpt");
            translator_rel = format!("models/selected_translator_s{seed}.ckpt");
        }

        r.stage(
            "build-graph",
            Some(seed),
            json!({"graph": config.graph}),
            vec![metric_rel.clone(), DATASET_PATH.to_string()],
            |out| {
                let metric = MetricModel::load(&out.join(&metric_rel))?;
                let graph = MemoryGraph::build(&metric, &dataset, config.graph.gamma_m, config.graph.reward_mode)?;
                std::fs::create_dir_all(out.join("graphs"))?;
                graph.save(&out.join(graph_path(seed)))?;
                let stats = graph.stats(&dataset, 10)?;
                Ok(vec![
                    graph_path(seed),
                    write_json(out, &format!("graphs/stats_s{seed}.json"), &stats)?,
                ])
            },
        )?;

        r.stage(
            "plan",
            Some(seed),
            json!({"plan": config.plan}),
            vec![graph_path(seed)],
            |out| {
                let graph = MemoryGraph::load(&out.join(graph_path(seed)))?;
                let plan = Plan::compute(&graph, config.plan)?;
                Ok(vec![write_json(out, &values_path(seed), &plan.values)?])
            },
        )?;

        r.stage(
            "evaluate",
            Some(seed),
            json!({
                "env": config.env,
                "plan": config.plan,
                "episodes": config.eval.episodes,
                "first_seed": config.eval.first_episode_seed,
            }),
            vec![
                metric_rel.clone(),
                translator_rel.clone(),
                graph_path(seed),
                values_path(seed),
            ],
            |out| {
                let metric = MetricModel::load(&out.join(&metric_rel))?;
                let translator = Translator::load(&out.join(&translator_rel))?;
                let graph = MemoryGraph::load(&out.join(graph_path(seed)))?;
                let values: ValueTable = read_json(&out.join(values_path(seed)))?;
                let plan = Plan::from_values(&graph, values, config.plan)?;
                let mut env = envs::make_env(&config.env)?;
                let bounds = env.spec().action_bounds.clone();
                let mut agent = Agent::new(metric, graph, plan, translator, bounds)?;
                let report = evaluate(
                    &mut agent,
                    env.as_mut(),
                    config.eval.episodes,
                    config.eval.first_episode_seed,
                    Some(seed),
                )?;
                Ok(vec![write_json(out, &run_path(seed), &report)?])
            },
        )?;
    }

    let runs: Vec<String> = config.eval.model_seeds.iter().map(|&s| run_path(s)).collect();
    r.stage("report", None, json!({"env": config.env}), runs.clone(), |out| {
        let spec = envs::make_env(&config.env)?.spec().clone();
        let reports = runs
            .iter()
            .map(|p| read_json::<RunReport>(&out.join(p)))
            .collect::<Result<Vec<_>>>()?;
        Ok(vec![write_json(out, REPORT_PATH, &aggregate(&spec, reports))?])
    })?;

    Ok(r.manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub matched: usize,
    /// `(path, recorded, reproduced)`; reproduced is `None` when the file is missing.
    pub mismatched: Vec<(String, String, Option<String>)>,
}

impl ReplayReport {
    pub fn is_exact(&self) -> bool {
        self.mismatched.is_empty()
    }
}

/// Re-executes a manifest's config in a fresh directory and compares every artifact hash.
pub fn replay(manifest: &Manifest, out: &Path) -> Result<ReplayReport> {
    let fresh = run_pipeline(&manifest.config, out)?;
    let got = fresh.outputs();
    let mut report = ReplayReport {
        matched: 0,
        mismatched: Vec::new(),
    };
    let mut expected: Vec<_> = manifest.outputs().into_iter().collect();
    expected.sort();
    for (path, sha) in expected {
        match got.get(&path) {
            Some(g) if *g == sha => report.matched += 1,
            other => report.mismatched.push((path, sha, other.cloned())),
        }
    }
    Ok(report)
}
