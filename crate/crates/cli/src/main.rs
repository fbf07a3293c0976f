//! `vmg`: command-line driver for the value memory graph pipeline.
//!
//! Relative output paths resolve under `$VMG_OUT` when it is set.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use vmg::config::PipelineConfig;
use vmg::dataset::{self, Dataset};
use vmg::envs::{
    self, collect_maze, make_env, maze::Cell, CollectMode, Env, GoalReward,
    MazeCollectConfig, MazeTask, PointMazeEnv, RewardSpec,
};
use vmg::executor::{aggregate, evaluate, Agent, RunReport};
use vmg::graph::{export_layout, MemoryGraph, RewardMode};
use vmg::metric::{train_metric, MetricModel};
use vmg::pipeline::{self, Manifest};
use vmg::planner::{Plan, PlanConfig, ValueTable};
use vmg::translator::{train_translator, Translator};
use vmg::{Result, VmgError};

#[derive(Parser)]
#[command(name = "vmg", version, about = "Value memory graph: offline RL with a graph world model")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Root directory for relative output paths.
    #[arg(long, global = true, env = "VMG_OUT")]
    out_root: Option<PathBuf>,

    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out a scripted noisy controller and save the transitions.
    Collect(CollectArgs),
    /// Train the state/action encoders and the action decoder.
    TrainMetric(TrainArgs),
    /// Train the goal-conditioned action translator.
    TrainTranslator(TrainArgs),
    /// Merge encoded states into a memory graph.
    BuildGraph(BuildGraphArgs),
    /// Run value iteration on a graph and write the value table.
    Plan(PlanArgs),
    /// Package trained models, a graph and its plan into an agent bundle.
    Bundle(BundleArgs),
    /// Re-reward a bundle's graph for a new task and replan.
    Relabel(RelabelArgs),
    /// Roll out agents and write success and return statistics.
    Evaluate(EvaluateArgs),
    /// Write 2-D vertex coordinates and edges for plotting.
    ExportLayout(ExportLayoutArgs),
    /// Run every stage from a config, caching unchanged stages.
    RunPipeline(RunPipelineArgs),
    /// Dataset utilities.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Load a dataset, check its structure and print a summary.
    Validate { path: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Diverse,
    Goal,
}

#[derive(Clone, Copy, ValueEnum)]
enum RewardArg {
    Inside,
    Entering,
}

#[derive(Args)]
struct CollectArgs {
    #[arg(long, default_value = "umaze")]
    env: String,
    #[arg(long, default_value_t = 200)]
    episodes: usize,
    #[arg(long, default_value_t = 100)]
    episode_len: usize,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, value_enum, default_value = "diverse")]
    mode: ModeArg,
    #[arg(long, value_enum, default_value = "inside")]
    reward: RewardArg,
    /// `.bin` selects the binary format, anything else the text format.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Pipeline config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset to train on; otherwise the config's data section is used.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Directory for the final and periodic checkpoints.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildGraphArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    gamma_m: f64,
    #[arg(long, default_value = "avg_with_internal")]
    reward_mode: RewardMode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct PlanFlags {
    #[arg(long, default_value_t = 0.8)]
    discount: f64,
    /// Hop limit for the best-vertex search, or `inf`.
    #[arg(long, default_value = "inf")]
    search_horizon: String,
    #[arg(long, default_value_t = 1)]
    subgoal_index: usize,
    /// Step to the successor maximising reward plus discounted value.
    #[arg(long)]
    greedy: bool,
}

impl PlanFlags {
    fn config(&self) -> Result<PlanConfig> {
        let search_horizon = match self.search_horizon.as_str() {
            "inf" => None,
            s => Some(s.parse().map_err(|_| {
                VmgError::invalid(format!("search horizon must be an integer or inf, got {s:?}"))
            })?),
        };
        Ok(PlanConfig {
            search_horizon,
            subgoal_index: self.subgoal_index,
            discount: self.discount,
            greedy: self.greedy,
        })
    }
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    graph: PathBuf,
    #[command(flatten)]
    plan: PlanFlags,
    /// Replace edge rewards using this reward spec before planning.
    #[arg(long, requires_all = ["dataset", "env"])]
    relabel: Option<RewardSpec>,
    /// Dataset the graph was built from (needed with --relabel).
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BundleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    translator: PathBuf,
    #[arg(long)]
    graph: PathBuf,
    #[arg(long, default_value = "umaze")]
    env: String,
    #[command(flatten)]
    plan: PlanFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RelabelArgs {
    #[arg(long)]
    agent: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "umaze")]
    env: String,
    /// `zero`, `goal:ROW,COL`, `goal-entering:ROW,COL` or `target:X`.
    #[arg(long)]
    reward: RewardSpec,
    /// Also write the relabelled dataset here.
    #[arg(long)]
    dataset_out: Option<PathBuf>,
    /// Output bundle directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// A bundle directory, a directory of `seed_*` bundles, or a pipeline run directory.
    #[arg(long)]
    agent: PathBuf,
    #[arg(long, default_value = "umaze")]
    env: String,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    /// Number of model seeds to evaluate.
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    /// First episode seed; episodes use consecutive seeds.
    #[arg(long, default_value_t = 1_000_000)]
    first_episode_seed: u64,
    /// Maze start cell `ROW,COL` (defaults to the layout's).
    #[arg(long, value_parser = parse_cell)]
    start: Option<Cell>,
    /// Maze goal cell `ROW,COL` (defaults to the layout's).
    #[arg(long, value_parser = parse_cell)]
    goal: Option<Cell>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportLayoutArgs {
    #[arg(long)]
    graph: PathBuf,
    /// Value table from `vmg plan` to attach to each vertex.
    #[arg(long)]
    values: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunPipelineArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Re-run this manifest's config in `--out` and compare artifact hashes.
    #[arg(long, conflicts_with = "config")]
    replay: Option<PathBuf>,
}

fn parse_cell(s: &str) -> std::result::Result<Cell, String> {
    let (r, c) = s.split_once(',').ok_or("expected ROW,COL")?;
    Ok((
        r.trim().parse().map_err(|_| format!("bad row {r:?}"))?,
        c.trim().parse().map_err(|_| format!("bad column {c:?}"))?,
    ))
}

struct Ctx {
    seed: u64,
    out_root: Option<PathBuf>,
}

impl Ctx {
    fn out(&self, p: &Path) -> PathBuf {
        match &self.out_root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn print_json(value: &serde_json::Value) {
    use std::io::Write;
    // A closed pipe (e.g. `| head`) is not an error for a summary line.
    let _ = writeln!(std::io::stdout().lock(), "{value:#}");
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    dataset::save(ds, path)
}

fn env_for(name: &str, start: Option<Cell>, goal: Option<Cell>) -> Result<Box<dyn Env>> {
    if start.is_none() && goal.is_none() {
        return make_env(name);
    }
    let layout = envs::maze_layout(name)
        .ok_or_else(|| VmgError::invalid("--start/--goal need a maze environment"))?;
    let task = MazeTask {
        start: start.unwrap_or(layout.start),
        goal: goal.unwrap_or(layout.goal),
    };
    Ok(Box::new(PointMazeEnv::with_task(layout, task)?))
}

fn cmd_collect(ctx: &Ctx, a: &CollectArgs) -> Result<()> {
    let out = ctx.out(&a.out);
    let mut coverage = None;
    let ds = match envs::maze_layout(&a.env) {
        Some(layout) => {
            let cfg = MazeCollectConfig {
                episodes: a.episodes,
                episode_len: a.episode_len,
                noise_sigma: a.noise,
                ou_theta: 0.15,
                mode: match a.mode {
                    ModeArg::Diverse => CollectMode::Diverse,
                    ModeArg::Goal => CollectMode::Goal,
                },
                reward: match a.reward {
                    RewardArg::Inside => GoalReward::Inside,
                    RewardArg::Entering => GoalReward::Entering,
                },
                task: None,
                seed: ctx.seed,
            };
            let (ds, report) = collect_maze(&layout, &cfg)?;
            coverage = Some(report);
            ds
        }
        None => {
            make_env(&a.env)?;
            envs::collect_chain(&envs::ChainConfig::default(), a.episodes, a.noise, ctx.seed)?
        }
    };
    save_dataset(&ds, &out)?;
    print_json(&json!({
        "path": out,
        "episodes": ds.episodes().len(),
        "transitions": ds.num_transitions(),
        "sha256": vmg::hash::file_sha256(&out)?,
        "coverage": coverage,
    }));
    Ok(())
}

fn cmd_validate(path: &Path) -> Result<()> {
    let ds = dataset::load(path)?;
    let rewards: Vec<f64> = ds.episodes().iter().flat_map(|e| e.rewards().iter().copied()).collect();
    let (lo, hi) = rewards
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &r| (l.min(r), h.max(r)));
    print_json(&json!({
        "valid": true,
        "episodes": ds.episodes().len(),
        "transitions": ds.num_transitions(),
        "state_dim": ds.state_dim(),
        "action_dim": ds.action_dim(),
        "terminal_episodes": ds.episodes().iter().filter(|e| e.terminal()).count(),
        "reward_min": lo,
        "reward_max": hi,
        "content_hash": ds.content_hash(),
    }));
    Ok(())
}

fn training_data(config: &PipelineConfig, dataset: Option<&Path>) -> Result<Dataset> {
    match dataset.or(config.data.path.as_deref()) {
        Some(p) => dataset::load(p),
        None => pipeline::collect_for_config(config),
    }
}

fn cmd_train_metric(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let config = load_config(a.config.as_deref())?;
    let ds = training_data(&config, a.dataset.as_deref())?;
    let out = ctx.out(&a.out);
    std::fs::create_dir_all(&out)?;
    let model = pipeline::init_metric(&config, ds.state_dim(), ds.action_dim(), ctx.seed);
    let res = train_metric(model, ds.trajectories(), &config.metric_train(ctx.seed), Some(&out))?;
    let final_path = out.join("metric.ckpt");
    res.model.to_checkpoint(config.metric.epochs).write(&final_path)?;
    write_json(&out.join("metric_curves.json"), &res.curves)?;
    let last = res.curves.last();
    print_json(&json!({
        "checkpoint": final_path,
        "epochs": config.metric.epochs,
        "final_loss": last.map(|l| l.total),
        "periodic_checkpoints": res.checkpoints.len(),
    }));
    Ok(())
}

fn cmd_train_translator(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let config = load_config(a.config.as_deref())?;
    let ds = training_data(&config, a.dataset.as_deref())?;
    let out = ctx.out(&a.out);
    std::fs::create_dir_all(&out)?;
    let model = pipeline::init_translator(&config, ds.state_dim(), ds.action_dim(), ctx.seed);
    let res = train_translator(model, ds.trajectories(), &config.translator_train(ctx.seed), Some(&out))?;
    let final_path = out.join("translator.ckpt");
    res.model.to_checkpoint(config.translator.epochs).write(&final_path)?;
    write_json(&out.join("translator_curves.json"), &res.curves)?;
    print_json(&json!({
        "checkpoint": final_path,
        "epochs": config.translator.epochs,
        "final_loss": res.curves.last().map(|l| l.total),
        "periodic_checkpoints": res.checkpoints.len(),
    }));
    Ok(())
}

fn cmd_build_graph(ctx: &Ctx, a: &BuildGraphArgs) -> Result<()> {
    let model = MetricModel::load(&a.model)?;
    let ds = dataset::load(&a.dataset)?;
    let graph = MemoryGraph::build(&model, &ds, a.gamma_m, a.reward_mode)?;
    let out = ctx.out(&a.out);
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    graph.save(&out)?;
    print_json(&json!({"graph": out, "stats": graph.stats(&ds, 10)?}));
    Ok(())
}

fn value_summary(values: &ValueTable) -> serde_json::Value {
    let v = &values.values;
    let n = v.len().max(1) as f64;
    json!({
        "num_vertices": v.len(),
        "min": v.iter().copied().fold(f64::INFINITY, f64::min),
        "max": v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        "mean": v.iter().sum::<f64>() / n,
        "iterations": values.iterations_run,
        "converged": values.converged,
        "residual": values.residual,
    })
}

fn cmd_plan(ctx: &Ctx, a: &PlanArgs) -> Result<()> {
    let config = a.plan.config()?;
    let mut graph = MemoryGraph::load(&a.graph)?;
    if let Some(spec) = &a.relabel {
        let (Some(ds_path), Some(env)) = (&a.dataset, &a.env) else {
            return Err(VmgError::invalid("--relabel needs --dataset and --env"));
        };
        let ds = dataset::load(ds_path)?.relabel_rewards(spec.reward_fn(env)?)?;
        graph = graph.with_rewards(&ds, graph.meta.reward_mode)?;
    }
    let plan = Plan::compute(&graph, config)?;
    let out = ctx.out(&a.out);
    let summary = value_summary(&plan.values);
    write_json(
        &out,
        &json!({
            "config": config,
            "relabel": a.relabel.as_ref().map(|s| s.to_string()),
            "num_edges": graph.edges.len(),
            "summary": summary,
            "values": plan.values,
        }),
    )?;
    print_json(&json!({"values": out, "summary": summary}));
    Ok(())
}

fn cmd_bundle(ctx: &Ctx, a: &BundleArgs) -> Result<()> {
    let metric = MetricModel::load(&a.model)?;
    let translator = Translator::load(&a.translator)?;
    let graph = MemoryGraph::load(&a.graph)?;
    let plan = Plan::compute(&graph, a.plan.config()?)?;
    let bounds = make_env(&a.env)?.spec().action_bounds.clone();
    let agent = Agent::new(metric, graph, plan, translator, bounds)?;
    let out = ctx.out(&a.out);
    agent.save_bundle(&out)?;
    print_json(&json!({"bundle": out, "values": value_summary(&agent.plan().values)}));
    Ok(())
}

fn cmd_relabel(ctx: &Ctx, a: &RelabelArgs) -> Result<()> {
    let agent = Agent::load_bundle(&a.agent)?;
    let ds = dataset::load(&a.dataset)?;
    let reward = a.reward.reward_fn(&a.env)?;
    if let Some(p) = &a.dataset_out {
        save_dataset(&ds.relabel_rewards(&reward)?, &ctx.out(p))?;
    }
    let (relabelled, took) = agent.relabel_and_replan(&ds, reward)?;
    let out = ctx.out(&a.out);
    relabelled.save_bundle(&out)?;
    print_json(&json!({
        "bundle": out,
        "reward": a.reward.to_string(),
        "replan_seconds": took.as_secs_f64(),
        "values": value_summary(&relabelled.plan().values),
    }));
    Ok(())
}

/// Agents to evaluate, paired with their model seed.
fn load_agents(dir: &Path, count: usize) -> Result<Vec<(Option<u64>, Agent)>> {
    let manifest_path = dir.join(pipeline::MANIFEST_FILE);
    if manifest_path.exists() {
        let manifest = Manifest::load(&manifest_path)?;
        let mut agents = Vec::new();
        for &seed in manifest.config.eval.model_seeds.iter().take(count) {
            let stage = manifest.stage("evaluate", Some(seed)).ok_or_else(|| {
                VmgError::State(format!("run has no completed evaluate stage for seed {seed}"))
            })?;
            let path = |i: usize| dir.join(&stage.inputs[i].path);
            let graph = MemoryGraph::load(&path(2))?;
            let values: ValueTable = serde_json::from_slice(&std::fs::read(path(3))?)?;
            let plan = Plan::from_values(&graph, values, manifest.config.plan)?;
            let bounds = make_env(&manifest.config.env)?.spec().action_bounds.clone();
            let agent = Agent::new(
                MetricModel::load(&path(0))?,
                graph,
                plan,
                Translator::load(&path(1))?,
                bounds,
            )?;
            agents.push((Some(seed), agent));
        }
        return Ok(agents);
    }
    if dir.join(vmg::executor::BUNDLE_PLAN).exists() {
        if count > 1 {
            log::warn!("{} is a single bundle; evaluating one model", dir.display());
        }
        return Ok(vec![(None, Agent::load_bundle(dir)?)]);
    }
    let mut seeded = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(Ok(seed)) = name.strip_prefix("seed_").map(str::parse::<u64>) {
            seeded.push(seed);
        }
    }
    seeded.sort_unstable();
    if seeded.is_empty() {
        return Err(VmgError::invalid(format!(
            "{} is neither a bundle, a directory of seed_* bundles, nor a pipeline run",
            dir.display()
        )));
    }
    seeded
        .into_iter()
        .take(count)
        .map(|s| Ok((Some(s), Agent::load_bundle(&dir.join(format!("seed_{s}")))?)))
        .collect()
}

fn cmd_evaluate(ctx: &Ctx, a: &EvaluateArgs) -> Result<()> {
    let mut env = env_for(&a.env, a.start, a.goal)?;
    let runs = load_agents(&a.agent, a.seeds)?
        .into_iter()
        .map(|(seed, mut agent)| evaluate(&mut agent, env.as_mut(), a.episodes, a.first_episode_seed, seed))
        .collect::<Result<Vec<RunReport>>>()?;
    let report = aggregate(env.spec(), runs);
    let out = ctx.out(&a.out);
    write_json(&out, &report)?;
    print_json(&json!({
        "report": out,
        "success_mean": report.success_mean,
        "success_std": report.success_std,
        "normalized_score_mean": report.normalized_score_mean,
        "normalized_score_std": report.normalized_score_std,
    }));
    Ok(())
}

fn cmd_export_layout(ctx: &Ctx, a: &ExportLayoutArgs) -> Result<()> {
    let graph = MemoryGraph::load(&a.graph)?;
    let values = match &a.values {
        Some(p) => {
            let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(p)?)?;
            // Accept both a bare value table and the `vmg plan` output.
            let table = doc.get("values").filter(|v| v.is_object()).unwrap_or(&doc);
            let table: ValueTable = serde_json::from_value(table.clone())?;
            Some(table.values)
        }
        None => None,
    };
    let layout = export_layout(&graph, values.as_deref());
    let out = ctx.out(&a.out);
    write_json(&out, &layout)?;
    print_json(&json!({"layout": out, "vertices": layout.vertices.len(), "edges": layout.edges.len()}));
    Ok(())
}

fn cmd_run_pipeline(ctx: &Ctx, a: &RunPipelineArgs) -> Result<()> {
    let out = ctx.out(&a.out);
    if let Some(path) = &a.replay {
        let manifest = Manifest::load(path)?;
        let report = pipeline::replay(&manifest, &out)?;
        print_json(&serde_json::to_value(&report)?);
        if !report.is_exact() {
            return Err(VmgError::State(format!(
                "{} artifacts differ from the manifest",
                report.mismatched.len()
            )));
        }
        return Ok(());
    }
    let config = load_config(a.config.as_deref())?;
    let manifest = pipeline::run_pipeline(&config, &out)?;
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join(pipeline::REPORT_PATH))?)?;
    print_json(&json!({
        "manifest": out.join(pipeline::MANIFEST_FILE),
        "stages": manifest
            .stages
            .iter()
            .map(|s| format!("{} {:?}", s.label(), s.status).to_lowercase())
            .collect::<Vec<_>>(),
        "success_mean": report["success_mean"],
        "success_std": report["success_std"],
    }));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx {
        seed: cli.seed,
        out_root: cli.out_root,
    };
    match &cli.command {
        Command::Collect(a) => cmd_collect(&ctx, a),
        Command::TrainMetric(a) => cmd_train_metric(&ctx, a),
        Command::TrainTranslator(a) => cmd_train_translator(&ctx, a),
        Command::BuildGraph(a) => cmd_build_graph(&ctx, a),
        Command::Plan(a) => cmd_plan(&ctx, a),
        Command::Bundle(a) => cmd_bundle(&ctx, a),
        Command::Relabel(a) => cmd_relabel(&ctx, a),
        Command::Evaluate(a) => cmd_evaluate(&ctx, a),
        Command::ExportLayout(a) => cmd_export_layout(&ctx, a),
        Command::RunPipeline(a) => cmd_run_pipeline(&ctx, a),
        Command::Dataset {
            command: DatasetCommand::Validate { path },
        } => cmd_validate(path),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
