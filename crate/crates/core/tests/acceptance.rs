//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run everything with `cargo test --release --test acceptance`, or pass
//! criterion numbers (`-- 1 4 5`) to select a subset. Criteria 7 and 8 reuse
//! the models trained for criterion 6 and trigger it when needed.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vmg::config::{CheckpointSelection, PipelineConfig};
use vmg::dataset::{self, Dataset, DatasetMeta, Episode, TransitionBatch};
use vmg::envs::{
    collect_maze, make_env, maze, MazeCollectConfig, MazeTask, PointMazeEnv, RandomPolicy,
    RewardSpec, ScriptedMazePolicy,
};
use vmg::executor::{evaluate, Agent, RunReport};
use vmg::graph::{build_edges, compute_rewards, MemoryGraph, RewardMode};
use vmg::hash::file_sha256;
use vmg::metric::{train_metric, MetricModel, TrainConfig};
use vmg::nn::{Mlp, Tape};
use vmg::pipeline::{self, run_pipeline, Manifest};
use vmg::planner::{shortest_path, value_iteration, EdgeWeights, GraphMdp, PlanConfig};
use vmg::translator::Translator;

/// Desk-scale training budget: epochs of 200 steps (batch 100) each.
const DESK_EPOCHS: usize = 40;
const DESK_STEPS_PER_EPOCH: usize = 200;
const EVAL_EPISODES: usize = 100;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn work_dir() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).expect("work dir");
    dir
}

fn fresh(name: &str) -> PathBuf {
    let dir = work_dir().join(name);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).expect("clear work dir");
    }
    dir
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

// ---------------------------------------------------------------- criterion 1

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

/// Analytic gradient of `loss` w.r.t. every parameter of `nets`, and its
/// central finite-difference estimate.
fn compare_gradients(
    nets: &mut [&mut Mlp],
    analytic: &[Mlp],
    loss: &mut dyn FnMut(&[&Mlp]) -> f64,
) -> f64 {
    const H: f64 = 1e-6;
    let mut diff = 0.0;
    let mut norm_a = 0.0;
    let mut norm_n = 0.0;
    for k in 0..nets.len() {
        let groups: Vec<usize> = nets[k].groups().iter().map(|(_, g)| g.len()).collect();
        let grad_groups: Vec<Vec<f64>> = analytic[k].groups().iter().map(|(_, g)| g.to_vec()).collect();
        for (gi, &len) in groups.iter().enumerate() {
            for i in 0..len {
                let orig = nets[k].groups()[gi].1[i];
                nets[k].groups_mut()[gi].1[i] = orig + H;
                let up = loss(&nets.iter().map(|m| &**m).collect::<Vec<_>>());
                nets[k].groups_mut()[gi].1[i] = orig - H;
                let down = loss(&nets.iter().map(|m| &**m).collect::<Vec<_>>());
                nets[k].groups_mut()[gi].1[i] = orig;
                let numeric = (up - down) / (2.0 * H);
                let a = grad_groups[gi][i];
                diff += (a - numeric).powi(2);
                norm_a += a * a;
                norm_n += numeric * numeric;
            }
        }
    }
    let denom = norm_a.sqrt() + norm_n.sqrt();
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}

fn metric_from(nets: &[&Mlp], template: &MetricModel) -> MetricModel {
    MetricModel {
        enc_s: nets[0].clone(),
        enc_a: nets[1].clone(),
        dec_a: nets[2].clone(),
        ..template.clone()
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst = BTreeMap::from([("contrastive", 0.0f64), ("action", 0.0), ("metric", 0.0), ("translator", 0.0)]);
    let seeds = 10u64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (sd, ad, b) = (3, 2, 6);
        // Small margin so both hinge branches are exercised at initialisation.
        let model = MetricModel::with_hidden(sd, ad, 4, 0.3, 12, &mut rng);
        let batch = TransitionBatch {
            states: random_matrix(&mut rng, b, sd, 1.0),
            actions: random_matrix(&mut rng, b, ad, 1.0),
            next_states: random_matrix(&mut rng, b, sd, 1.0),
        };
        for which in ["contrastive", "action", "metric"] {
            let mut tape = Tape::new();
            let (bound, nodes) = model.losses_on_tape(&mut tape, &batch).expect("losses");
            let node = match which {
                "contrastive" => nodes.contrastive,
                "action" => nodes.action,
                _ => nodes.total,
            };
            let grads = tape.backward(node).expect("backward");
            let analytic = [
                grads.mlp_grads(&bound.enc_s, &model.enc_s),
                grads.mlp_grads(&bound.enc_a, &model.enc_a),
                grads.mlp_grads(&bound.dec_a, &model.dec_a),
            ];
            let (mut e, mut a, mut d) = (model.enc_s.clone(), model.enc_a.clone(), model.dec_a.clone());
            let mut loss = |nets: &[&Mlp]| {
                let m = metric_from(nets, &model);
                match which {
                    "contrastive" => m.contrastive_loss(&batch).unwrap(),
                    "action" => m.action_loss(&batch).unwrap(),
                    _ => m.contrastive_loss(&batch).unwrap() + m.action_loss(&batch).unwrap(),
                }
            };
            let err = compare_gradients(&mut [&mut e, &mut a, &mut d], &analytic, &mut loss);
            let w = worst.get_mut(which).unwrap();
            *w = w.max(err);
        }

        let tr = Translator::with_hidden(sd, ad, 10, 12, &mut rng);
        let inputs = random_matrix(&mut rng, b, 2 * sd, 1.0);
        let actions = random_matrix(&mut rng, b, ad, 1.0);
        let mut tape = Tape::new();
        let (bound, l) = tr.loss_on_tape(&mut tape, inputs.clone(), actions.clone());
        let analytic = [tape.backward(l).expect("backward").mlp_grads(&bound, &tr.net)];
        let mut net = tr.net.clone();
        let mut loss = |nets: &[&Mlp]| {
            Translator {
                net: nets[0].clone(),
                horizon: 10,
            }
            .loss(&inputs, &actions)
            .unwrap()
        };
        let err = compare_gradients(&mut [&mut net], &analytic, &mut loss);
        let w = worst.get_mut("translator").unwrap();
        *w = w.max(err);
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst.values().all(|&e| e < 1e-4) && secs < 30.0;
    let detail = format!(
        "{seeds} seeds; worst relative error contrastive {:.1e}, action {:.1e}, metric {:.1e}, translator {:.1e}; {secs:.1} s",
        worst["contrastive"], worst["action"], worst["metric"], worst["translator"]
    );
    outcome(pass, detail)
}

// ---------------------------------------------------------------- criterion 2

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_graph(graph: &MemoryGraph, model: &MetricModel, ds: &Dataset) -> Result<(), String> {
    let g = graph.gamma_m;
    let feats = model.encode_states(&ds.all_states()).map_err(|e| e.to_string())?;
    let vf: Vec<&[f64]> = graph.vertices.iter().map(|v| v.feature.as_slice()).collect();
    for (i, v) in graph.vertices.iter().enumerate() {
        if v.id != i {
            return Err(format!("vertex {i} has id {}", v.id));
        }
        let enc = model.encode_state(&v.representative_state).map_err(|e| e.to_string())?;
        if euclid(&enc, &v.feature) > 1e-12 {
            return Err(format!("vertex {i} feature is not the encoding of its representative"));
        }
        for j in 0..i {
            if euclid(vf[i], vf[j]) <= g {
                return Err(format!("vertices {j} and {i} closer than gamma_m"));
            }
        }
    }
    for (s, row) in feats.rows().into_iter().enumerate() {
        let f = row.as_slice().unwrap();
        let mut best = (f64::INFINITY, usize::MAX);
        for (j, v) in vf.iter().enumerate() {
            let d = euclid(f, v);
            if d < best.0 {
                best = (d, j);
            }
        }
        let a = graph.assignment[s];
        if euclid(f, vf[a]) > g {
            return Err(format!("state {s} farther than gamma_m from its vertex {a}"));
        }
        if (euclid(f, vf[a]) - best.0).abs() > 1e-12 || (a != best.1 && euclid(f, vf[a]) > best.0) {
            return Err(format!("state {s} assigned to {a}, nearest is {}", best.1));
        }
    }
    let mut witnessed = BTreeSet::new();
    for (s, s2, _) in ds.transition_state_indices() {
        let (a, b) = (graph.assignment[s], graph.assignment[s2]);
        if a != b {
            witnessed.insert((a, b));
        }
    }
    let edges: BTreeSet<(usize, usize)> = graph.edges.iter().map(|e| (e.from, e.to)).collect();
    if edges.len() != graph.edges.len() {
        return Err("duplicate edges".into());
    }
    if let Some(e) = edges.iter().find(|(a, b)| a == b) {
        return Err(format!("self edge {e:?}"));
    }
    if edges != witnessed {
        return Err(format!(
            "edge set differs from witnessed transitions ({} vs {})",
            edges.len(),
            witnessed.len()
        ));
    }
    Ok(())
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let layout = maze::umaze();
    let (ds, _) = collect_maze(&layout, &MazeCollectConfig::diverse(100, 100, 21)).expect("collect");
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let model = MetricModel::with_hidden(2, 2, 10, 1.0, 64, &mut rng);
    let cfg = TrainConfig {
        epochs: 5,
        steps_per_epoch: Some(40),
        checkpoint_every: 0,
        seed: 21,
        ..TrainConfig::default()
    };
    let trained = train_metric(model.clone(), ds.trajectories(), &cfg, None).expect("train").model;
    let mut checked = Vec::new();
    for (label, m) in [("untrained", &model), ("trained", &trained)] {
        for gamma in [0.3, 0.8, 1.6] {
            let graph = MemoryGraph::build(m, &ds, gamma, RewardMode::AvgWithInternal).expect("build");
            if let Err(e) = check_graph(&graph, m, &ds) {
                return outcome(false, format!("{label} model, gamma_m {gamma}: {e}"));
            }
            checked.push(format!("{}v/{}e", graph.num_vertices(), graph.edges.len()));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        secs < 60.0,
        format!(
            "{} transitions, 6 graphs exhaustively checked ({}); {secs:.1} s",
            ds.num_transitions(),
            checked.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- criterion 3

fn random_edges(rng: &mut ChaCha8Rng, n: usize, max_deg: usize, grid: bool) -> Vec<(usize, usize, f64)> {
    let mut edges = Vec::new();
    for v in 0..n {
        let deg = rng.random_range(0..=max_deg.min(n - 1));
        let mut targets = BTreeSet::new();
        while targets.len() < deg {
            let u = rng.random_range(0..n);
            if u != v {
                targets.insert(u);
            }
        }
        for u in targets {
            let r = if grid {
                rng.random_range(-4..=8) as f64 / 8.0
            } else {
                rng.random_range(-1.0..1.0)
            };
            edges.push((v, u, r));
        }
    }
    edges
}

/// Best stationary policy value by enumerating every successor choice and
/// solving each policy's linear system exactly.
fn policy_enumeration(n: usize, edges: &[(usize, usize, f64)], gamma: f64) -> Vec<f64> {
    let mut succ: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for &(a, b, r) in edges {
        succ[a].push((b, r));
    }
    let mut best = vec![f64::NEG_INFINITY; n];
    let mut choice = vec![0usize; n];
    loop {
        // (I - gamma P) V = r
        let mut m = nalgebra::DMatrix::<f64>::identity(n, n);
        let mut rhs = nalgebra::DVector::<f64>::zeros(n);
        for v in 0..n {
            if let Some(&(u, r)) = succ[v].get(choice[v]) {
                m[(v, u)] -= gamma;
                rhs[v] = r;
            }
        }
        let sol = m.lu().solve(&rhs).expect("policy system is regular");
        for v in 0..n {
            best[v] = best[v].max(sol[v]);
        }
        let mut k = 0;
        loop {
            if k == n {
                return best;
            }
            if succ[k].len() > 1 && choice[k] + 1 < succ[k].len() {
                choice[k] += 1;
                break;
            }
            choice[k] = 0;
            k += 1;
        }
    }
}

/// Best discounted return over all walks of at most `h` steps (stopping only at sinks).
fn finite_horizon(succ: &[Vec<(usize, f64)>], v: usize, h: usize, gamma: f64) -> f64 {
    if h == 0 || succ[v].is_empty() {
        return 0.0;
    }
    succ[v]
        .iter()
        .map(|&(u, r)| r + gamma * finite_horizon(succ, u, h - 1, gamma))
        .fold(f64::NEG_INFINITY, f64::max)
}

fn criterion_3() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut graphs = 0;
    // Chains with closed-form values.
    for n in 2..=12 {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let rewards: Vec<f64> = (0..n - 1).map(|_| rng.random_range(-1.0..1.0)).collect();
        let edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1, rewards[i])).collect();
        let mdp = GraphMdp::new(n, &edges).unwrap();
        for gamma in [0.8, 0.95] {
            let vt = value_iteration(&mdp, gamma, 1e-12, 100_000).unwrap();
            for i in 0..n {
                let exact: f64 = (i..n - 1).map(|k| gamma.powi((k - i) as i32) * rewards[k]).sum();
                worst = worst.max((vt.values[i] - exact).abs());
            }
            graphs += 1;
        }
    }
    // Cycles with closed-form values.
    for n in 2..=12 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + n as u64);
        let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n, rewards[i])).collect();
        let mdp = GraphMdp::new(n, &edges).unwrap();
        for gamma in [0.8, 0.95] {
            let vt = value_iteration(&mdp, gamma, 1e-12, 100_000).unwrap();
            for i in 0..n {
                let lap: f64 = (0..n).map(|k| gamma.powi(k as i32) * rewards[(i + k) % n]).sum();
                let exact = lap / (1.0 - gamma.powi(n as i32));
                worst = worst.max((vt.values[i] - exact).abs());
            }
            graphs += 1;
        }
    }
    // Random graphs against policy enumeration and finite-horizon walk enumeration.
    let mut worst_h: f64 = 0.0;
    for seed in 0..60u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = rng.random_range(1..=12);
        let max_deg = if n > 8 { 2 } else { 3 };
        let edges = random_edges(&mut rng, n, max_deg, seed % 2 == 0);
        let mdp = GraphMdp::new(n, &edges).unwrap();
        let gamma = [0.8, 0.9, 0.95][seed as usize % 3];
        let vt = value_iteration(&mdp, gamma, 1e-12, 100_000).unwrap();
        let exact = policy_enumeration(n, &edges, gamma);
        for v in 0..n {
            worst = worst.max((vt.values[v] - exact[v]).abs());
        }
        let mut succ = vec![Vec::new(); n];
        for &(a, b, r) in &edges {
            succ[a].push((b, r));
        }
        for h in 1..=6 {
            let vh = value_iteration(&mdp, gamma, 0.0, h).unwrap();
            for v in 0..n {
                worst_h = worst_h.max((vh.values[v] - finite_horizon(&succ, v, h, gamma)).abs());
            }
        }
        graphs += 1;
    }
    // Large random graph at the default tolerance.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 25_000;
    let mut edges = Vec::new();
    for v in 0..n {
        let mut t = BTreeSet::new();
        for _ in 0..rng.random_range(1..=4) {
            let u = rng.random_range(0..n);
            if u != v {
                t.insert(u);
            }
        }
        edges.extend(t.into_iter().map(|u| (v, u, rng.random_range(0.0..1.0))));
    }
    let mdp = GraphMdp::new(n, &edges).unwrap();
    let t0 = Instant::now();
    let big = value_iteration(&mdp, 0.95, 1e-9, 10_000).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst <= 1e-9 && worst_h <= 1e-9 && big.converged && secs < 1.0;
    outcome(
        pass,
        format!(
            "{graphs} small graphs, max error {worst:.1e} (finite horizon {worst_h:.1e}); {n} vertices/{} edges converged={} in {} iterations, {:.3} s",
            edges.len(),
            big.converged,
            big.iterations_run,
            secs
        ),
    )
}

// ---------------------------------------------------------------- criterion 4

/// Minimum over simple paths of (left-to-right weight sum, hops, vertex sequence).
fn enumerate_paths(
    succ: &[Vec<(usize, f64)>],
    from: usize,
    to: usize,
) -> Option<(f64, Vec<usize>)> {
    fn dfs(
        succ: &[Vec<(usize, f64)>],
        path: &mut Vec<usize>,
        cost: f64,
        to: usize,
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        let v = *path.last().unwrap();
        if v == to {
            let better = match best {
                None => true,
                Some((c, p)) => (cost, path.len(), &*path) < (*c, p.len(), &*p),
            };
            if better {
                *best = Some((cost, path.clone()));
            }
            return;
        }
        for &(u, w) in &succ[v] {
            if !path.contains(&u) {
                path.push(u);
                dfs(succ, path, cost + w, to, best);
                path.pop();
            }
        }
    }
    let mut best = None;
    dfs(succ, &mut vec![from], 0.0, to, &mut best);
    best
}

fn criterion_4() -> Outcome {
    let mut pairs = 0;
    let mut reachable = 0;
    let mut failures = Vec::new();
    let mut weights_ok = true;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let n = rng.random_range(2..=10);
        let edges = random_edges(&mut rng, n, 3, seed % 2 == 0);
        let mdp = GraphMdp::new(n, &edges).unwrap();
        let w = EdgeWeights::new(&mdp);
        if !edges.is_empty() {
            weights_ok &= w.all().iter().all(|&x| x >= 0.0) && w.all().iter().any(|&x| x == 0.0);
        }
        let mut succ = vec![Vec::new(); n];
        for v in 0..n {
            succ[v] = w.successors(&mdp, v).collect();
        }
        for from in 0..n {
            for to in 0..n {
                if from == to {
                    continue;
                }
                pairs += 1;
                let oracle = enumerate_paths(&succ, from, to);
                match (shortest_path(&mdp, &w, from, to), oracle) {
                    (Ok(path), Some((cost, best))) => {
                        reachable += 1;
                        let total = path
                            .windows(2)
                            .map(|e| w.weight(&mdp, e[0], e[1]).expect("path uses an edge"))
                            .fold(0.0, |acc, x| acc + x);
                        if path.first() != Some(&from) || path.last() != Some(&to) || total != cost {
                            failures.push(format!("graph {seed} {from}->{to}: {total} vs {cost}"));
                        } else if path != best {
                            failures.push(format!("graph {seed} {from}->{to}: tie-break {path:?} vs {best:?}"));
                        }
                    }
                    (Err(_), None) => {}
                    (Ok(_), None) => failures.push(format!("graph {seed} {from}->{to}: path to unreachable vertex")),
                    (Err(e), Some(_)) => failures.push(format!("graph {seed} {from}->{to}: {e}")),
                }
            }
        }
    }
    let pass = failures.is_empty() && weights_ok;
    let mut detail = format!("200 graphs, {pairs} vertex pairs ({reachable} reachable), weights nonnegative with a zero: {weights_ok}");
    if let Some(f) = failures.first() {
        detail.push_str(&format!("; {} mismatches, first: {f}", failures.len()));
    }
    outcome(pass, detail)
}

// ---------------------------------------------------------------- criterion 5

fn brute_force_reward(
    ds: &Dataset,
    assignment: &[usize],
    j1: usize,
    j2: usize,
    mode: RewardMode,
) -> f64 {
    let pool = |rs: &[f64]| -> f64 {
        if rs.is_empty() {
            return 0.0;
        }
        match mode {
            RewardMode::Max => rs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            RewardMode::Sum => rs.iter().sum(),
            _ => rs.iter().sum::<f64>() / rs.len() as f64,
        }
    };
    let collect = |a: usize, b: usize| -> Vec<f64> {
        let mut out = Vec::new();
        let mut idx = 0;
        for ep in ds.episodes() {
            for t in 0..ep.len() {
                if assignment[idx + t] == a && assignment[idx + t + 1] == b {
                    out.push(ep.rewards()[t]);
                }
            }
            idx += ep.len() + 1;
        }
        out
    };
    let head = pool(&collect(j1, j1));
    let cross = pool(&collect(j1, j2));
    let tail = pool(&collect(j2, j2));
    match mode {
        RewardMode::AvgWithInternal | RewardMode::Max | RewardMode::Sum => 0.5 * head + cross + 0.5 * tail,
        RewardMode::Rm => cross,
        RewardMode::RmH => cross + 0.5 * tail,
        RewardMode::RmT => 0.5 * head + cross,
    }
}

fn scalar_episode(states: &[f64], rewards: &[f64]) -> Episode {
    let t = rewards.len();
    Episode::new(
        Array2::from_shape_vec((t + 1, 1), states.to_vec()).unwrap(),
        Array2::zeros((t, 1)),
        rewards.to_vec(),
        false,
    )
    .unwrap()
}

fn criterion_5() -> Outcome {
    // Worked example: v0 internal {0.2}, v0->v1 {1.0, 0.6}, v1 internal {0.4}.
    let ex = Dataset::new(
        vec![
            scalar_episode(&[0.0, 0.1], &[0.2]),
            scalar_episode(&[0.0, 1.0], &[1.0]),
            scalar_episode(&[0.0, 1.0, 1.1], &[0.6, 0.4]),
        ],
        DatasetMeta::default(),
    )
    .unwrap();
    let ex_assign = vec![0, 0, 0, 1, 0, 1, 1];
    let ex_edges = build_edges(&ex, &ex_assign).unwrap();
    let expected = [
        (RewardMode::AvgWithInternal, 1.1),
        (RewardMode::Max, 0.1 + 1.0 + 0.2),
        (RewardMode::Sum, 0.1 + 1.6 + 0.2),
        (RewardMode::Rm, 0.8),
        (RewardMode::RmH, 1.0),
        (RewardMode::RmT, 0.9),
    ];
    let mut worst: f64 = 0.0;
    let mut example = Vec::new();
    for (mode, want) in expected {
        let got = compute_rewards(&ex, &ex_assign, &ex_edges, mode).unwrap()[&(0, 1)];
        worst = worst.max((got - want).abs());
        example.push(format!("{}={got:.2}", mode.as_str()));
    }

    let mut cases = 0;
    let mut edges_total = 0;
    for seed in 0..300u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + seed);
        let k = rng.random_range(1..=5);
        let mut eps = Vec::new();
        for _ in 0..rng.random_range(1..=4) {
            let t = rng.random_range(1..=8);
            let states: Vec<f64> = (0..=t).map(|_| rng.random_range(0.0..1.0)).collect();
            let rewards: Vec<f64> = (0..t).map(|_| rng.random_range(-8..=8) as f64 / 4.0).collect();
            eps.push(scalar_episode(&states, &rewards));
        }
        let ds = Dataset::new(eps, DatasetMeta::default()).unwrap();
        let assignment: Vec<usize> = (0..ds.num_states()).map(|_| rng.random_range(0..k)).collect();
        let edges = build_edges(&ds, &assignment).unwrap();
        edges_total += edges.len();
        for mode in RewardMode::ALL {
            let got = compute_rewards(&ds, &assignment, &edges, mode).unwrap();
            if got.len() != edges.len() {
                return outcome(false, format!("case {seed}: reward map size differs from edge set"));
            }
            for (&(a, b), &r) in &got {
                worst = worst.max((r - brute_force_reward(&ds, &assignment, a, b, mode)).abs());
            }
        }
        cases += 1;
    }
    outcome(
        worst <= 1e-12,
        format!(
            "worked example [{}]; {cases} random assignments x 6 modes over {edges_total} edges, max deviation {worst:.1e}",
            example.join(" ")
        ),
    )
}

// ---------------------------------------------------------------- criterion 6

fn desk_config(env: &str) -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.env = env.to_string();
    for (epochs, steps, every) in [
        (&mut c.metric.epochs, &mut c.metric.steps_per_epoch, &mut c.metric.checkpoint_every),
        (&mut c.translator.epochs, &mut c.translator.steps_per_epoch, &mut c.translator.checkpoint_every),
    ] {
        *epochs = DESK_EPOCHS;
        *steps = Some(DESK_STEPS_PER_EPOCH);
        *every = DESK_EPOCHS;
    }
    c.eval.episodes = EVAL_EPISODES;
    c
}

struct TrainedRun {
    config: PipelineConfig,
    dir: PathBuf,
    dataset: Dataset,
}

impl TrainedRun {
    fn models(&self, seed: u64) -> (MetricModel, Translator) {
        (
            MetricModel::load(&self.dir.join(pipeline::metric_path(seed))).unwrap(),
            Translator::load(&self.dir.join(pipeline::translator_path(seed))).unwrap(),
        )
    }

    fn agent(&self, seed: u64, gamma_m: f64, plan: PlanConfig) -> Agent {
        let (m, t) = self.models(seed);
        let bounds = make_env(&self.config.env).unwrap().spec().action_bounds.clone();
        Agent::build(m, t, &self.dataset, gamma_m, self.config.graph.reward_mode, plan, bounds).unwrap()
    }

    fn run_report(&self, seed: u64) -> RunReport {
        serde_json::from_slice(&std::fs::read(self.dir.join(pipeline::run_path(seed))).unwrap()).unwrap()
    }
}

fn train_run(name: &str, env: &str) -> (TrainedRun, Duration) {
    let config = desk_config(env);
    let dir = fresh(name);
    let t0 = Instant::now();
    run_pipeline(&config, &dir).expect("pipeline");
    let took = t0.elapsed();
    let dataset = dataset::load(&dir.join(pipeline::DATASET_PATH)).unwrap();
    (TrainedRun { config, dir, dataset }, took)
}

fn criterion_6(run: &TrainedRun, took: Duration) -> Outcome {
    let c = &run.config;
    let seeds = &c.eval.model_seeds;
    let rates: Vec<f64> = seeds.iter().map(|&s| run.run_report(s).success_rate).collect();
    let (mean, std) = mean_std(&rates);
    let layout = maze::umaze();
    let mut env = PointMazeEnv::new(layout.clone()).unwrap();
    let first = c.eval.first_episode_seed;
    let mut scripted = ScriptedMazePolicy::new(layout.clone(), layout.goal, c.data.noise_sigma, c.data.ou_theta);
    let scripted = evaluate(&mut scripted, &mut env, EVAL_EPISODES, first, None).unwrap();
    let mut random = RandomPolicy::new(env_spec(&env));
    let random = evaluate(&mut random, &mut env, EVAL_EPISODES, first, None).unwrap();
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run.dir.join(pipeline::REPORT_PATH)).unwrap()).unwrap();
    let secs = took.as_secs_f64();
    let pass = mean >= 0.8 && secs < 600.0 && mean > scripted.success_rate;
    outcome(
        pass,
        format!(
            "{} transitions, success {mean:.3} +/- {std:.3} over seeds {:?} ({} episodes each), normalized score {:.1}; scripted-noisy {:.2}, random {:.2}; wall-clock {secs:.0} s",
            run.dataset.num_transitions(),
            rates,
            EVAL_EPISODES,
            report["normalized_score_mean"].as_f64().unwrap_or(f64::NAN),
            scripted.success_rate,
            random.success_rate,
        ),
    )
}

fn env_spec(env: &PointMazeEnv) -> &vmg::envs::EnvSpec {
    use vmg::envs::Env;
    env.spec()
}

// ---------------------------------------------------------------- criterion 7

fn criterion_7(run: &TrainedRun) -> Outcome {
    let layout = maze::umaze();
    let task = MazeTask {
        start: layout.goal,
        goal: layout.start,
    };
    let spec: RewardSpec = format!("goal:{},{}", task.goal.0, task.goal.1).parse().unwrap();
    let mut env = PointMazeEnv::with_task(layout, task).unwrap();
    let first = run.config.eval.first_episode_seed;
    let (mut before, mut after, mut replans) = (Vec::new(), Vec::new(), Vec::new());
    for &seed in &run.config.eval.model_seeds {
        let mut agent = run.agent(seed, run.config.graph.gamma_m, run.config.plan);
        let hashes = (agent.graph().structure_hash(), agent.metric().content_hash(), agent.translator().content_hash());
        before.push(evaluate(&mut agent, &mut env, EVAL_EPISODES, first, Some(seed)).unwrap().success_rate);
        let (mut relabelled, took) = agent
            .relabel_and_replan(&run.dataset, spec.reward_fn("umaze").unwrap())
            .unwrap();
        let unchanged = hashes
            == (
                relabelled.graph().structure_hash(),
                relabelled.metric().content_hash(),
                relabelled.translator().content_hash(),
            );
        if !unchanged {
            return outcome(false, format!("seed {seed}: relabelling changed the graph structure or a network"));
        }
        replans.push(took.as_secs_f64());
        after.push(evaluate(&mut relabelled, &mut env, EVAL_EPISODES, first, Some(seed)).unwrap().success_rate);
    }
    let (b, _) = mean_std(&before);
    let (a, a_std) = mean_std(&after);
    let slowest = replans.iter().copied().fold(0.0, f64::max);
    outcome(
        a >= 0.6 && b < 0.1 && slowest < 1.0,
        format!(
            "new goal {spec}: original agents {b:.3} {before:?}, relabelled {a:.3} +/- {a_std:.3} {after:?}; slowest replan {:.1} ms, no retraining",
            slowest * 1e3
        ),
    )
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8(umaze: &TrainedRun, medium: &TrainedRun) -> Outcome {
    let base = umaze.config.graph.gamma_m;
    let mut sweep_ok = true;
    let mut counts = Vec::new();
    for &seed in &umaze.config.eval.model_seeds {
        let (m, _) = umaze.models(seed);
        let n: Vec<usize> = [0.5, 1.0, 2.0]
            .iter()
            .map(|f| {
                MemoryGraph::build(&m, &umaze.dataset, base * f, umaze.config.graph.reward_mode)
                    .unwrap()
                    .num_vertices()
            })
            .collect();
        sweep_ok &= n[0] > n[1] && n[1] > n[2];
        counts.push(format!("{n:?}"));
    }
    let first = medium.config.eval.first_episode_seed;
    let mut env = make_env("medium-maze").unwrap();
    let (mut default, mut greedy) = (Vec::new(), Vec::new());
    for &seed in &medium.config.eval.model_seeds {
        default.push(medium.run_report(seed).success_rate);
        let plan = PlanConfig {
            greedy: true,
            ..medium.config.plan
        };
        let mut agent = medium.agent(seed, medium.config.graph.gamma_m, plan);
        greedy.push(evaluate(&mut agent, env.as_mut(), EVAL_EPISODES, first, Some(seed)).unwrap().success_rate);
    }
    let (d, _) = mean_std(&default);
    let (g, _) = mean_std(&greedy);
    outcome(
        sweep_ok && g <= d,
        format!(
            "vertex counts at gamma_m x0.5/x1/x2 per seed {}; medium maze greedy {g:.3} {greedy:?} vs multi-step {d:.3} {default:?}",
            counts.join(" ")
        ),
    )
}

// ---------------------------------------------------------------- criterion 9

fn replay_config() -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.data.episodes = 30;
    c.data.episode_len = 60;
    c.metric.hidden = 32;
    c.metric.epochs = 4;
    c.metric.steps_per_epoch = Some(20);
    c.metric.checkpoint_every = 2;
    c.translator.hidden = 32;
    c.translator.epochs = 4;
    c.translator.steps_per_epoch = Some(20);
    c.translator.checkpoint_every = 2;
    c.eval.episodes = 5;
    c.eval.model_seeds = vec![0, 1];
    c.eval.checkpoint_selection = CheckpointSelection::Best;
    c.eval.select_from_epoch = 2;
    c.eval.selection_episodes = 3;
    c
}

fn criterion_9(trained: &[&TrainedRun]) -> Outcome {
    let original = fresh("replay_original");
    let manifest = run_pipeline(&replay_config(), &original).expect("pipeline");
    let saved = Manifest::load(&original.join(pipeline::MANIFEST_FILE)).unwrap();
    let report = pipeline::replay(&saved, &fresh("replay_copy")).expect("replay");
    // The full-size runs' manifests must also describe the files on disk.
    let mut full_checked = 0;
    let mut full_bad = Vec::new();
    for run in trained {
        let m = Manifest::load(&run.dir.join(pipeline::MANIFEST_FILE)).unwrap();
        for (path, sha) in m.outputs() {
            full_checked += 1;
            if file_sha256(&run.dir.join(&path)).ok().as_deref() != Some(sha.as_str()) {
                full_bad.push(path);
            }
        }
    }
    let stages: BTreeSet<&str> = manifest.stages.iter().map(|s| s.name.as_str()).collect();
    outcome(
        report.is_exact() && report.matched > 0 && full_bad.is_empty(),
        format!(
            "replayed {} stages ({}): {} artifacts identical, {} differ; {} artifacts of the full runs match their manifests",
            manifest.stages.len(),
            stages.into_iter().collect::<Vec<_>>().join(", "),
            report.matched,
            report.mismatched.len(),
            full_checked - full_bad.len(),
        ),
    )
}

// ---------------------------------------------------------------- driver

fn report(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f));
    let secs = t0.elapsed().as_secs_f64();
    let (pass, detail) = match result {
        Ok(o) => (o.pass, o.detail),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            (false, format!("panicked: {msg}"))
        }
    };
    println!(
        "criterion {n} {}: {name}: {detail} [{secs:.1} s]",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let picked: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    if !args.is_empty() && picked.is_empty() {
        // A name filter meant for other test targets.
        return;
    }
    let want = |n: usize| picked.is_empty() || picked.contains(&n);
    let mut all = true;
    if want(1) {
        all &= report(1, "gradient suite", criterion_1);
    }
    if want(2) {
        all &= report(2, "graph invariants", criterion_2);
    }
    if want(3) {
        all &= report(3, "value iteration oracle", criterion_3);
    }
    if want(4) {
        all &= report(4, "shortest path oracle", criterion_4);
    }
    if want(5) {
        all &= report(5, "reward modes", criterion_5);
    }
    let mut umaze = None;
    if want(6) || want(7) || want(8) || want(9) {
        match catch_unwind(|| train_run("umaze", "umaze")) {
            Ok(r) => umaze = Some(r),
            Err(_) => println!("umaze pipeline failed"),
        }
    }
    if want(6) {
        all &= match &umaze {
            Some((run, took)) => report(6, "umaze end to end", || criterion_6(run, *took)),
            None => report(6, "umaze end to end", || outcome(false, "pipeline failed".into())),
        };
    }
    if want(7) {
        all &= match &umaze {
            Some((run, _)) => report(7, "reward relabelling", || criterion_7(run)),
            None => report(7, "reward relabelling", || outcome(false, "pipeline failed".into())),
        };
    }
    let mut medium = None;
    if want(8) || want(9) {
        match catch_unwind(|| train_run("medium", "medium-maze")) {
            Ok(r) => medium = Some(r),
            Err(_) => println!("medium maze pipeline failed"),
        }
    }
    if want(8) {
        all &= match (&umaze, &medium) {
            (Some((u, _)), Some((m, _))) => report(8, "ablation directions", || criterion_8(u, m)),
            _ => report(8, "ablation directions", || outcome(false, "pipeline failed".into())),
        };
    }
    if want(9) {
        let trained: Vec<&TrainedRun> = umaze.iter().chain(medium.iter()).map(|(r, _)| r).collect();
        all &= report(9, "manifest replay", || criterion_9(&trained));
    }
    if !all {
        std::process::exit(1);
    }
}
