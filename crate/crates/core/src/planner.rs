//! Planning on the graph MDP.
//!
//! Graph transitions are deterministic: taking edge `v -> u` moves to `u` and
//! earns that edge's reward. Values come from synchronous value iteration;
//! action selection looks for the best-valued vertex within a hop budget and
//! walks toward it along a minimum-weight path, where an edge's weight is its
//! reward gap to the best edge in the graph.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Result, VmgError};
use crate::graph::MemoryGraph;

pub const DEFAULT_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_MAX_ITERS: usize = 10_000;

/// Compressed adjacency with successors sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphMdp {
    offsets: Vec<usize>,
    targets: Vec<usize>,
    rewards: Vec<f64>,
}

impl GraphMdp {
    /// `edges` are `(from, to, reward)`; duplicates and self-loops are rejected.
    pub fn new(num_vertices: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut sorted = edges.to_vec();
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut offsets = vec![0; num_vertices + 1];
        for w in sorted.windows(2) {
            if (w[0].0, w[0].1) == (w[1].0, w[1].1) {
                return Err(VmgError::invalid(format!("duplicate edge {}->{}", w[0].0, w[0].1)));
            }
        }
        for &(a, b, r) in &sorted {
            if a >= num_vertices || b >= num_vertices {
                return Err(VmgError::invalid(format!("edge {a}->{b} outside {num_vertices} vertices")));
            }
            if a == b {
                return Err(VmgError::invalid(format!("self-edge at vertex {a}")));
            }
            if !r.is_finite() {
                return Err(VmgError::NumericFault {
                    location: format!("edge {a}->{b}"),
                    detail: format!("reward {r}"),
                });
            }
            offsets[a + 1] += 1;
        }
        for i in 0..num_vertices {
            offsets[i + 1] += offsets[i];
        }
        Ok(GraphMdp {
            offsets,
            targets: sorted.iter().map(|e| e.1).collect(),
            rewards: sorted.iter().map(|e| e.2).collect(),
        })
    }

    pub fn from_graph(graph: &MemoryGraph) -> Result<Self> {
        let edges: Vec<_> = graph
            .edges
            .iter()
            .zip(&graph.rewards)
            .map(|(e, &r)| (e.from, e.to, r))
            .collect();
        Self::new(graph.num_vertices(), &edges)
    }

    pub fn num_vertices(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_edges(&self) -> usize {
        self.targets.len()
    }

    fn range(&self, v: usize) -> std::ops::Range<usize> {
        self.offsets[v]..self.offsets[v + 1]
    }

    /// `(target, reward)` pairs leaving `v`, by increasing target id.
    pub fn successors(&self, v: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.range(v).map(|k| (self.targets[k], self.rewards[k]))
    }

    pub fn out_degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    pub fn max_reward(&self) -> Option<f64> {
        self.rewards.iter().copied().reduce(f64::max)
    }

    fn check_vertex(&self, v: usize) -> Result<()> {
        if v >= self.num_vertices() {
            return Err(VmgError::invalid(format!(
                "vertex {v} outside graph of {} vertices",
                self.num_vertices()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    pub values: Vec<f64>,
    pub discount: f64,
    pub iterations_run: usize,
    pub converged: bool,
    /// Largest change in the final backup.
    pub residual: f64,
}

fn backup(mdp: &GraphMdp, values: &[f64], discount: f64, v: usize) -> f64 {
    mdp.successors(v)
        .map(|(u, r)| r + discount * values[u])
        .reduce(f64::max)
        .unwrap_or(0.0)
}

/// Synchronous Bellman backups from `V = 0`. Vertices without outgoing edges keep `V = 0`.
pub fn value_iteration(
    mdp: &GraphMdp,
    discount: f64,
    tolerance: f64,
    max_iters: usize,
) -> Result<ValueTable> {
    if mdp.num_vertices() == 0 {
        return Err(VmgError::invalid("value iteration on an empty graph"));
    }
    if !(discount > 0.0 && discount < 1.0) {
        return Err(VmgError::invalid(format!("discount must lie in (0, 1), got {discount}")));
    }
    let n = mdp.num_vertices();
    let mut values = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iters {
        residual = 0.0;
        for v in 0..n {
            next[v] = backup(mdp, &values, discount, v);
            residual = f64::max(residual, (next[v] - values[v]).abs());
        }
        std::mem::swap(&mut values, &mut next);
        iterations += 1;
        if residual <= tolerance {
            break;
        }
    }
    Ok(ValueTable {
        values,
        discount,
        iterations_run: iterations,
        converged: residual <= tolerance,
        residual,
    })
}

/// `max_v |V(v) - backup(V)(v)|`.
pub fn bellman_residual(mdp: &GraphMdp, values: &[f64], discount: f64) -> f64 {
    (0..mdp.num_vertices())
        .map(|v| (values[v] - backup(mdp, values, discount, v)).abs())
        .fold(0.0, f64::max)
}

/// Per-edge weights `max_reward - reward`, parallel to the adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeWeights {
    weights: Vec<f64>,
}

impl EdgeWeights {
    pub fn new(mdp: &GraphMdp) -> Self {
        let max = mdp.max_reward().unwrap_or(0.0);
        EdgeWeights {
            weights: mdp.rewards.iter().map(|r| max - r).collect(),
        }
    }

    /// `(target, weight)` pairs leaving `v`.
    pub fn successors<'a>(&'a self, mdp: &'a GraphMdp, v: usize) -> impl Iterator<Item = (usize, f64)> + 'a {
        mdp.range(v).map(|k| (mdp.targets[k], self.weights[k]))
    }

    pub fn weight(&self, mdp: &GraphMdp, from: usize, to: usize) -> Option<f64> {
        self.successors(mdp, from).find(|&(u, _)| u == to).map(|(_, w)| w)
    }

    pub fn all(&self) -> &[f64] {
        &self.weights
    }
}

/// Highest-valued vertex within `horizon` hops of `start` (`None` = unbounded).
/// Ties prefer fewer hops, then the lower id.
pub fn best_future_vertex(
    mdp: &GraphMdp,
    values: &[f64],
    start: usize,
    horizon: Option<usize>,
) -> Result<usize> {
    mdp.check_vertex(start)?;
    let mut hops = vec![usize::MAX; mdp.num_vertices()];
    hops[start] = 0;
    let mut queue = VecDeque::from([start]);
    let mut best = (values[start], 0usize, start);
    while let Some(v) = queue.pop_front() {
        if horizon.is_some_and(|h| hops[v] >= h) {
            continue;
        }
        for (u, _) in mdp.successors(v) {
            if hops[u] == usize::MAX {
                hops[u] = hops[v] + 1;
                queue.push_back(u);
                let cand = (values[u], hops[u], u);
                if cand.0 > best.0 || (cand.0 == best.0 && (cand.1, cand.2) < (best.1, best.2)) {
                    best = cand;
                }
            }
        }
    }
    Ok(best.2)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Key {
    cost: f64,
    hops: usize,
}

impl Eq for Key {}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> Ordering {
        self.cost
            .total_cmp(&other.cost)
            .then(self.hops.cmp(&other.hops))
    }
}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Minimum-weight path from `from` to `to`.
///
/// Among paths of equal weight the one with fewer hops wins, then the
/// lexicographically smallest vertex sequence.
pub fn shortest_path(
    mdp: &GraphMdp,
    weights: &EdgeWeights,
    from: usize,
    to: usize,
) -> Result<Vec<usize>> {
    mdp.check_vertex(from)?;
    mdp.check_vertex(to)?;
    if from == to {
        return Ok(vec![from]);
    }
    let n = mdp.num_vertices();
    let mut best: Vec<Option<Key>> = vec![None; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    best[from] = Some(Key { cost: 0.0, hops: 0 });
    heap.push(std::cmp::Reverse((Key { cost: 0.0, hops: 0 }, from)));
    while let Some(std::cmp::Reverse((key, v))) = heap.pop() {
        if done[v] {
            continue;
        }
        done[v] = true;
        if v == to {
            break;
        }
        for (u, w) in weights.successors(mdp, v) {
            let cand = Key {
                cost: key.cost + w,
                hops: key.hops + 1,
            };
            if !done[u] && best[u].is_none_or(|b| cand < b) {
                best[u] = Some(cand);
                heap.push(std::cmp::Reverse((cand, u)));
            }
        }
    }
    let Some(target_key) = best[to].filter(|_| done[to]) else {
        return Err(VmgError::Planning(format!("vertex {to} is unreachable from {from}")));
    };

    // Edges achieving the optimal key form a DAG (hops grow by one along each).
    let tight = |v: usize, u: usize, w: f64| -> bool {
        done[v]
            && best[u].is_some_and(|bu| {
                let bv = best[v].expect("settled vertex has a key");
                bv.cost + w == bu.cost && bv.hops + 1 == bu.hops
            })
    };
    // Mark vertices on some tight path into `to`, walking backward by hop level.
    let mut reaches = vec![false; n];
    reaches[to] = true;
    let mut by_hops: Vec<Vec<usize>> = vec![Vec::new(); target_key.hops + 1];
    for v in 0..n {
        if let Some(k) = best[v] {
            if done[v] && k.hops <= target_key.hops {
                by_hops[k.hops].push(v);
            }
        }
    }
    for level in (0..target_key.hops).rev() {
        for &v in &by_hops[level] {
            reaches[v] = weights
                .successors(mdp, v)
                .any(|(u, w)| reaches[u] && tight(v, u, w));
        }
    }
    let mut path = vec![from];
    let mut v = from;
    while v != to {
        v = weights
            .successors(mdp, v)
            .find(|&(u, w)| reaches[u] && tight(v, u, w))
            .map(|(u, _)| u)
            .ok_or_else(|| VmgError::Internal("shortest-path reconstruction failed".into()))?;
        path.push(v);
    }
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    /// Hop budget for the best-value search; `None` searches the whole reachable set.
    pub search_horizon: Option<usize>,
    /// Index of the path vertex handed to the translator.
    pub subgoal_index: usize,
    pub discount: f64,
    /// Pick the best one-step neighbour instead of searching and routing.
    pub greedy: bool,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            search_horizon: None,
            subgoal_index: 1,
            discount: 0.8,
            greedy: false,
        }
    }
}

/// Target vertex for the agent currently at `current`.
pub fn select_graph_action(
    mdp: &GraphMdp,
    values: &ValueTable,
    weights: &EdgeWeights,
    current: usize,
    config: &PlanConfig,
) -> Result<usize> {
    mdp.check_vertex(current)?;
    if config.subgoal_index == 0 {
        return Err(VmgError::invalid("sub-goal index must be >= 1"));
    }
    if config.greedy {
        let mut best: Option<(f64, usize)> = None;
        for (u, r) in mdp.successors(current) {
            let q = r + values.discount * values.values[u];
            if best.is_none_or(|(bq, _)| q > bq) {
                best = Some((q, u));
            }
        }
        return Ok(best.map_or(current, |(_, u)| u));
    }
    let target = best_future_vertex(mdp, &values.values, current, config.search_horizon)?;
    let path = shortest_path(mdp, weights, current, target)?;
    Ok(path[config.subgoal_index.min(path.len() - 1)])
}

/// Values, weights and configuration bundled for repeated queries.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub mdp: GraphMdp,
    pub values: ValueTable,
    pub weights: EdgeWeights,
    pub config: PlanConfig,
}

impl Plan {
    pub fn compute(graph: &MemoryGraph, config: PlanConfig) -> Result<Self> {
        let mdp = GraphMdp::from_graph(graph)?;
        let values = value_iteration(&mdp, config.discount, DEFAULT_TOLERANCE, DEFAULT_MAX_ITERS)?;
        if !values.converged {
            log::warn!(
                "value iteration stopped after {} iterations with residual {:e}",
                values.iterations_run,
                values.residual
            );
        }
        let weights = EdgeWeights::new(&mdp);
        Ok(Plan {
            mdp,
            values,
            weights,
            config,
        })
    }

    /// Reassembles a plan from a stored value table.
    pub fn from_values(graph: &MemoryGraph, values: ValueTable, config: PlanConfig) -> Result<Self> {
        let mdp = GraphMdp::from_graph(graph)?;
        if values.values.len() != mdp.num_vertices() {
            return Err(VmgError::State(format!(
                "value table has {} entries for a graph of {} vertices",
                values.values.len(),
                mdp.num_vertices()
            )));
        }
        let weights = EdgeWeights::new(&mdp);
        Ok(Plan {
            mdp,
            values,
            weights,
            config,
        })
    }

    pub fn select(&self, current: usize) -> Result<usize> {
        select_graph_action(&self.mdp, &self.values, &self.weights, current, &self.config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vi(n: usize, edges: &[(usize, usize, f64)], discount: f64) -> ValueTable {
        let mdp = GraphMdp::new(n, edges).unwrap();
        value_iteration(&mdp, discount, DEFAULT_TOLERANCE, DEFAULT_MAX_ITERS).unwrap()
    }

    #[test]
    fn single_edge() {
        let t = vi(2, &[(0, 1, 1.0)], 0.8);
        assert_eq!(t.values, vec![1.0, 0.0]);
        assert!(t.converged);
    }

    #[test]
    fn three_chain() {
        let t = vi(3, &[(0, 1, 1.0), (1, 2, 1.0)], 0.8);
        assert!((t.values[0] - 1.8).abs() < 1e-12);
        assert_eq!(t.values[1], 1.0);
        assert_eq!(t.values[2], 0.0);
    }

    #[test]
    fn two_cycle_geometric() {
        let t = vi(2, &[(0, 1, 1.0), (1, 0, 1.0)], 0.5);
        assert!(t.converged);
        for v in t.values {
            assert!((v - 2.0).abs() < 1e-8);
        }
    }

    #[test]
    fn iteration_cap_reports_unconverged() {
        let mdp = GraphMdp::new(2, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let t = value_iteration(&mdp, 0.99, 1e-12, 5).unwrap();
        assert!(!t.converged);
        assert_eq!(t.iterations_run, 5);
    }

    #[test]
    fn bad_inputs() {
        let mdp = GraphMdp::new(1, &[]).unwrap();
        assert!(value_iteration(&mdp, 1.0, 1e-9, 10).is_err());
        assert!(value_iteration(&GraphMdp::new(0, &[]).unwrap(), 0.5, 1e-9, 10).is_err());
        assert!(GraphMdp::new(2, &[(0, 0, 1.0)]).is_err());
        assert!(GraphMdp::new(2, &[(0, 1, 1.0), (0, 1, 2.0)]).is_err());
        assert!(GraphMdp::new(2, &[(0, 2, 1.0)]).is_err());
    }

    #[test]
    fn weights_have_zero_minimum() {
        let mdp = GraphMdp::new(3, &[(0, 1, 0.3), (1, 2, 1.0), (0, 2, -0.5)]).unwrap();
        let w = EdgeWeights::new(&mdp);
        assert!(w.all().iter().all(|&x| x >= 0.0));
        assert!(w.all().contains(&0.0));
        assert_eq!(w.weight(&mdp, 0, 2), Some(1.5));
    }

    #[test]
    fn best_future_cases() {
        let isolated = GraphMdp::new(2, &[]).unwrap();
        assert_eq!(best_future_vertex(&isolated, &[0.0, 5.0], 0, None).unwrap(), 0);
        let star = GraphMdp::new(3, &[(0, 1, 0.0), (0, 2, 0.0)]).unwrap();
        assert_eq!(best_future_vertex(&star, &[0.1, 0.2, 0.9], 0, Some(1)).unwrap(), 2);
        // Horizon limits the search.
        let chain = GraphMdp::new(3, &[(0, 1, 0.0), (1, 2, 0.0)]).unwrap();
        assert_eq!(best_future_vertex(&chain, &[0.0, 0.5, 1.0], 0, Some(1)).unwrap(), 1);
        assert_eq!(best_future_vertex(&chain, &[0.0, 0.5, 1.0], 0, None).unwrap(), 2);
        // Equal values: fewer hops wins, then lower id.
        assert_eq!(best_future_vertex(&chain, &[0.0, 1.0, 1.0], 0, None).unwrap(), 1);
        assert_eq!(best_future_vertex(&star, &[0.0, 1.0, 1.0], 0, None).unwrap(), 1);
        assert_eq!(best_future_vertex(&star, &[1.0, 1.0, 1.0], 0, None).unwrap(), 0);
    }

    #[test]
    fn shortest_path_cases() {
        // 0->1->3 costs 0.3, 0->2->3 costs 0.7.
        let mdp = GraphMdp::new(
            4,
            &[(0, 1, 0.9), (1, 3, 0.8), (0, 2, 0.6), (2, 3, 0.7), (3, 0, 1.0)],
        )
        .unwrap();
        let w = EdgeWeights::new(&mdp);
        assert_eq!(shortest_path(&mdp, &w, 0, 3).unwrap(), vec![0, 1, 3]);
        assert_eq!(shortest_path(&mdp, &w, 2, 2).unwrap(), vec![2]);
        let cut = GraphMdp::new(2, &[(0, 1, 0.0)]).unwrap();
        let cw = EdgeWeights::new(&cut);
        assert!(matches!(shortest_path(&cut, &cw, 1, 0), Err(VmgError::Planning(_))));
    }

    #[test]
    fn shortest_path_tie_break() {
        // All weights zero: fewest hops, then lexicographic order.
        let mdp = GraphMdp::new(
            5,
            &[(0, 2, 1.0), (0, 1, 1.0), (1, 4, 1.0), (2, 4, 1.0), (0, 3, 1.0), (3, 1, 1.0)],
        )
        .unwrap();
        let w = EdgeWeights::new(&mdp);
        assert_eq!(shortest_path(&mdp, &w, 0, 4).unwrap(), vec![0, 1, 4]);
    }

    #[test]
    fn subgoal_indexing_and_clamp() {
        let mdp = GraphMdp::new(4, &[(0, 1, 0.0), (1, 2, 0.0), (2, 3, 1.0)]).unwrap();
        let values = value_iteration(&mdp, 0.8, 1e-9, 100).unwrap();
        let w = EdgeWeights::new(&mdp);
        let cfg = PlanConfig {
            subgoal_index: 2,
            ..PlanConfig::default()
        };
        // Best vertex is 2 (value 1) reached by [0, 1, 2].
        assert_eq!(select_graph_action(&mdp, &values, &w, 0, &cfg).unwrap(), 2);
        // From 1 the path is [1, 2]; index clamps.
        assert_eq!(select_graph_action(&mdp, &values, &w, 1, &cfg).unwrap(), 2);
        // At a sink the agent holds.
        assert_eq!(select_graph_action(&mdp, &values, &w, 3, &cfg).unwrap(), 3);
        let bad = PlanConfig {
            subgoal_index: 0,
            ..cfg
        };
        assert!(select_graph_action(&mdp, &values, &w, 0, &bad).is_err());
    }

    #[test]
    fn greedy_mode() {
        let mdp = GraphMdp::new(3, &[(0, 1, 0.5), (0, 2, 0.2), (2, 1, 1.0)]).unwrap();
        let values = value_iteration(&mdp, 0.8, 1e-9, 100).unwrap();
        let w = EdgeWeights::new(&mdp);
        let cfg = PlanConfig {
            greedy: true,
            ..PlanConfig::default()
        };
        // Q(0->1) = 0.5, Q(0->2) = 0.2 + 0.8 * 1.0 = 1.0.
        assert_eq!(select_graph_action(&mdp, &values, &w, 0, &cfg).unwrap(), 2);
        assert_eq!(select_graph_action(&mdp, &values, &w, 1, &cfg).unwrap(), 1);
    }

    #[test]
    fn residual_at_convergence() {
        let edges = [(0, 1, 0.2), (1, 2, -0.1), (2, 0, 0.7), (1, 3, 0.4)];
        let mdp = GraphMdp::new(4, &edges).unwrap();
        let t = value_iteration(&mdp, 0.9, 1e-10, 10_000).unwrap();
        assert!(t.converged);
        assert!(bellman_residual(&mdp, &t.values, 0.9) <= 1e-10);
    }
}
