//! Memory graph construction.
//!
//! States whose features lie within `gamma_m` of an existing vertex are merged
//! into it; dataset transitions between distinct vertices become directed
//! edges, and each edge carries a reward pooled from the transitions it
//! summarizes.

mod layout;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Result, VmgError};
use crate::hash::sha256_hex;
use crate::metric::MetricModel;

pub use layout::{export_layout, Layout, LayoutEdge, LayoutVertex};

/// Euclidean distance; every vertex decision uses this exact function.
pub fn metric_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vertex {
    pub id: usize,
    /// The state that created the vertex.
    pub representative_state: Vec<f64>,
    pub feature: Vec<f64>,
}

/// How edge rewards pool the dataset rewards they summarize.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// `R11 / 2 + R12 + R22 / 2`, each term a mean.
    #[default]
    AvgWithInternal,
    /// Same shape as the default with `max` pooling.
    Max,
    /// Same shape as the default with `sum` pooling.
    Sum,
    /// Cross-vertex term only.
    Rm,
    /// `R12 + R22 / 2`.
    RmH,
    /// `R11 / 2 + R12`.
    RmT,
}

impl RewardMode {
    pub const ALL: [RewardMode; 6] = [
        RewardMode::AvgWithInternal,
        RewardMode::Max,
        RewardMode::Sum,
        RewardMode::Rm,
        RewardMode::RmH,
        RewardMode::RmT,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RewardMode::AvgWithInternal => "avg_with_internal",
            RewardMode::Max => "max",
            RewardMode::Sum => "sum",
            RewardMode::Rm => "rm",
            RewardMode::RmH => "rm_h",
            RewardMode::RmT => "rm_t",
        }
    }

    fn pool(self, rewards: &[f64]) -> f64 {
        match self {
            RewardMode::Max => rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            RewardMode::Sum => rewards.iter().sum(),
            _ => rewards.iter().sum::<f64>() / rewards.len() as f64,
        }
    }

    /// Weights of the `(source internal, target internal)` halves.
    fn internal_weights(self) -> (f64, f64) {
        match self {
            RewardMode::AvgWithInternal | RewardMode::Max | RewardMode::Sum => (0.5, 0.5),
            RewardMode::Rm => (0.0, 0.0),
            RewardMode::RmH => (0.0, 0.5),
            RewardMode::RmT => (0.5, 0.0),
        }
    }
}

impl fmt::Display for RewardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RewardMode {
    type Err = VmgError;

    fn from_str(s: &str) -> Result<Self> {
        RewardMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                VmgError::invalid(format!(
                    "unknown reward mode {s:?}; expected one of avg_with_internal, max, sum, rm, rm_h, rm_t"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VertexBuild {
    pub vertices: Vec<Vertex>,
    /// Vertex id for every dataset state, indexed like [`Dataset::all_states`].
    pub assignment: Vec<usize>,
}

/// Greedy insertion over `features` (one row per state, in dataset order),
/// then nearest-vertex assignment of every row.
pub fn build_vertices_from_features(
    features: &Array2<f64>,
    states: &Array2<f64>,
    gamma_m: f64,
) -> Result<VertexBuild> {
    if !(gamma_m > 0.0) {
        return Err(VmgError::invalid("gamma_m must be > 0"));
    }
    if features.nrows() == 0 {
        return Err(VmgError::invalid("no states to build vertices from"));
    }
    if features.nrows() != states.nrows() {
        return Err(VmgError::invalid("features and states have different row counts"));
    }
    let dim = features.ncols();
    // Flat copy of vertex features for a tight scan.
    let mut flat: Vec<f64> = Vec::new();
    let mut vertices = Vec::new();
    for (i, row) in features.rows().into_iter().enumerate() {
        let f = row.as_slice().expect("standard layout");
        let near = flat
            .chunks_exact(dim)
            .any(|v| metric_distance(v, f) <= gamma_m);
        if !near {
            flat.extend_from_slice(f);
            vertices.push(Vertex {
                id: vertices.len(),
                representative_state: states.row(i).to_vec(),
                feature: f.to_vec(),
            });
        }
    }
    let assignment = features
        .rows()
        .into_iter()
        .map(|row| nearest(&flat, dim, row.as_slice().expect("standard layout")))
        .collect();
    Ok(VertexBuild {
        vertices,
        assignment,
    })
}

fn nearest(flat: &[f64], dim: usize, f: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (j, v) in flat.chunks_exact(dim).enumerate() {
        let d = metric_distance(v, f);
        if d < best.0 {
            best = (d, j);
        }
    }
    best.1
}

pub fn build_vertices(model: &MetricModel, dataset: &Dataset, gamma_m: f64) -> Result<VertexBuild> {
    let states = dataset.all_states();
    let features = model.encode_states(&states)?;
    build_vertices_from_features(&features, &states, gamma_m)
}

/// Nearest vertex by [`metric_distance`]; ties go to the lowest id.
pub fn classify(feature: &[f64], vertices: &[Vertex]) -> Result<usize> {
    let mut best: Option<(f64, usize)> = None;
    for v in vertices {
        if v.feature.len() != feature.len() {
            return Err(VmgError::invalid(format!(
                "feature of length {} does not match vertex features of length {}",
                feature.len(),
                v.feature.len()
            )));
        }
        let d = metric_distance(&v.feature, feature);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, v.id));
        }
    }
    best.map(|(_, id)| id)
        .ok_or_else(|| VmgError::State("cannot classify against an empty vertex list".into()))
}

pub fn build_edges(dataset: &Dataset, assignment: &[usize]) -> Result<BTreeSet<(usize, usize)>> {
    check_assignment(dataset, assignment)?;
    Ok(dataset
        .transition_state_indices()
        .map(|(s, s2, _)| (assignment[s], assignment[s2]))
        .filter(|(a, b)| a != b)
        .collect())
}

fn check_assignment(dataset: &Dataset, assignment: &[usize]) -> Result<()> {
    if assignment.len() != dataset.num_states() {
        return Err(VmgError::invalid(format!(
            "assignment covers {} states but the dataset has {}",
            assignment.len(),
            dataset.num_states()
        )));
    }
    Ok(())
}

/// Pooled reward per edge under `mode`. Internal terms of vertices with no
/// internal transitions count as 0.
pub fn compute_rewards(
    dataset: &Dataset,
    assignment: &[usize],
    edges: &BTreeSet<(usize, usize)>,
    mode: RewardMode,
) -> Result<BTreeMap<(usize, usize), f64>> {
    check_assignment(dataset, assignment)?;
    let mut internal: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut cross: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for (s, s2, r) in dataset.transition_state_indices() {
        let (a, b) = (assignment[s], assignment[s2]);
        if a == b {
            internal.entry(a).or_default().push(r);
        } else {
            cross.entry((a, b)).or_default().push(r);
        }
    }
    let (w_src, w_dst) = mode.internal_weights();
    let internal_term = |v: usize| match internal.get(&v) {
        Some(rs) => mode.pool(rs),
        None => {
            log::debug!("vertex {v} has no internal transitions; internal reward taken as 0");
            0.0
        }
    };
    let mut out = BTreeMap::new();
    for &(a, b) in edges {
        let rs = cross.get(&(a, b)).ok_or_else(|| {
            VmgError::Internal(format!("edge {a}->{b} has no witnessing transition"))
        })?;
        let mut r = mode.pool(rs);
        if w_src != 0.0 {
            r = w_src * internal_term(a) + r;
        }
        if w_dst != 0.0 {
            r += w_dst * internal_term(b);
        }
        out.insert((a, b), r);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildMeta {
    pub model_hash: String,
    pub dataset_hash: String,
    pub reward_mode: RewardMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryGraph {
    pub vertices: Vec<Vertex>,
    /// Sorted by `(from, to)`.
    pub edges: Vec<Edge>,
    /// Parallel to `edges`.
    pub rewards: Vec<f64>,
    pub gamma_m: f64,
    pub assignment: Vec<usize>,
    pub meta: BuildMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardHistogram {
    /// `bins + 1` bin edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub num_vertices: usize,
    pub num_edges: usize,
    pub num_transitions: usize,
    pub cross_vertex_transitions: usize,
    /// Dataset transitions per transition that changes vertex; `None` when no
    /// transition leaves its vertex.
    pub env_transitions_per_graph_transition: Option<f64>,
    pub reward_histogram: RewardHistogram,
}

impl MemoryGraph {
    pub fn build(
        model: &MetricModel,
        dataset: &Dataset,
        gamma_m: f64,
        mode: RewardMode,
    ) -> Result<Self> {
        let vb = build_vertices(model, dataset, gamma_m)?;
        let meta = BuildMeta {
            model_hash: model.content_hash(),
            dataset_hash: dataset.content_hash(),
            reward_mode: mode,
        };
        Self::from_vertices(vb, dataset, gamma_m, meta)
    }

    pub fn from_vertices(
        vb: VertexBuild,
        dataset: &Dataset,
        gamma_m: f64,
        meta: BuildMeta,
    ) -> Result<Self> {
        let edge_set = build_edges(dataset, &vb.assignment)?;
        let rewards = compute_rewards(dataset, &vb.assignment, &edge_set, meta.reward_mode)?;
        let (edges, rewards) = rewards
            .into_iter()
            .map(|((from, to), r)| (Edge { from, to }, r))
            .unzip();
        Ok(MemoryGraph {
            vertices: vb.vertices,
            edges,
            rewards,
            gamma_m,
            assignment: vb.assignment,
            meta,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn vertex_features(&self) -> Array2<f64> {
        let d = self.vertices.first().map_or(0, |v| v.feature.len());
        Array2::from_shape_fn((self.vertices.len(), d), |(i, j)| self.vertices[i].feature[j])
    }

    pub fn edge_set(&self) -> BTreeSet<(usize, usize)> {
        self.edges.iter().map(|e| (e.from, e.to)).collect()
    }

    pub fn reward_of(&self, from: usize, to: usize) -> Option<f64> {
        self.edges
            .binary_search_by(|e| (e.from, e.to).cmp(&(from, to)))
            .ok()
            .map(|i| self.rewards[i])
    }

    /// Same vertices, edges and assignment with rewards recomputed from `dataset`.
    pub fn with_rewards(&self, dataset: &Dataset, mode: RewardMode) -> Result<Self> {
        let edge_set = self.edge_set();
        let map = compute_rewards(dataset, &self.assignment, &edge_set, mode)?;
        let mut out = self.clone();
        out.rewards = self.edges.iter().map(|e| map[&(e.from, e.to)]).collect();
        out.meta.reward_mode = mode;
        out.meta.dataset_hash = dataset.content_hash();
        Ok(out)
    }

    /// Hash of vertices, edges and assignment; rewards and metadata excluded.
    pub fn structure_hash(&self) -> String {
        let v = serde_json::json!({
            "vertices": self.vertices,
            "edges": self.edges,
            "assignment": self.assignment,
            "gamma_m": self.gamma_m,
        });
        sha256_hex(v.to_string().as_bytes())
    }

    pub fn content_hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("graph serializes"))
    }

    pub fn stats(&self, dataset: &Dataset, bins: usize) -> Result<GraphStats> {
        check_assignment(dataset, &self.assignment)?;
        let cross = dataset
            .transition_state_indices()
            .filter(|&(s, s2, _)| self.assignment[s] != self.assignment[s2])
            .count();
        let n = dataset.num_transitions();
        Ok(GraphStats {
            num_vertices: self.vertices.len(),
            num_edges: self.edges.len(),
            num_transitions: n,
            cross_vertex_transitions: cross,
            env_transitions_per_graph_transition: (cross > 0).then(|| n as f64 / cross as f64),
            reward_histogram: histogram(&self.rewards, bins.max(1)),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let g: MemoryGraph = serde_json::from_slice(&std::fs::read(path)?)?;
        g.validate()?;
        Ok(g)
    }

    /// Structural sanity checks for graphs read from disk.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(VmgError::Schema(format!("graph: {m}")));
        if self.edges.len() != self.rewards.len() {
            return bad("edges and rewards differ in length".into());
        }
        for (i, v) in self.vertices.iter().enumerate() {
            if v.id != i {
                return bad(format!("vertex at position {i} has id {}", v.id));
            }
        }
        let n = self.vertices.len();
        for w in self.edges.windows(2) {
            if (w[0].from, w[0].to) >= (w[1].from, w[1].to) {
                return bad("edges are not strictly sorted".into());
            }
        }
        for e in &self.edges {
            if e.from >= n || e.to >= n || e.from == e.to {
                return bad(format!("invalid edge {}->{}", e.from, e.to));
            }
        }
        if self.assignment.iter().any(|&a| a >= n) {
            return bad("assignment refers to a missing vertex".into());
        }
        Ok(())
    }
}

fn histogram(values: &[f64], bins: usize) -> RewardHistogram {
    if values.is_empty() {
        return RewardHistogram {
            edges: Vec::new(),
            counts: Vec::new(),
        };
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0; bins];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    RewardHistogram { edges, counts }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DatasetMeta, Episode};
    use ndarray::array;

    fn identity_build(states: Array2<f64>, gamma_m: f64) -> VertexBuild {
        build_vertices_from_features(&states, &states, gamma_m).unwrap()
    }

    #[test]
    fn single_transition_far_apart() {
        let vb = identity_build(array![[0.0], [2.0]], 1.0);
        assert_eq!(vb.vertices.len(), 2);
        assert_eq!(vb.assignment, vec![0, 1]);
    }

    #[test]
    fn single_transition_merged() {
        let vb = identity_build(array![[0.0], [1.0]], 1.0);
        assert_eq!(vb.vertices.len(), 1);
        assert_eq!(vb.assignment, vec![0, 0]);
        assert_eq!(vb.vertices[0].representative_state, vec![0.0]);
    }

    #[test]
    fn assignment_uses_final_vertex_set() {
        // 0.9 joins vertex 0 at insertion time, but vertex 1 at 1.2 ends up nearer.
        let vb = identity_build(array![[0.0], [0.9], [2.1], [1.2]], 1.0);
        let xs: Vec<f64> = vb.vertices.iter().map(|v| v.feature[0]).collect();
        assert_eq!(xs, vec![0.0, 2.1]);
        assert_eq!(vb.assignment, vec![0, 0, 1, 1]);
    }

    #[test]
    fn nonpositive_gamma_rejected() {
        let s = array![[0.0]];
        assert!(build_vertices_from_features(&s, &s, 0.0).is_err());
        assert!(build_vertices_from_features(&s, &s, -1.0).is_err());
    }

    #[test]
    fn classify_ties_and_exact() {
        let vs: Vec<Vertex> = [0.0, 1.0, 5.0, 2.0, 7.0, 9.0, 11.0, 4.0]
            .iter()
            .enumerate()
            .map(|(id, &x)| Vertex {
                id,
                representative_state: vec![x],
                feature: vec![x],
            })
            .collect();
        assert_eq!(classify(&[5.0], &vs).unwrap(), 2);
        // 3.0 is equidistant to 2.0 (id 3) and 4.0 (id 7).
        assert_eq!(classify(&[3.0], &vs).unwrap(), 3);
        assert!(classify(&[3.0], &[]).is_err());
    }

    fn dataset(eps: Vec<(Vec<f64>, Vec<f64>)>) -> Dataset {
        let episodes = eps
            .into_iter()
            .map(|(xs, rs)| {
                let t = rs.len();
                Episode::new(
                    Array2::from_shape_vec((t + 1, 1), xs).unwrap(),
                    Array2::zeros((t, 1)),
                    rs,
                    false,
                )
                .unwrap()
            })
            .collect();
        Dataset::new(episodes, DatasetMeta::default()).unwrap()
    }

    #[test]
    fn chain_edges() {
        let ds = dataset(vec![(vec![0.0, 1.0, 2.0], vec![0.0, 0.0])]);
        assert_eq!(
            build_edges(&ds, &[0, 1, 2]).unwrap(),
            BTreeSet::from([(0, 1), (1, 2)])
        );
        assert!(build_edges(&ds, &[0, 0, 0]).unwrap().is_empty());
        assert!(build_edges(&ds, &[0, 0]).is_err());
    }

    /// Vertex 0 internal {0.2}; 0->1 {1.0, 0.6}; vertex 1 internal {0.4}.
    fn worked_example() -> (Dataset, Vec<usize>) {
        let ds = dataset(vec![
            (vec![0.0, 0.1, 1.0], vec![0.2, 1.0]),
            (vec![0.05, 1.1, 1.2], vec![0.6, 0.4]),
        ]);
        (ds, vec![0, 0, 1, 0, 1, 1])
    }

    #[test]
    fn reward_worked_example() {
        let (ds, asg) = worked_example();
        let edges = build_edges(&ds, &asg).unwrap();
        let r = compute_rewards(&ds, &asg, &edges, RewardMode::AvgWithInternal).unwrap();
        assert!((r[&(0, 1)] - 1.1).abs() < 1e-12);
        let get = |m| compute_rewards(&ds, &asg, &edges, m).unwrap()[&(0, 1)];
        assert!((get(RewardMode::Rm) - 0.8).abs() < 1e-12);
        assert!((get(RewardMode::RmH) - 1.0).abs() < 1e-12);
        assert!((get(RewardMode::RmT) - 0.9).abs() < 1e-12);
        assert!((get(RewardMode::Max) - 1.3).abs() < 1e-12);
        assert!((get(RewardMode::Sum) - 1.9).abs() < 1e-12);
    }

    #[test]
    fn no_internal_transitions_default_equals_rm() {
        let ds = dataset(vec![(vec![0.0, 1.0, 2.0, 3.0], vec![0.3, -1.0, 2.0])]);
        let asg = vec![0, 1, 2, 3];
        let edges = build_edges(&ds, &asg).unwrap();
        assert_eq!(
            compute_rewards(&ds, &asg, &edges, RewardMode::AvgWithInternal).unwrap(),
            compute_rewards(&ds, &asg, &edges, RewardMode::Rm).unwrap()
        );
    }

    #[test]
    fn unwitnessed_edge_is_internal_error() {
        let (ds, asg) = worked_example();
        let edges = BTreeSet::from([(1, 0)]);
        assert!(matches!(
            compute_rewards(&ds, &asg, &edges, RewardMode::Rm),
            Err(VmgError::Internal(_))
        ));
    }

    #[test]
    fn reward_mode_parsing() {
        for m in RewardMode::ALL {
            assert_eq!(m.as_str().parse::<RewardMode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
        assert!("avg".parse::<RewardMode>().is_err());
    }

    fn graph_from(ds: &Dataset, asg: Vec<usize>, n: usize) -> MemoryGraph {
        let vertices = (0..n)
            .map(|id| Vertex {
                id,
                representative_state: vec![id as f64],
                feature: vec![id as f64],
            })
            .collect();
        let meta = BuildMeta {
            model_hash: String::new(),
            dataset_hash: ds.content_hash(),
            reward_mode: RewardMode::AvgWithInternal,
        };
        MemoryGraph::from_vertices(
            VertexBuild {
                vertices,
                assignment: asg,
            },
            ds,
            1.0,
            meta,
        )
        .unwrap()
    }

    #[test]
    fn stats_ratio() {
        let ds = dataset(vec![(vec![0.0, 1.0, 2.0, 3.0], vec![0.0; 3])]);
        let own = graph_from(&ds, vec![0, 1, 2, 3], 4).stats(&ds, 4).unwrap();
        assert_eq!(own.env_transitions_per_graph_transition, Some(1.0));
        let merged = graph_from(&ds, vec![0, 0, 1, 1], 2).stats(&ds, 4).unwrap();
        assert_eq!(merged.env_transitions_per_graph_transition, Some(3.0));
        assert_eq!(merged.reward_histogram.counts.iter().sum::<usize>(), 1);
    }

    #[test]
    fn relabel_keeps_structure_and_round_trips() {
        let (ds, asg) = worked_example();
        let g = graph_from(&ds, asg, 2);
        let zero = ds.relabel_rewards(|_, _, _| 0.0).unwrap();
        let z = g.with_rewards(&zero, RewardMode::AvgWithInternal).unwrap();
        assert_eq!(z.structure_hash(), g.structure_hash());
        assert!(z.rewards.iter().all(|&r| r == 0.0));
        assert_eq!(z.reward_of(0, 1), Some(0.0));
        assert_eq!(z.reward_of(1, 0), None);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.json");
        g.save(&p).unwrap();
        assert_eq!(MemoryGraph::load(&p).unwrap(), g);
    }
}
