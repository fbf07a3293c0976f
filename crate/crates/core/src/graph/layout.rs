//! 2-D projection of vertex features for plotting.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::MemoryGraph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutVertex {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutEdge {
    pub from: usize,
    pub to: usize,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    /// Fraction of feature variance captured by each of the two axes.
    pub explained_variance: [f64; 2],
    pub vertices: Vec<LayoutVertex>,
    pub edges: Vec<LayoutEdge>,
}

/// Projects vertex features onto their top two principal components.
///
/// Component signs are fixed so the largest-magnitude loading is positive,
/// which keeps the output stable across runs.
pub fn export_layout(graph: &MemoryGraph, values: Option<&[f64]>) -> Layout {
    let n = graph.vertices.len();
    let d = graph.vertices.first().map_or(0, |v| v.feature.len());
    let mut coords = vec![[0.0; 2]; n];
    let mut explained = [0.0; 2];
    if n > 0 && d > 0 {
        let x = DMatrix::from_fn(n, d, |i, j| graph.vertices[i].feature[j]);
        let mean = x.row_mean();
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
        for (axis, &k) in order.iter().take(2).enumerate() {
            let mut pc = eig.eigenvectors.column(k).into_owned();
            let lead = pc.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            if lead < 0.0 {
                pc = -pc;
            }
            let proj = &centered * &pc;
            for i in 0..n {
                coords[i][axis] = proj[i];
            }
            if total > 0.0 {
                explained[axis] = eig.eigenvalues[k].max(0.0) / total;
            }
        }
    }
    Layout {
        explained_variance: explained,
        vertices: coords
            .iter()
            .enumerate()
            .map(|(id, c)| LayoutVertex {
                id,
                x: c[0],
                y: c[1],
                value: values.and_then(|v| v.get(id).copied()),
            })
            .collect(),
        edges: graph
            .edges
            .iter()
            .zip(&graph.rewards)
            .map(|(e, &reward)| LayoutEdge {
                from: e.from,
                to: e.to,
                reward,
            })
            .collect(),
    }
}
