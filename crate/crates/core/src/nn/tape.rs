//! Reverse-mode differentiation over row-batched matrices.
//!
//! A [`Tape`] evaluates eagerly and records each operation. Calling
//! [`Tape::backward`] on a `1x1` node walks the record in reverse and returns
//! the gradient of that scalar with respect to every node.

use ndarray::{Array2, Axis};

use super::mlp::{Activation, Dense, Mlp};
use crate::error::{Result, VmgError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    /// `x * w^T + b`, `w` is `(out, in)`, `b` is `(1, out)`.
    Linear { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    ConcatCols(Var, Var),
    /// `(B, d) -> (B, 1)` squared L2 norm of each row.
    RowSqNorm(Var),
    /// `(B, d) -> (B, 1)` L2 norm of each row.
    RowNorm(Var),
    /// `(B, d), (C, d) -> (B, C)` squared distances between rows.
    PairwiseSqDist(Var, Var),
    /// `max(margin - x, 0)`
    HingeBelow(Var, f64),
    /// `max(x - margin, 0)`
    HingeAbove(Var, f64),
    Mean(Var),
    /// Mean of the off-diagonal entries of a square matrix.
    MeanOffDiagonal(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Layer parameters of an [`Mlp`] placed on a tape.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    layers: Vec<(Var, Var, Activation)>,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let mut h = x;
        for &(w, b, act) in &self.layers {
            h = tape.linear(h, w, Some(b));
            if act == Activation::Relu {
                h = tape.relu(h);
            }
        }
        h
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn bind_mlp(&mut self, mlp: &Mlp) -> BoundMlp {
        let layers = mlp
            .layers()
            .iter()
            .map(|l| {
                let w = self.leaf(l.weight.clone());
                let b = self.leaf(l.bias.clone().insert_axis(Axis(0)));
                (w, b, l.activation)
            })
            .collect();
        BoundMlp { layers }
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let mut out = self.value(x).dot(&self.value(w).t());
        if let Some(b) = b {
            out += self.value(b);
        }
        self.push(out, Op::Linear { x, w, b })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let out = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat requires equal row counts");
        self.push(out, Op::ConcatCols(a, b))
    }

    pub fn row_sq_norm(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map_axis(Axis(1), |r| r.dot(&r))
            .insert_axis(Axis(1));
        self.push(out, Op::RowSqNorm(a))
    }

    pub fn row_norm(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map_axis(Axis(1), |r| r.dot(&r).sqrt())
            .insert_axis(Axis(1));
        self.push(out, Op::RowNorm(a))
    }

    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Array2::zeros((va.nrows(), vb.nrows()));
        for (i, ra) in va.rows().into_iter().enumerate() {
            for (j, rb) in vb.rows().into_iter().enumerate() {
                out[[i, j]] = ra.iter().zip(rb.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
            }
        }
        self.push(out, Op::PairwiseSqDist(a, b))
    }

    pub fn hinge_below(&mut self, x: Var, margin: f64) -> Var {
        let out = self.value(x).mapv(|v| (margin - v).max(0.0));
        self.push(out, Op::HingeBelow(x, margin))
    }

    pub fn hinge_above(&mut self, x: Var, margin: f64) -> Var {
        let out = self.value(x).mapv(|v| (v - margin).max(0.0));
        self.push(out, Op::HingeAbove(x, margin))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.sum() / v.len() as f64;
        self.push(Array2::from_elem((1, 1), m), Op::Mean(x))
    }

    pub fn mean_off_diagonal(&mut self, x: Var) -> Var {
        let v = self.value(x);
        assert_eq!(v.nrows(), v.ncols(), "off-diagonal mean needs a square matrix");
        let n = v.nrows();
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    acc += v[[i, j]];
                }
            }
        }
        let count = (n * n.saturating_sub(1)).max(1);
        self.push(Array2::from_elem((1, 1), acc / count as f64), Op::MeanOffDiagonal(x))
    }

    /// Gradients of the scalar `loss` with respect to every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).dim();
        if shape != (1, 1) {
            return Err(VmgError::invalid(format!(
                "backward needs a scalar loss, got shape {shape:?}"
            )));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match node.op {
                Op::Leaf => {}
                Op::Linear { x, w, b } => {
                    accumulate(&mut grads, x, g.dot(self.value(w)));
                    accumulate(&mut grads, w, g.t().dot(self.value(x)));
                    if let Some(b) = b {
                        accumulate(&mut grads, b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                }
                Op::Relu(x) => {
                    let mut gx = g.clone();
                    gx.zip_mut_with(self.value(x), |gv, &xv| {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                    accumulate(&mut grads, x, gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, reduce_to(&g, self.value(a).dim()));
                    accumulate(&mut grads, b, reduce_to(&g, self.value(b).dim()));
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, a, reduce_to(&g, self.value(a).dim()));
                    accumulate(&mut grads, b, -reduce_to(&g, self.value(b).dim()));
                }
                Op::Scale(a, c) => accumulate(&mut grads, a, &g * c),
                Op::ConcatCols(a, b) => {
                    let split = self.value(a).ncols();
                    let (ga, gb) = g.view().split_at(Axis(1), split);
                    accumulate(&mut grads, a, ga.to_owned());
                    accumulate(&mut grads, b, gb.to_owned());
                }
                Op::RowSqNorm(a) => {
                    let va = self.value(a);
                    let ga = va * &g * 2.0;
                    accumulate(&mut grads, a, ga);
                }
                Op::RowNorm(a) => {
                    let va = self.value(a);
                    let mut ga = Array2::zeros(va.dim());
                    for (i, row) in va.rows().into_iter().enumerate() {
                        let n = node.value[[i, 0]];
                        if n > 0.0 {
                            let s = g[[i, 0]] / n;
                            for (k, x) in row.iter().enumerate() {
                                ga[[i, k]] = s * x;
                            }
                        }
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::PairwiseSqDist(a, b) => {
                    let (va, vb) = (self.value(a), self.value(b));
                    let mut ga = Array2::zeros(va.dim());
                    let mut gb = Array2::zeros(vb.dim());
                    let d = va.ncols();
                    for i in 0..va.nrows() {
                        for j in 0..vb.nrows() {
                            let gij = g[[i, j]];
                            if gij == 0.0 {
                                continue;
                            }
                            for k in 0..d {
                                let diff = 2.0 * gij * (va[[i, k]] - vb[[j, k]]);
                                ga[[i, k]] += diff;
                                gb[[j, k]] -= diff;
                            }
                        }
                    }
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::HingeBelow(x, margin) => {
                    let mut gx = g.clone();
                    gx.zip_mut_with(self.value(x), |gv, &xv| {
                        *gv = if margin - xv > 0.0 { -*gv } else { 0.0 };
                    });
                    accumulate(&mut grads, x, gx);
                }
                Op::HingeAbove(x, margin) => {
                    let mut gx = g.clone();
                    gx.zip_mut_with(self.value(x), |gv, &xv| {
                        if xv - margin <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                    accumulate(&mut grads, x, gx);
                }
                Op::Mean(x) => {
                    let dim = self.value(x).dim();
                    let n = (dim.0 * dim.1) as f64;
                    accumulate(&mut grads, x, Array2::from_elem(dim, g[[0, 0]] / n));
                }
                Op::MeanOffDiagonal(x) => {
                    let n = self.value(x).nrows();
                    let count = (n * n.saturating_sub(1)).max(1) as f64;
                    let mut gx = Array2::from_elem((n, n), g[[0, 0]] / count);
                    for i in 0..n {
                        gx[[i, i]] = 0.0;
                    }
                    accumulate(&mut grads, x, gx);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Sums broadcast dimensions so a gradient matches its operand's shape.
fn reduce_to(g: &Array2<f64>, dim: (usize, usize)) -> Array2<f64> {
    let mut out = g.clone();
    if dim.0 == 1 && out.nrows() != 1 {
        out = out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if dim.1 == 1 && out.ncols() != 1 {
        out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    out
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Collects layer gradients into an [`Mlp`]-shaped container; parameters
    /// that did not contribute to the loss get zeros.
    pub fn mlp_grads(&self, bound: &BoundMlp, like: &Mlp) -> Mlp {
        let mut out = like.zeros_like();
        for (layer, &(w, b, _)) in out.layers_mut().iter_mut().zip(&bound.layers) {
            let Dense { weight, bias, .. } = layer;
            if let Some(gw) = self.get(w) {
                weight.assign(gw);
            }
            if let Some(gb) = self.get(b) {
                bias.assign(&gb.row(0));
            }
        }
        out
    }
}
