//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! A [`Graph`] records operations eagerly: building a node computes its value
//! immediately, so the tape is also the forward pass. [`Graph::backward`]
//! walks the tape once in reverse, accumulating adjoints only for nodes that
//! are actually reached. Parameters enter as named leaves; their gradients
//! come back keyed by name, ready for the optimizer.
//!
//! The op set is exactly what the two toy networks need - dense linear
//! algebra, ELU/exp/clamp pointwise maps, row log-softmax, embedding gathers,
//! and a few shape utilities for batching per-position heads.

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Additive logit mask for classes excluded from a softmax.
pub const EXCLUDED_LOGIT: f64 = -1e30;

pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    /// Constant or parameter input; `param` carries the store key.
    Leaf { param: Option<String> },
    /// `[m x k] . [k x n]`.
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    /// Elementwise product.
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    AddConst { a: NodeId },
    /// `a[m x w] + row[1 x w]` broadcast down the rows.
    AddRowBroadcast { a: NodeId, row: NodeId },
    /// `a[m x w] + pat[k x w]` with pattern rows tiled cyclically (`k | m`).
    AddCycle { a: NodeId, pat: NodeId },
    /// Each row repeated `times` consecutively: `[m x w] -> [m*times x w]`.
    RepeatRows { a: NodeId, times: usize },
    /// Sum of each consecutive group of `group` rows: `[m x w] -> [m/group x w]`.
    SumGroups { a: NodeId, group: usize },
    Elu { a: NodeId },
    Exp { a: NodeId },
    Clamp { a: NodeId, lo: f64, hi: f64 },
    /// Row-wise log-softmax (the excluded class, if any, is already folded
    /// into the stored value at construction time).
    LogSoftmaxRows { a: NodeId },
    /// Gather table rows by index: `[n x w]` for `indices.len() == n`.
    EmbedRows { table: NodeId, indices: Vec<usize> },
    SliceCols { a: NodeId, start: usize, len: usize },
    SumAll { a: NodeId },
    /// `sum_i w_i * a[r_i, c_i] -> [1 x 1]`.
    WeightedGather { a: NodeId, picks: Vec<(usize, usize, f64)> },
    /// `sum_r w_r * sum_c a[r, c] -> [1 x 1]`.
    WeightedRowSum { a: NodeId, weights: Vec<f64> },
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node adjoints produced by [`Graph::backward`].
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(id).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    // ---- inputs ----

    /// Constant input (no gradient consumer).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { param: None }, value)
    }

    /// Named parameter input, cloned out of the store.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> NodeId {
        let value = store.get(name).clone();
        self.push(Op::Leaf { param: Some(name.to_string()) }, value)
    }

    // ---- arithmetic ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a].value.matmul(&self.nodes[b].value);
        self.push(Op::Matmul { a, b }, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.shape(), self.nodes[b].value.shape());
        let mut value = self.nodes[a].value.clone();
        value.add_assign(&self.nodes[b].value);
        self.push(Op::Add { a, b }, value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.shape(), self.nodes[b].value.shape());
        let bv = &self.nodes[b].value;
        let value = Tensor::from_vec(
            bv.rows(),
            bv.cols(),
            self.nodes[a]
                .value
                .values()
                .iter()
                .zip(bv.values())
                .map(|(x, y)| x - y)
                .collect(),
        );
        self.push(Op::Sub { a, b }, value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.shape(), self.nodes[b].value.shape());
        let bv = &self.nodes[b].value;
        let value = Tensor::from_vec(
            bv.rows(),
            bv.cols(),
            self.nodes[a]
                .value
                .values()
                .iter()
                .zip(bv.values())
                .map(|(x, y)| x * y)
                .collect(),
        );
        self.push(Op::Mul { a, b }, value)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.nodes[a].value.map(|x| x * c);
        self.push(Op::Scale { a, c }, value)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.nodes[a].value.map(|x| x + c);
        self.push(Op::AddConst { a }, value)
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let rv = &self.nodes[row].value;
        let av = &self.nodes[a].value;
        assert_eq!(rv.rows(), 1, "broadcast row must be 1 x w");
        assert_eq!(rv.cols(), av.cols(), "broadcast width mismatch");
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, y) in value.row_mut(r).iter_mut().zip(rv.row(0)) {
                *x += y;
            }
        }
        self.push(Op::AddRowBroadcast { a, row }, value)
    }

    pub fn add_cycle(&mut self, a: NodeId, pat: NodeId) -> NodeId {
        let pv = &self.nodes[pat].value;
        let av = &self.nodes[a].value;
        assert_eq!(pv.cols(), av.cols(), "cycle width mismatch");
        assert_eq!(av.rows() % pv.rows(), 0, "pattern must divide row count");
        let k = pv.rows();
        let mut value = av.clone();
        for r in 0..value.rows() {
            let p = r % k;
            let prow: Vec<f64> = pv.row(p).to_vec();
            for (x, y) in value.row_mut(r).iter_mut().zip(prow) {
                *x += y;
            }
        }
        self.push(Op::AddCycle { a, pat }, value)
    }

    pub fn repeat_rows(&mut self, a: NodeId, times: usize) -> NodeId {
        let av = &self.nodes[a].value;
        let mut value = Tensor::zeros(av.rows() * times, av.cols());
        for r in 0..av.rows() {
            for j in 0..times {
                value.row_mut(r * times + j).copy_from_slice(av.row(r));
            }
        }
        self.push(Op::RepeatRows { a, times }, value)
    }

    pub fn sum_groups(&mut self, a: NodeId, group: usize) -> NodeId {
        let av = &self.nodes[a].value;
        assert_eq!(av.rows() % group, 0, "group must divide row count");
        let mut value = Tensor::zeros(av.rows() / group, av.cols());
        for r in 0..av.rows() {
            let src: Vec<f64> = av.row(r).to_vec();
            for (x, y) in value.row_mut(r / group).iter_mut().zip(src) {
                *x += y;
            }
        }
        self.push(Op::SumGroups { a, group }, value)
    }

    // ---- pointwise ----

    pub fn elu(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.map(|x| if x > 0.0 { x } else { x.exp() - 1.0 });
        self.push(Op::Elu { a }, value)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.map(f64::exp);
        self.push(Op::Exp { a }, value)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let value = self.nodes[a].value.map(|x| x.clamp(lo, hi));
        self.push(Op::Clamp { a, lo, hi }, value)
    }

    // ---- softmax / gathers / reductions ----

    pub fn log_softmax_rows(&mut self, a: NodeId, excluded: Option<usize>) -> NodeId {
        let av = &self.nodes[a].value;
        let mut value = av.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            if let Some(e) = excluded {
                row[e] += EXCLUDED_LOGIT;
            }
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push(Op::LogSoftmaxRows { a }, value)
    }

    pub fn embed_rows(&mut self, table: NodeId, indices: &[usize]) -> NodeId {
        let tv = &self.nodes[table].value;
        let mut value = Tensor::zeros(indices.len(), tv.cols());
        for (r, &i) in indices.iter().enumerate() {
            value.row_mut(r).copy_from_slice(tv.row(i));
        }
        self.push(Op::EmbedRows { table, indices: indices.to_vec() }, value)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let av = &self.nodes[a].value;
        assert!(start + len <= av.cols(), "column slice out of range");
        let value = Tensor::from_fn(av.rows(), len, |r, c| av.get(r, start + c));
        self.push(Op::SliceCols { a, start, len }, value)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a].value.values().iter().sum();
        self.push(Op::SumAll { a }, Tensor::scalar(s))
    }

    pub fn weighted_gather(&mut self, a: NodeId, picks: &[(usize, usize, f64)]) -> NodeId {
        let av = &self.nodes[a].value;
        let s: f64 = picks.iter().map(|&(r, c, w)| w * av.get(r, c)).sum();
        self.push(Op::WeightedGather { a, picks: picks.to_vec() }, Tensor::scalar(s))
    }

    pub fn weighted_row_sum(&mut self, a: NodeId, weights: &[f64]) -> NodeId {
        let av = &self.nodes[a].value;
        assert_eq!(weights.len(), av.rows(), "one weight per row");
        let s: f64 = weights
            .iter()
            .enumerate()
            .map(|(r, w)| w * av.row(r).iter().sum::<f64>())
            .sum();
        self.push(Op::WeightedRowSum { a, weights: weights.to_vec() }, Tensor::scalar(s))
    }

    // ---- composites ----

    /// `x @ w + b` with the bias row broadcast over the batch.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xw = self.matmul(x, w);
        self.add_row_broadcast(xw, b)
    }

    // ---- reverse pass ----

    /// Accumulate adjoints of every node reachable from `root`, seeding the
    /// root with ones. Call on a scalar loss node.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let rv = &self.nodes[root].value;
        grads[root] = Some(Tensor::full(rv.rows(), rv.cols(), 1.0));

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf { .. } => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Matmul { a, b } => {
                    let da = g.matmul_nt(&self.nodes[*b].value);
                    let db = self.nodes[*a].value.matmul_tn(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.map(|x| -x));
                }
                Op::Mul { a, b } => {
                    let da = elementwise(&g, &self.nodes[*b].value, |x, y| x * y);
                    let db = elementwise(&g, &self.nodes[*a].value, |x, y| x * y);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale { a, c } => {
                    accumulate(&mut grads, *a, g.map(|x| x * c));
                }
                Op::AddConst { a } => {
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::AddRowBroadcast { a, row } => {
                    let mut drow = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (x, y) in drow.row_mut(0).iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *row, drow);
                }
                Op::AddCycle { a, pat } => {
                    let k = self.nodes[*pat].value.rows();
                    let mut dpat = Tensor::zeros(k, g.cols());
                    for r in 0..g.rows() {
                        for (x, y) in dpat.row_mut(r % k).iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *pat, dpat);
                }
                Op::RepeatRows { a, times } => {
                    let m = self.nodes[*a].value.rows();
                    let mut da = Tensor::zeros(m, g.cols());
                    for r in 0..g.rows() {
                        for (x, y) in da.row_mut(r / times).iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::SumGroups { a, group } => {
                    let m = self.nodes[*a].value.rows();
                    let mut da = Tensor::zeros(m, g.cols());
                    for r in 0..m {
                        da.row_mut(r).copy_from_slice(g.row(r / group));
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Elu { a } => {
                    // On the negative side the stored output is exp(x) - 1,
                    // so the local slope exp(x) is `out + 1` — no fresh exp.
                    // The output is positive exactly when the input is, and
                    // at x = 0 both branches give slope 1.
                    let out = &self.nodes[id].value;
                    let da =
                        elementwise(&g, out, |gy, y| gy * if y > 0.0 { 1.0 } else { y + 1.0 });
                    accumulate(&mut grads, *a, da);
                }
                Op::Exp { a } => {
                    let da = elementwise(&g, &self.nodes[id].value, |gy, y| gy * y);
                    accumulate(&mut grads, *a, da);
                }
                Op::Clamp { a, lo, hi } => {
                    let av = &self.nodes[*a].value;
                    let da = Tensor::from_vec(
                        g.rows(),
                        g.cols(),
                        g.values()
                            .iter()
                            .zip(av.values())
                            .map(|(gy, &x)| if x >= *lo && x <= *hi { *gy } else { 0.0 })
                            .collect(),
                    );
                    accumulate(&mut grads, *a, da);
                }
                Op::LogSoftmaxRows { a } => {
                    // d logits = g - softmax * rowsum(g); the excluded class has
                    // softmax 0, so the identity part passes through unchanged.
                    let out = &self.nodes[id].value;
                    let mut da = Tensor::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let gsum: f64 = g.row(r).iter().sum();
                        let (grow, orow) = (g.row(r), out.row(r));
                        for c in 0..g.cols() {
                            da.set(r, c, grow[c] - orow[c].exp() * gsum);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::EmbedRows { table, indices } => {
                    let tv = &self.nodes[*table].value;
                    let mut dt = Tensor::zeros(tv.rows(), tv.cols());
                    for (r, &i) in indices.iter().enumerate() {
                        for (x, y) in dt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::SliceCols { a, start, len } => {
                    debug_assert_eq!(g.cols(), *len, "slice adjoint width mismatch");
                    let av = &self.nodes[*a].value;
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            da.set(r, start + c, g.get(r, c));
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::SumAll { a } => {
                    let av = &self.nodes[*a].value;
                    let da = Tensor::full(av.rows(), av.cols(), g.item());
                    accumulate(&mut grads, *a, da);
                }
                Op::WeightedGather { a, picks } => {
                    let av = &self.nodes[*a].value;
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    let s = g.item();
                    for &(r, c, w) in picks {
                        da.set(r, c, da.get(r, c) + w * s);
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::WeightedRowSum { a, weights } => {
                    let av = &self.nodes[*a].value;
                    let s = g.item();
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        let w = weights[r] * s;
                        for x in da.row_mut(r) {
                            *x = w;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
            }
            grads[id] = Some(g);
        }
        Gradients { by_node: grads }
    }

    /// Collect parameter adjoints by store key, accumulating if a parameter
    /// was pulled into the graph more than once.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(name) } = &node.op {
                if let Some(g) = grads.get(id) {
                    out.entry(name.clone())
                        .and_modify(|acc| acc.add_assign(g))
                        .or_insert_with(|| g.clone());
                }
            }
        }
        out
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::from_vec(
        a.rows(),
        a.cols(),
        a.values().iter().zip(b.values()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
    match &mut grads[id] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Rng, STREAM_INIT};

    fn random(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| rng.uniform(-1.0, 1.0))
    }

    #[test]
    fn linear_scalar_case() {
        // y = x*w + b with all shapes 1x1.
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let w = g.leaf(Tensor::scalar(2.0));
        let b = g.leaf(Tensor::scalar(0.5));
        let y = g.linear(x, w, b);
        assert_eq!(g.value(y).item(), 6.5);
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(2, 3, vec![1.0, -2.0, 3.0, 0.0, 5.0, -6.0]));
        let s = g.sum_all(x);
        let grads = g.backward(s);
        let gx = grads.get(x).unwrap();
        assert!(gx.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn gradient_of_zero_scaled_branch_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(1, 4, vec![0.3, -0.7, 1.2, 2.0]));
        let e = g.elu(x);
        let z = g.scale(e, 0.0);
        let s = g.sum_all(z);
        let grads = g.backward(s);
        let gx = grads.get(x).unwrap();
        assert!(gx.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn elu_values_and_continuity() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(1, 3, vec![-1.0, 0.0, 2.0]));
        let y = g.elu(x);
        let v = g.value(y).values().to_vec();
        assert!((v[0] - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
        assert_eq!(v[1], 0.0);
        assert_eq!(v[2], 2.0);
        // Derivative approaches 1 from both sides of zero.
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(1, 2, vec![-1e-9, 1e-9]));
        let y = g.elu(x);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        let gx = grads.get(x).unwrap();
        assert!((gx.get(0, 0) - 1.0).abs() < 1e-8);
        assert!((gx.get(0, 1) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn log_softmax_uniform_row() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(1, 3, vec![0.0, 0.0, 0.0]));
        let y = g.log_softmax_rows(x, None);
        for &v in g.value(y).values() {
            assert!((v - (1.0f64 / 3.0).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn log_softmax_excluded_class_gets_zero_mass() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(1, 3, vec![0.0, 0.0, 0.0]));
        let y = g.log_softmax_rows(x, Some(2));
        let v = g.value(y).values().to_vec();
        assert!((v[0] - 0.5f64.ln()).abs() < 1e-15);
        assert!((v[1] - 0.5f64.ln()).abs() < 1e-15);
        assert_eq!(v[2].exp(), 0.0, "excluded class must carry zero probability");
    }

    #[test]
    fn log_softmax_rows_exponentiate_to_unit_mass() {
        let mut rng = Rng::new(4, STREAM_INIT);
        let mut g = Graph::new();
        let logits = g.leaf(random(5, 7, &mut rng));
        let y = g.log_softmax_rows(logits, Some(3));
        for r in 0..5 {
            let mass: f64 = g.value(y).row(r).iter().map(|&v| v.exp()).sum();
            assert!((mass - 1.0).abs() < 1e-12, "row {r} mass {mass}");
        }
    }

    /// Central-difference probe of a scalar-valued graph builder.
    fn finite_diff(
        build: &dyn Fn(&Tensor) -> f64,
        x: &Tensor,
        r: usize,
        c: usize,
        eps: f64,
    ) -> f64 {
        let mut plus = x.clone();
        plus.set(r, c, x.get(r, c) + eps);
        let mut minus = x.clone();
        minus.set(r, c, x.get(r, c) - eps);
        (build(&plus) - build(&minus)) / (2.0 * eps)
    }

    #[test]
    fn two_layer_elu_mlp_matches_finite_differences() {
        let mut rng = Rng::new(7, STREAM_INIT);
        let x0 = random(2, 4, &mut rng);
        let w1 = random(4, 5, &mut rng);
        let b1 = random(1, 5, &mut rng);
        let w2 = random(5, 3, &mut rng);
        let b2 = random(1, 3, &mut rng);

        let loss = |xv: &Tensor, w1v: &Tensor| -> (Graph, NodeId, NodeId, NodeId) {
            let mut g = Graph::new();
            let x = g.leaf(xv.clone());
            let w1n = g.leaf(w1v.clone());
            let b1n = g.leaf(b1.clone());
            let w2n = g.leaf(w2.clone());
            let b2n = g.leaf(b2.clone());
            let h = g.linear(x, w1n, b1n);
            let h = g.elu(h);
            let o = g.linear(h, w2n, b2n);
            let o = g.elu(o);
            let s = g.sum_all(o);
            (g, s, x, w1n)
        };

        let (g, s, xn, w1n) = loss(&x0, &w1);
        let grads = g.backward(s);
        let gx = grads.get(xn).unwrap().clone();
        let gw = grads.get(w1n).unwrap().clone();

        let mut rng_pick = Rng::new(8, STREAM_INIT);
        for _ in 0..20 {
            let (r, c) = (
                rng_pick.next_below(2) as usize,
                rng_pick.next_below(4) as usize,
            );
            let fd = finite_diff(&|xv| loss(xv, &w1).0.value(loss(xv, &w1).1).item(), &x0, r, c, 1e-5);
            let an = gx.get(r, c);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel < 1e-6, "x[{r},{c}] fd {fd} vs an {an}");

            let (r, c) = (
                rng_pick.next_below(4) as usize,
                rng_pick.next_below(5) as usize,
            );
            let fd = finite_diff(&|wv| loss(&x0, wv).0.value(loss(&x0, wv).1).item(), &w1, r, c, 1e-5);
            let an = gw.get(r, c);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel < 1e-6, "w1[{r},{c}] fd {fd} vs an {an}");
        }
    }

    #[test]
    fn matmul_chain_gradient_matches_finite_differences() {
        let mut rng = Rng::new(9, STREAM_INIT);
        let a0 = random(3, 4, &mut rng);
        let b0 = random(4, 5, &mut rng);
        let c0 = random(5, 2, &mut rng);

        let run = |av: &Tensor| -> f64 {
            let mut g = Graph::new();
            let a = g.leaf(av.clone());
            let b = g.leaf(b0.clone());
            let c = g.leaf(c0.clone());
            let ab = g.matmul(a, b);
            let abc = g.matmul(ab, c);
            let s = g.sum_all(abc);
            g.value(s).item()
        };

        let mut g = Graph::new();
        let a = g.leaf(a0.clone());
        let b = g.leaf(b0.clone());
        let c = g.leaf(c0.clone());
        let ab = g.matmul(a, b);
        let abc = g.matmul(ab, c);
        let s = g.sum_all(abc);
        let grads = g.backward(s);
        let ga = grads.get(a).unwrap();

        for r in 0..3 {
            for col in 0..4 {
                let fd = finite_diff(&run, &a0, r, col, 1e-6);
                let an = ga.get(r, col);
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                assert!(rel < 1e-6, "A[{r},{col}] fd {fd} an {an}");
            }
        }
    }

    #[test]
    fn shape_utilities_roundtrip_gradients() {
        // repeat_rows then sum_groups is the identity scaled by `times`, and
        // their adjoints must mirror each other.
        let mut rng = Rng::new(10, STREAM_INIT);
        let x0 = random(3, 4, &mut rng);
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let rep = g.repeat_rows(x, 2);
        let back = g.sum_groups(rep, 2);
        let expect = x0.map(|v| 2.0 * v);
        for (a, b) in g.value(back).values().iter().zip(expect.values()) {
            assert!((a - b).abs() < 1e-15);
        }
        let s = g.sum_all(back);
        let grads = g.backward(s);
        let gx = grads.get(x).unwrap();
        assert!(gx.values().iter().all(|&v| (v - 2.0).abs() < 1e-15));
    }

    #[test]
    fn embed_rows_scatters_gradients_to_visited_rows() {
        let mut g = Graph::new();
        let table = g.leaf(Tensor::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let e = g.embed_rows(table, &[2, 0, 2]);
        assert_eq!(g.value(e).row(0), &[5.0, 6.0]);
        let s = g.sum_all(e);
        let grads = g.backward(s);
        let gt = grads.get(table).unwrap();
        assert_eq!(gt.row(0), &[1.0, 1.0]);
        assert_eq!(gt.row(1), &[0.0, 0.0]);
        assert_eq!(gt.row(2), &[2.0, 2.0], "row visited twice accumulates twice");
    }

    #[test]
    fn weighted_gather_and_row_sum_adjoints() {
        let x0 = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let picked = g.weighted_gather(x, &[(0, 1, 2.0), (1, 2, -1.0)]);
        assert_eq!(g.value(picked).item(), 2.0 * 2.0 - 6.0);
        let grads = g.backward(picked);
        let gx = grads.get(x).unwrap();
        assert_eq!(gx.get(0, 1), 2.0);
        assert_eq!(gx.get(1, 2), -1.0);
        assert_eq!(gx.get(0, 0), 0.0);

        let mut g = Graph::new();
        let x = g.leaf(x0);
        let s = g.weighted_row_sum(x, &[0.5, 2.0]);
        assert_eq!(g.value(s).item(), 0.5 * 6.0 + 2.0 * 15.0);
        let grads = g.backward(s);
        let gx = grads.get(x).unwrap();
        assert_eq!(gx.row(0), &[0.5, 0.5, 0.5]);
        assert_eq!(gx.row(1), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(1, 3, vec![-9.0, 0.5, 9.0]));
        let y = g.clamp(x, -7.0, 7.0);
        assert_eq!(g.value(y).values(), &[-7.0, 0.5, 7.0]);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        let gx = grads.get(x).unwrap();
        assert_eq!(gx.values(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn shared_parameter_grads_accumulate_across_pulls() {
        // Siamese pattern: the same leaf feeds two branches.
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let a = g.scale(x, 2.0);
        let b = g.scale(x, 5.0);
        let s0 = g.add(a, b);
        let s = g.sum_all(s0);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap().item(), 7.0);
    }
}
