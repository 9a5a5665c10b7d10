//! Reverse-mode differentiation over vector-valued nodes.
//!
//! A [`Tape`] records every operation of one forward pass together with its
//! output. Trainable arrays live in a [`ParamStore`] and are referenced by
//! [`ParamId`]; the tape borrows the store immutably, so a trained store can
//! be shared by any number of inference tapes.
//!
//! [`Tape::backward`] walks the recorded nodes from the loss back to the
//! first node. Node indices are assigned in creation order, which is a
//! topological order, so the reverse walk is a reverse topological order.
//! Adjoints are summed where a node feeds several consumers.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::math;
use crate::point_process;
use crate::tensor::Array2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    arrays: Vec<Array2>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, array: Array2) -> Result<ParamId> {
        if self.names.iter().any(|n| n == name) {
            return Err(invalid(format!("duplicate parameter name {name:?}")));
        }
        self.names.push(name.to_string());
        self.arrays.push(array);
        Ok(ParamId(self.arrays.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Array2 {
        &self.arrays[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2 {
        &mut self.arrays[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.arrays.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2)> {
        self.names
            .iter()
            .zip(&self.arrays)
            .enumerate()
            .map(|(i, (n, a))| (ParamId(i), n.as_str(), a))
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            arrays: self
                .arrays
                .iter()
                .map(|a| Array2::zeros(a.rows(), a.cols()))
                .collect(),
        }
    }
}

/// Gradient arrays, parallel to a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    arrays: Vec<Array2>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Array2 {
        &self.arrays[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2 {
        &mut self.arrays[id.0]
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn clear(&mut self) {
        self.arrays.iter_mut().for_each(|a| a.fill(0.0));
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Lookup { table: ParamId, row: usize },
    MatVec { w: ParamId, x: Var },
    Add(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    OneMinus(Var),
    Concat(Vec<Var>),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Dot(Var, Var),
    Sum(Vec<Var>),
    SoftmaxXent { scores: Var, probs: Vec<f64>, target: usize },
    TimeNll { a: Var, w: Var, d_a: f64, d_w: f64 },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Vec<f64>,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, expected: usize, got: usize) -> Error {
    Error::Shape {
        op,
        expected: format!("length {expected}"),
        got: format!("{got}"),
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a scalar node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives no gradient. Also used to cut gradient flow.
    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(Op::Constant, value)
    }

    /// Whole parameter array as a flat vector.
    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.params.get(id).data().to_vec();
        self.push(Op::Param(id), value)
    }

    /// Row `row` of an embedding table. The backward pass scatter-adds into
    /// that row only.
    pub fn lookup(&mut self, table: ParamId, row: usize) -> Result<Var> {
        let value = self.params.get(table).row(row)?.to_vec();
        Ok(self.push(Op::Lookup { table, row }, value))
    }

    pub fn matvec(&mut self, w: ParamId, x: Var) -> Result<Var> {
        let value = self.params.get(w).matvec(self.value(x))?;
        Ok(self.push(Op::MatVec { w, x }, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.len() {
            return Err(shape_err("add", va.len(), vb.len()));
        }
        let value = va.iter().zip(vb).map(|(x, y)| x + y).collect();
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.len() {
            return Err(shape_err("mul", va.len(), vb.len()));
        }
        let value = va.iter().zip(vb).map(|(x, y)| x * y).collect();
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| math::sigmoid(x)).collect();
        self.push(Op::Sigmoid(a), value)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| math::tanh(x)).collect();
        self.push(Op::Tanh(a), value)
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| 1.0 - x).collect();
        self.push(Op::OneMinus(a), value)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let value = parts
            .iter()
            .flat_map(|&p| self.value(p).iter().copied())
            .collect();
        self.push(Op::Concat(parts.to_vec()), value)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).iter().map(|&x| x * k).collect();
        self.push(Op::Scale(a, k), value)
    }

    /// Elementwise product with a fixed vector (dropout masks).
    pub fn mul_const(&mut self, a: Var, k: Vec<f64>) -> Result<Var> {
        let va = self.value(a);
        if va.len() != k.len() {
            return Err(shape_err("mul_const", va.len(), k.len()));
        }
        let value = va.iter().zip(&k).map(|(x, y)| x * y).collect();
        Ok(self.push(Op::MulConst(a, k), value))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.len() {
            return Err(shape_err("dot", va.len(), vb.len()));
        }
        let value = vec![math::dot(va, vb)];
        Ok(self.push(Op::Dot(a, b), value))
    }

    /// Sum of scalar nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let value = vec![parts.iter().map(|&p| self.value(p)[0]).sum()];
        self.push(Op::Sum(parts.to_vec()), value)
    }

    /// Softmax cross-entropy of `scores` against `target`.
    pub fn softmax_xent(&mut self, scores: Var, target: usize) -> Result<Var> {
        let (loss, probs) = softmax_xent_parts(self.value(scores), target)?;
        Ok(self.push(
            Op::SoftmaxXent {
                scores,
                probs,
                target,
            },
            vec![loss],
        ))
    }

    /// Negative log-density of the point-process time model.
    ///
    /// `history` is the scalar node `v·h + b`, `w` the scalar node of the
    /// elapsed-time weight and `gap` the (already exponentiated) target.
    pub fn time_nll(&mut self, history: Var, w: Var, gap: f64) -> Result<Var> {
        let (a, wv) = (self.scalar(history), self.scalar(w));
        let parts = point_process::log_density_parts(a, wv, gap)?;
        Ok(self.push(
            Op::TimeNll {
                a: history,
                w,
                d_a: -parts.d_history,
                d_w: -parts.d_w,
            },
            vec![-parts.value],
        ))
    }

    /// Accumulates `d loss / d param` into `grads`. `loss` must be scalar.
    pub fn backward(&self, loss: Var, grads: &mut Gradients) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(invalid("backward requires a scalar loss node"));
        }
        if grads.len() != self.params.len() {
            return Err(shape_err("backward", self.params.len(), grads.len()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let dst = grads.get_mut(*id).data_mut();
                    dst.iter_mut().zip(&g).for_each(|(d, x)| *d += x);
                }
                Op::Lookup { table, row } => {
                    let dst = grads.get_mut(*table).row_mut(*row);
                    dst.iter_mut().zip(&g).for_each(|(d, x)| *d += x);
                }
                Op::MatVec { w, x } => {
                    let wm = self.params.get(*w);
                    let xv = &self.nodes[x.0].value;
                    let cols = wm.cols();
                    {
                        let gw = grads.get_mut(*w).data_mut();
                        for (r, &gr) in g.iter().enumerate() {
                            if gr != 0.0 {
                                let row = &mut gw[r * cols..(r + 1) * cols];
                                row.iter_mut().zip(xv).for_each(|(d, xi)| *d += gr * xi);
                            }
                        }
                    }
                    let mut gx = vec![0.0; cols];
                    for (r, &gr) in g.iter().enumerate() {
                        if gr != 0.0 {
                            let row = &wm.data()[r * cols..(r + 1) * cols];
                            gx.iter_mut().zip(row).for_each(|(d, wi)| *d += gr * wi);
                        }
                    }
                    accumulate(&mut adj, *x, gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Mul(a, b) => {
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    let ga = g.iter().zip(vb).map(|(x, y)| x * y).collect();
                    let gb = g.iter().zip(va).map(|(x, y)| x * y).collect();
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Sigmoid(a) => {
                    let ga = g
                        .iter()
                        .zip(&node.value)
                        .map(|(x, s)| x * s * (1.0 - s))
                        .collect();
                    accumulate(&mut adj, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = g
                        .iter()
                        .zip(&node.value)
                        .map(|(x, t)| x * (1.0 - t * t))
                        .collect();
                    accumulate(&mut adj, *a, ga);
                }
                Op::OneMinus(a) => {
                    accumulate(&mut adj, *a, g.iter().map(|x| -x).collect());
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.len();
                        accumulate(&mut adj, *p, g[offset..offset + n].to_vec());
                        offset += n;
                    }
                }
                Op::Scale(a, k) => {
                    accumulate(&mut adj, *a, g.iter().map(|x| x * k).collect());
                }
                Op::MulConst(a, k) => {
                    accumulate(&mut adj, *a, g.iter().zip(k).map(|(x, y)| x * y).collect());
                }
                Op::Dot(a, b) => {
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    accumulate(&mut adj, *a, vb.iter().map(|y| g[0] * y).collect());
                    accumulate(&mut adj, *b, va.iter().map(|y| g[0] * y).collect());
                }
                Op::Sum(parts) => {
                    for p in parts {
                        accumulate(&mut adj, *p, vec![g[0]]);
                    }
                }
                Op::SoftmaxXent {
                    scores,
                    probs,
                    target,
                } => {
                    let mut gs: Vec<f64> = probs.iter().map(|p| g[0] * p).collect();
                    gs[*target] -= g[0];
                    accumulate(&mut adj, *scores, gs);
                }
                Op::TimeNll { a, w, d_a, d_w } => {
                    accumulate(&mut adj, *a, vec![g[0] * d_a]);
                    accumulate(&mut adj, *w, vec![g[0] * d_w]);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut adj[v.0] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
        slot @ None => *slot = Some(g),
    }
}

/// Returns `(−log softmax(scores)[target], softmax(scores))`.
fn softmax_xent_parts(scores: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if scores.len() < 2 {
        return Err(invalid("softmax cross-entropy needs at least two scores"));
    }
    if target >= scores.len() {
        return Err(Error::IndexOutOfRange {
            what: "target item",
            index: target,
            len: scores.len(),
        });
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("item scores".into()));
    }
    let mut probs: Vec<f64> = scores.iter().map(|s| math::exp(s - max)).collect();
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= z);
    let loss = math::ln(z) - (scores[target] - max);
    Ok((loss, probs))
}

/// Softmax cross-entropy with an explicit mask. Returns the loss and its
/// gradient with respect to `scores`; a masked entry yields `(0, zeros)`.
pub fn masked_softmax_xent(scores: &[f64], target: usize, masked: bool) -> Result<(f64, Vec<f64>)> {
    if masked {
        return Ok((0.0, vec![0.0; scores.len()]));
    }
    let (loss, mut grad) = softmax_xent_parts(scores, target)?;
    grad[target] -= 1.0;
    Ok((loss, grad))
}

/// Mean over the unmasked entries of a batch; zero when all are masked.
pub fn mean_unmasked(losses: &[(f64, bool)]) -> f64 {
    let (sum, n) = losses
        .iter()
        .filter(|(_, masked)| !masked)
        .fold((0.0, 0usize), |(s, n), (l, _)| (s + l, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
