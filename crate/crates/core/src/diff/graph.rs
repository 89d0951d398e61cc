//! Tape-style computation record.
//!
//! Every primitive evaluates eagerly and appends a node holding its output and
//! whatever it needs for the backward pass. [`Graph::gradients`] walks the
//! nodes in reverse order and accumulates vector-Jacobian products into the
//! parameter leaves.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

/// Epsilon added to the variance in batch normalization.
pub const BATCHNORM_EPS: f64 = 1e-5;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of one particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    idx: usize,
}

/// Statistics used by batch normalization.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a> {
    /// Per-batch mean and biased variance; gradients flow through both.
    Train,
    /// Fixed running statistics, treated as constants.
    Infer {
        running_mean: &'a [f64],
        running_var: &'a [f64],
    },
}

/// Per-feature batch statistics produced in training mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Const,
    Param(String),
    MatMul(usize, usize),
    Add(usize, usize),
    AddRowBroadcast(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Concat(usize, usize),
    StackRows(Vec<usize>),
    ConcatVectors(Vec<usize>),
    Row(usize, usize),
    Slice(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    MeanRows(usize),
    Sum(usize),
    Euclidean(usize, usize),
    SquaredEuclidean(usize, usize),
    Softmax(usize),
    Log(usize),
    LogClamped(usize, f64),
    Exp(usize),
    Scale(usize, f64),
    Dot(usize, usize),
    LogSumExp(usize),
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients keyed by parameter id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.grads.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    params: HashMap<String, usize>,
    grad_faults: Vec<(String, f64)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> Error {
    Error::Shape {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_faults: Vec::new(),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            graph: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.graph, self.id, "variable belongs to another graph");
        v.idx
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v)].value
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.val(v)
    }

    pub fn owns(&self, v: Var) -> bool {
        v.graph == self.id && v.idx < self.nodes.len()
    }

    /// Records a constant: no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Leaf for parameter `id`; repeated calls return the same node.
    pub fn param(&mut self, params: &ParamSet, id: &str) -> Result<Var> {
        if let Some(&idx) = self.params.get(id) {
            return Ok(Var { graph: self.id, idx });
        }
        let t = params.tensor(id)?.clone();
        let v = self.push(t, Op::Param(id.to_string()));
        self.params.insert(id.to_string(), v.idx);
        Ok(v)
    }

    /// Test hook for negative controls: scales the accumulated gradient of
    /// every parameter whose id starts with `prefix`.
    pub fn inject_gradient_fault(&mut self, prefix: impl Into<String>, factor: f64) {
        self.grad_faults.push((prefix.into(), factor));
    }

    /// `[m,k] x [k,n] -> [m,n]`; a rank-1 left operand `[k]` yields `[n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        let (m, k) = match ta.rank() {
            1 => (1, ta.len()),
            2 => (ta.shape()[0], ta.shape()[1]),
            _ => return Err(shape_err("matmul", &[ta.shape(), tb.shape()])),
        };
        if tb.rank() != 2 || tb.shape()[0] != k {
            return Err(shape_err("matmul", &[ta.shape(), tb.shape()]));
        }
        let n = tb.shape()[1];
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let shape = if ta.rank() == 1 { vec![n] } else { vec![m, n] };
        let t = Tensor::new(shape, out)?;
        let (ia, ib) = (self.idx(a), self.idx(b));
        Ok(self.push(t, Op::MatMul(ia, ib)))
    }

    /// Elementwise sum of equal shapes, or a `[n,d]` matrix plus a `[d]` row.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        let (ia, ib) = (self.idx(a), self.idx(b));
        if ta.shape() == tb.shape() {
            let d = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
            let t = Tensor::new(ta.shape().to_vec(), d)?;
            return Ok(self.push(t, Op::Add(ia, ib)));
        }
        if ta.rank() == 2 && tb.rank() == 1 && ta.cols() == tb.len() {
            let c = tb.len();
            let d = ta.data().iter().enumerate().map(|(i, x)| x + tb.data()[i % c]).collect();
            let t = Tensor::new(ta.shape().to_vec(), d)?;
            return Ok(self.push(t, Op::AddRowBroadcast(ia, ib)));
        }
        Err(shape_err("add", &[ta.shape(), tb.shape()]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("sub", &[ta.shape(), tb.shape()]));
        }
        let d = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(ta.shape().to_vec(), d)?;
        let (ia, ib) = (self.idx(a), self.idx(b));
        Ok(self.push(t, Op::Sub(ia, ib)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", &[ta.shape(), tb.shape()]));
        }
        let d = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), d)?;
        let (ia, ib) = (self.idx(a), self.idx(b));
        Ok(self.push(t, Op::Mul(ia, ib)))
    }

    /// Concatenation along the last axis: `[p]+[q] -> [p+q]`, or
    /// `[n,p]+[n,q] -> [n,p+q]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        let t = match (ta.rank(), tb.rank()) {
            (1, 1) => {
                let mut d = ta.data().to_vec();
                d.extend_from_slice(tb.data());
                Tensor::vector(d)
            }
            (2, 2) if ta.rows() == tb.rows() => {
                let mut d = Vec::with_capacity(ta.len() + tb.len());
                for i in 0..ta.rows() {
                    d.extend_from_slice(ta.row(i));
                    d.extend_from_slice(tb.row(i));
                }
                Tensor::new(vec![ta.rows(), ta.cols() + tb.cols()], d)?
            }
            _ => return Err(shape_err("concat", &[ta.shape(), tb.shape()])),
        };
        let (ia, ib) = (self.idx(a), self.idx(b));
        Ok(self.push(t, Op::Concat(ia, ib)))
    }

    /// Stacks equal-length vectors into a matrix, one per row.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Usage("stack_rows: no rows".into()))?;
        let d = self.val(*first).len();
        let mut data = Vec::with_capacity(d * rows.len());
        for &r in rows {
            let t = self.val(r);
            if t.rank() != 1 || t.len() != d {
                return Err(shape_err("stack_rows", &[self.val(*first).shape(), t.shape()]));
            }
            data.extend_from_slice(t.data());
        }
        let t = Tensor::new(vec![rows.len(), d], data)?;
        let idxs = rows.iter().map(|&r| self.idx(r)).collect();
        Ok(self.push(t, Op::StackRows(idxs)))
    }

    /// Joins vectors (or `[1]` scalars) end to end.
    pub fn concat_vectors(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_vectors: no parts".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            let t = self.val(p);
            if t.rank() != 1 {
                return Err(shape_err("concat_vectors", &[t.shape()]));
            }
            data.extend_from_slice(t.data());
        }
        let idxs = parts.iter().map(|&p| self.idx(p)).collect();
        Ok(self.push(Tensor::vector(data), Op::ConcatVectors(idxs)))
    }

    /// Row `i` of a matrix, as a vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let tx = self.val(x);
        if tx.rank() != 2 || i >= tx.rows() {
            return Err(shape_err("row", &[tx.shape(), &[i]]));
        }
        let t = Tensor::vector(tx.row(i).to_vec());
        let ix = self.idx(x);
        Ok(self.push(t, Op::Row(ix, i)))
    }

    /// `x[start..start+len]` along the last axis of a vector or matrix.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.val(x);
        let width = *tx.shape().last().unwrap_or(&0);
        if tx.rank() > 2 || len == 0 || start + len > width {
            return Err(shape_err("slice", &[tx.shape(), &[start, len]]));
        }
        let t = if tx.rank() == 1 {
            Tensor::vector(tx.data()[start..start + len].to_vec())
        } else {
            let d = (0..tx.rows()).flat_map(|r| tx.row(r)[start..start + len].iter().copied()).collect();
            Tensor::new(vec![tx.rows(), len], d)?
        };
        let ix = self.idx(x);
        Ok(self.push(t, Op::Slice(ix, start)))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Result<Var> {
        let tx = self.val(x);
        let d = tx.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(tx.shape().to_vec(), d)?;
        let ix = self.idx(x);
        Ok(self.push(t, op(ix)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::tanh, Op::Tanh)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::exp, Op::Exp)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| c * v, |i| Op::Scale(i, c))
    }

    /// Natural log; every entry must be positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.val(x).data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        self.unary(x, f64::ln, Op::Log)
    }

    /// `ln(max(x, floor))`; entries at or below the floor get zero gradient.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.unary(x, |v| v.max(floor).ln(), |i| Op::LogClamped(i, floor))
    }

    /// Column means of an `[n,d]` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.val(x);
        if tx.rank() != 2 {
            return Err(shape_err("mean_rows", &[tx.shape()]));
        }
        let (n, d) = (tx.rows(), tx.cols());
        let mut out = vec![0.0; d];
        for i in 0..n {
            for (o, v) in out.iter_mut().zip(tx.row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let ix = self.idx(x);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(ix)))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.val(x).data().iter().sum();
        let ix = self.idx(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(ix)))
    }

    fn vec_pair(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.rank() != 1 || ta.shape() != tb.shape() {
            return Err(shape_err(op, &[ta.shape(), tb.shape()]));
        }
        Ok(())
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.vec_pair("dot", a, b)?;
        let s = self.val(a).data().iter().zip(self.val(b).data()).map(|(x, y)| x * y).sum();
        let (ia, ib) = (self.idx(a), self.idx(b));
        Ok(self.push(Tensor::scalar(s), Op::Dot(ia, ib)))
    }

    /// `||a - b||`. The gradient at `a == b` is taken to be zero.
    pub fn euclidean_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.vec_pair("euclidean_distance", a, b)?;
        let s = sq_dist(self.val(a).data(), self.val(b).data()).sqrt();
        let (ia, ib) = (self.idx(a), self.idx(b));
        Ok(self.push(Tensor::scalar(s), Op::Euclidean(ia, ib)))
    }

    pub fn squared_euclidean_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.vec_pair("squared_euclidean_distance", a, b)?;
        let s = sq_dist(self.val(a).data(), self.val(b).data());
        let (ia, ib) = (self.idx(a), self.idx(b));
        Ok(self.push(Tensor::scalar(s), Op::SquaredEuclidean(ia, ib)))
    }

    /// Softmax of a vector, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.val(x);
        if tx.rank() != 1 {
            return Err(shape_err("softmax", &[tx.shape()]));
        }
        let t = Tensor::vector(softmax(tx.data()));
        let ix = self.idx(x);
        Ok(self.push(t, Op::Softmax(ix)))
    }

    /// `ln(sum(exp(x)))` of a vector, as a scalar.
    pub fn log_sum_exp(&mut self, x: Var) -> Result<Var> {
        let tx = self.val(x);
        if tx.rank() != 1 {
            return Err(shape_err("log_sum_exp", &[tx.shape()]));
        }
        let s = log_sum_exp(tx.data());
        let ix = self.idx(x);
        Ok(self.push(Tensor::scalar(s), Op::LogSumExp(ix)))
    }

    /// Batch normalization of an `[n,d]` batch with per-feature scale and
    /// shift. Training mode returns the batch statistics it used.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (tx, tg, tb) = (self.val(x), self.val(gamma), self.val(beta));
        if tx.rank() != 2 || tg.shape() != [tx.cols()] || tb.shape() != [tx.cols()] {
            return Err(shape_err("batchnorm", &[tx.shape(), tg.shape(), tb.shape()]));
        }
        let (n, d) = (tx.rows(), tx.cols());
        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                if n < 2 {
                    return Err(Error::DegenerateBatch {
                        op: "batchnorm",
                        detail: "training-mode statistics need at least two rows".into(),
                    });
                }
                let mut mean = vec![0.0; d];
                for i in 0..n {
                    for (m, v) in mean.iter_mut().zip(tx.row(i)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; d];
                for i in 0..n {
                    for ((s, v), m) in var.iter_mut().zip(tx.row(i)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                };
                (mean, var, Some(stats))
            }
            BatchNormMode::Infer {
                running_mean,
                running_var,
            } => {
                if running_mean.len() != d || running_var.len() != d {
                    return Err(shape_err("batchnorm", &[tx.shape(), &[running_mean.len()], &[running_var.len()]]));
                }
                (running_mean.to_vec(), running_var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; n * d];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                let h = (tx.data()[i * d + j] - mean[j]) * inv_std[j];
                xhat[i * d + j] = h;
                out[i * d + j] = tg.data()[j] * h + tb.data()[j];
            }
        }
        let t = Tensor::new(vec![n, d], out)?;
        let op = Op::BatchNorm {
            x: self.idx(x),
            gamma: self.idx(gamma),
            beta: self.idx(beta),
            xhat,
            inv_std,
            train: matches!(mode, BatchNormMode::Train),
        };
        Ok((self.push(t, op), stats))
    }

    /// Reverse-mode gradients of scalar `out` with respect to every trainable
    /// parameter in `params`. Parameters that are not reachable from `out`
    /// (or never entered the graph) receive zero tensors.
    pub fn gradients(&self, out: Var, params: &ParamSet) -> Result<Gradients> {
        if !self.owns(out) {
            return Err(Error::Usage("gradients: output was not produced by this graph".into()));
        }
        let root = out.idx;
        if !self.nodes[root].value.is_scalar() {
            return Err(Error::Usage(format!(
                "gradients: output must have shape [1], got {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);
        let mut param_grads: HashMap<&str, Vec<f64>> = HashMap::new();

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = node.value.data();
            match &node.op {
                Op::Const => {}
                Op::Param(id) => {
                    param_grads.insert(id.as_str(), g);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (k, n) = (tb.shape()[0], tb.shape()[1]);
                    let m = ta.len() / k;
                    let (ad, bd) = (ta.data(), tb.data());
                    let mut ga = vec![0.0; m * k];
                    let mut gb = vec![0.0; k * n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[r * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            let av = ad[r * k + p];
                            if av != 0.0 {
                                for (gbv, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *gbv += av * gv;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRowBroadcast(a, b) => {
                    let c = self.nodes[*b].value.len();
                    let mut gb = vec![0.0; c];
                    for (i, v) in g.iter().enumerate() {
                        gb[i % c] += v;
                    }
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Sub(a, b) => {
                    let neg = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, neg);
                }
                Op::Mul(a, b) => {
                    let (ad, bd) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                    let ga = g.iter().zip(bd).map(|(x, y)| x * y).collect();
                    let gb = g.iter().zip(ad).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Concat(a, b) => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if ta.rank() == 1 {
                        let p = ta.len();
                        accumulate(&mut grads, *a, g[..p].to_vec());
                        accumulate(&mut grads, *b, g[p..].to_vec());
                    } else {
                        let (p, q) = (ta.cols(), tb.cols());
                        let mut ga = Vec::with_capacity(ta.len());
                        let mut gb = Vec::with_capacity(tb.len());
                        for r in 0..ta.rows() {
                            let row = &g[r * (p + q)..(r + 1) * (p + q)];
                            ga.extend_from_slice(&row[..p]);
                            gb.extend_from_slice(&row[p..]);
                        }
                        accumulate(&mut grads, *a, ga);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::StackRows(rows) => {
                    let d = g.len() / rows.len();
                    for (r, &src) in rows.iter().enumerate() {
                        accumulate(&mut grads, src, g[r * d..(r + 1) * d].to_vec());
                    }
                }
                Op::ConcatVectors(parts) => {
                    let mut at = 0;
                    for &src in parts {
                        let n = self.nodes[src].value.len();
                        accumulate(&mut grads, src, g[at..at + n].to_vec());
                        at += n;
                    }
                }
                Op::Row(src, r) => {
                    let t = &self.nodes[*src].value;
                    let d = t.cols();
                    let mut gs = vec![0.0; t.len()];
                    gs[r * d..(r + 1) * d].copy_from_slice(&g);
                    accumulate(&mut grads, *src, gs);
                }
                Op::Slice(src, start) => {
                    let t = &self.nodes[*src].value;
                    let width = *t.shape().last().unwrap();
                    let len = node.value.shape().last().copied().unwrap();
                    let mut gs = vec![0.0; t.len()];
                    for (r, chunk) in g.chunks(len).enumerate() {
                        gs[r * width + start..r * width + start + len].copy_from_slice(chunk);
                    }
                    accumulate(&mut grads, *src, gs);
                }
                Op::Relu(src) => {
                    let x = self.nodes[*src].value.data();
                    let gs = g.iter().zip(x).map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 }).collect();
                    accumulate(&mut grads, *src, gs);
                }
                Op::Sigmoid(src) => {
                    let gs = g.iter().zip(y).map(|(gv, s)| gv * s * (1.0 - s)).collect();
                    accumulate(&mut grads, *src, gs);
                }
                Op::Tanh(src) => {
                    let gs = g.iter().zip(y).map(|(gv, t)| gv * (1.0 - t * t)).collect();
                    accumulate(&mut grads, *src, gs);
                }
                Op::Exp(src) => {
                    let gs = g.iter().zip(y).map(|(gv, e)| gv * e).collect();
                    accumulate(&mut grads, *src, gs);
                }
                Op::Scale(src, c) => {
                    let gs = g.iter().map(|gv| gv * c).collect();
                    accumulate(&mut grads, *src, gs);
                }
                Op::Log(src) => {
                    let x = self.nodes[*src].value.data();
                    let gs = g.iter().zip(x).map(|(gv, xv)| gv / xv).collect();
                    accumulate(&mut grads, *src, gs);
                }
                Op::LogClamped(src, floor) => {
                    let x = self.nodes[*src].value.data();
                    let gs = g
                        .iter()
                        .zip(x)
                        .map(|(gv, &xv)| if xv > *floor { gv / xv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *src, gs);
                }
                Op::MeanRows(src) => {
                    let t = &self.nodes[*src].value;
                    let n = t.rows() as f64;
                    let gs = (0..t.rows()).flat_map(|_| g.iter().map(move |gv| gv / n)).collect();
                    accumulate(&mut grads, *src, gs);
                }
                Op::Sum(src) => {
                    let gs = vec![g[0]; self.nodes[*src].value.len()];
                    accumulate(&mut grads, *src, gs);
                }
                Op::Dot(a, b) => {
                    let (ad, bd) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                    accumulate(&mut grads, *a, bd.iter().map(|v| g[0] * v).collect());
                    accumulate(&mut grads, *b, ad.iter().map(|v| g[0] * v).collect());
                }
                Op::Euclidean(a, b) => {
                    let (ad, bd) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                    let dist = y[0];
                    let coef = if dist > 0.0 { g[0] / dist } else { 0.0 };
                    let ga: Vec<f64> = ad.iter().zip(bd).map(|(x, z)| coef * (x - z)).collect();
                    let gb = ga.iter().map(|v| -v).collect();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::SquaredEuclidean(a, b) => {
                    let (ad, bd) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                    let ga: Vec<f64> = ad.iter().zip(bd).map(|(x, z)| 2.0 * g[0] * (x - z)).collect();
                    let gb = ga.iter().map(|v| -v).collect();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Softmax(src) => {
                    let inner: f64 = g.iter().zip(y).map(|(gv, p)| gv * p).sum();
                    let gs = g.iter().zip(y).map(|(gv, p)| p * (gv - inner)).collect();
                    accumulate(&mut grads, *src, gs);
                }
                Op::LogSumExp(src) => {
                    let p = softmax(self.nodes[*src].value.data());
                    accumulate(&mut grads, *src, p.iter().map(|v| g[0] * v).collect());
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                } => {
                    let tx = &self.nodes[*x].value;
                    let gam = self.nodes[*gamma].value.data();
                    let (n, d) = (tx.rows(), tx.cols());
                    let mut ggamma = vec![0.0; d];
                    let mut gbeta = vec![0.0; d];
                    for r in 0..n {
                        for j in 0..d {
                            ggamma[j] += g[r * d + j] * xhat[r * d + j];
                            gbeta[j] += g[r * d + j];
                        }
                    }
                    let mut gx = vec![0.0; n * d];
                    for j in 0..d {
                        if *train {
                            // dxhat = g*gamma; dx = inv_std/n * (n*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
                            let sum_dxh = gam[j] * gbeta[j];
                            let sum_dxh_xh = gam[j] * ggamma[j];
                            for r in 0..n {
                                let dxh = g[r * d + j] * gam[j];
                                gx[r * d + j] = inv_std[j] / n as f64
                                    * (n as f64 * dxh - sum_dxh - xhat[r * d + j] * sum_dxh_xh);
                            }
                        } else {
                            for r in 0..n {
                                gx[r * d + j] = g[r * d + j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gamma, ggamma);
                    accumulate(&mut grads, *beta, gbeta);
                }
            }
        }

        let mut out = BTreeMap::new();
        for p in params.trainable() {
            let mut data = param_grads
                .remove(p.id.as_str())
                .unwrap_or_else(|| vec![0.0; p.tensor.len()]);
            for (prefix, factor) in &self.grad_faults {
                if p.id.starts_with(prefix.as_str()) {
                    data.iter_mut().for_each(|v| *v *= factor);
                }
            }
            out.insert(p.id.clone(), Tensor::new(p.tensor.shape().to_vec(), data)?);
        }
        Ok(Gradients { grads: out })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, g: Vec<f64>) {
    match &mut grads[idx] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub(crate) fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
