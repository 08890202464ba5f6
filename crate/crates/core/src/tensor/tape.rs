use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;

use super::kernels::{self, gemm};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear(Var, Var, Var),
    AddRowBroadcast(Var, Var),
    Relu(Var),
    Dropout(Var, Vec<f64>),
    LogSoftmax(Var, Option<Vec<bool>>),
    MaxPoolRows(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
    SegmentMaxPool(Var, Vec<usize>),
    ConcatCols(Var, Var),
    BroadcastRows(Var),
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Option<Vec<bool>>,
        lsm: Tensor,
    },
    Sum(Var),
    Mean(Var),
    Add(Var, Var),
    Scale(Var, f64),
    Gather(Var, Vec<usize>),
    Stack(Vec<Var>),
    ConcatRows(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order so gradients can be accumulated in
/// reverse. One tape is one single-threaded unit of work.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(x), self.value(w))?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out, Op::MatMul(x, w), rg))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = kernels::linear(self.value(x), self.value(w), self.value(b))?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Linear(x, w, b), rg))
    }

    /// Adds the vector `v` to every row of `x`.
    pub fn add_row_broadcast(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xv, vv) = (self.value(x), self.value(v));
        if xv.shape().len() != 2 || vv.shape() != [xv.cols()] {
            return Err(Error::Dimension {
                op: "add_row_broadcast",
                lhs: xv.shape().to_vec(),
                rhs: vv.shape().to_vec(),
            });
        }
        let mut out = xv.clone();
        kernels::add_row_broadcast_in_place(&mut out, vv.data());
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(out, Op::AddRowBroadcast(x, v), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = kernels::relu(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        rng: &mut R,
        training: bool,
    ) -> Result<Var> {
        let (out, scale) = kernels::dropout(self.value(x), rate, rng, training)?;
        let rg = self.rg(x);
        Ok(match scale {
            Some(s) => self.push(out, Op::Dropout(x, s), rg),
            None => self.push(out, Op::Reshape(x), rg),
        })
    }

    pub fn masked_log_softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let out = kernels::masked_log_softmax(self.value(x), mask)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::LogSoftmax(x, mask.map(<[bool]>::to_vec)), rg))
    }

    /// Column-wise max over rows; returns the pooled vector and the winning
    /// row of every column.
    pub fn max_pool_rows(&mut self, x: Var) -> Result<(Var, Vec<usize>)> {
        let (out, argmax) = kernels::max_pool_rows(self.value(x))?;
        let rg = self.rg(x);
        let v = self.push(out, Op::MaxPoolRows(x, argmax.clone()), rg);
        Ok((v, argmax))
    }

    /// One max-pooled row per group of input rows. The backward pass only
    /// touches the winning entries.
    pub fn segment_max_pool(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let (out, argmax) = kernels::segment_max_pool(self.value(x), groups)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SegmentMaxPool(x, argmax), rg))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.expect_matrix("select_rows")?.0;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Shape(format!("row {bad} out of range for {n} rows")));
        }
        let out = xv.select_rows(rows);
        let rg = self.rg(x);
        Ok(self.push(out, Op::SelectRows(x, rows.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ra, ca) = av.expect_matrix("concat_cols")?;
        let (rb, cb) = bv.expect_matrix("concat_cols")?;
        if ra != rb {
            return Err(Error::Dimension {
                op: "concat_cols",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let out = Tensor::new(vec![ra, ca + cb], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::ConcatCols(a, b), rg))
    }

    /// Repeats a vector as `n` identical rows.
    pub fn broadcast_rows(&mut self, v: Var, n: usize) -> Result<Var> {
        let vv = self.value(v);
        if vv.shape().len() != 1 || n == 0 {
            return Err(Error::Shape(format!(
                "broadcast_rows expects a vector, got {:?}",
                vv.shape()
            )));
        }
        let m = vv.len();
        let mut data = Vec::with_capacity(n * m);
        for _ in 0..n {
            data.extend_from_slice(vv.data());
        }
        let out = Tensor::new(vec![n, m], data)?;
        let rg = self.rg(v);
        Ok(self.push(out, Op::BroadcastRows(v), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Mean over rows of `-masked_log_softmax(logits)[target]`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (loss, lsm) = kernels::cross_entropy_with_lsm(self.value(logits), targets, mask)?;
        let rg = self.rg(logits);
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.map(<[bool]>::to_vec),
                lsm,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::scalar(xv.sum() / xv.len() as f64);
        let rg = self.rg(x);
        self.push(out, Op::Mean(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Dimension {
                op: "add",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let out = Tensor {
            shape: xv.shape().to_vec(),
            data: xv.data().iter().map(|v| v * c).collect(),
        };
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Picks entries `(row, col)` of a matrix into a vector.
    pub fn gather(&mut self, x: Var, entries: &[(usize, usize)]) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.expect_matrix("gather")?;
        let mut flat = Vec::with_capacity(entries.len());
        for &(i, j) in entries {
            if i >= r || j >= c {
                return Err(Error::Shape(format!(
                    "gather index ({i}, {j}) outside {:?}",
                    xv.shape()
                )));
            }
            flat.push(i * c + j);
        }
        if flat.is_empty() {
            return Err(Error::EmptySet("gather"));
        }
        let out = Tensor::vector(flat.iter().map(|&f| xv.data()[f]).collect());
        let rg = self.rg(x);
        Ok(self.push(out, Op::Gather(x, flat), rg))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or(Error::EmptySet("concat_rows"))?;
        let cols = self.value(*first).expect_matrix("concat_rows")?.1;
        let mut data = Vec::new();
        for &x in xs {
            let xv = self.value(x);
            if xv.shape().len() != 2 || xv.cols() != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: xv.shape().to_vec(),
                });
            }
            data.extend_from_slice(xv.data());
        }
        let out = Tensor::new(vec![data.len() / cols.max(1), cols], data)?;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(out, Op::ConcatRows(xs.to_vec()), rg))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or(Error::EmptySet("stack"))?;
        let shape = self.value(*first).shape().to_vec();
        let mut data = Vec::new();
        for &x in xs {
            let xv = self.value(x);
            if xv.shape() != shape.as_slice() {
                return Err(Error::Dimension {
                    op: "stack",
                    lhs: shape,
                    rhs: xv.shape().to_vec(),
                });
            }
            data.extend_from_slice(xv.data());
        }
        let mut out_shape = vec![xs.len()];
        out_shape.extend_from_slice(&shape);
        let out = Tensor::new(out_shape, data)?;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(out, Op::Stack(xs.to_vec()), rg))
    }

    /// Hash of every piecewise branch taken on this tape: ReLU signs,
    /// max-pool winners and index sets. Two evaluations with equal fingerprints lie on the
    /// same smooth piece of the function.
    pub fn branch_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.nodes.len().hash(&mut h);
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.value(*x).data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPoolRows(_, argmax) | Op::SegmentMaxPool(_, argmax) => argmax.hash(&mut h),
                // Row subsets and gathers encode argmax masks built off-tape.
                Op::SelectRows(_, rows) => rows.hash(&mut h),
                Op::Gather(_, flat) => flat.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse-mode accumulation of d`loss`/d(node) for every node that
    /// requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data.iter_mut().zip(delta.data) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(x, w) => self.matmul_backward(*x, *w, g, grads),
            Op::Linear(x, w, b) => {
                self.matmul_backward(*x, *w, g, grads);
                if self.rg(*b) {
                    self.accumulate(grads, *b, column_sums(g));
                }
            }
            Op::AddRowBroadcast(x, v) => {
                if self.rg(*v) {
                    self.accumulate(grads, *v, column_sums(g));
                }
                self.accumulate(grads, *x, g.clone());
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data).unwrap());
            }
            Op::Dropout(x, scale) => {
                let data = g.data().iter().zip(scale).map(|(a, s)| a * s).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data).unwrap());
            }
            Op::LogSoftmax(x, mask) => {
                let k = out.cols();
                let keep = |j: usize| mask.as_ref().is_none_or(|m| m[j]);
                let mut dx = vec![0.0; out.len()];
                for ((lrow, grow), drow) in out
                    .data()
                    .chunks_exact(k)
                    .zip(g.data().chunks_exact(k))
                    .zip(dx.chunks_exact_mut(k))
                {
                    let gsum: f64 = (0..k).filter(|&j| keep(j)).map(|j| grow[j]).sum();
                    for j in (0..k).filter(|&j| keep(j)) {
                        drow[j] = grow[j] - lrow[j].exp() * gsum;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), dx).unwrap());
            }
            Op::MaxPoolRows(x, argmax) => {
                let xv = self.value(*x);
                let m = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                for (c, &r) in argmax.iter().enumerate() {
                    dx.data[r * m + c] += g.data()[c];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SegmentMaxPool(x, argmax) => {
                let xv = self.value(*x);
                let m = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                for (i, &r) in argmax.iter().enumerate() {
                    dx.data[r * m + i % m] += g.data()[i];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SelectRows(x, rows) => {
                let xv = self.value(*x);
                let m = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                for (i, &r) in rows.iter().enumerate() {
                    for c in 0..m {
                        dx.data[r * m + c] += g.data()[i * m + c];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let rows = g.rows();
                let mut da = Vec::with_capacity(rows * ca);
                let mut db = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    let row = g.row(r);
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                if self.rg(*a) {
                    self.accumulate(grads, *a, Tensor::new(vec![rows, ca], da).unwrap());
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, Tensor::new(vec![rows, cb], db).unwrap());
                }
            }
            Op::BroadcastRows(v) => {
                self.accumulate(grads, *v, column_sums(g));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::new(shape, g.data().to_vec()).unwrap());
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                lsm,
            } => {
                let k = lsm.cols();
                let scale = g.item() / targets.len() as f64;
                let mut dx = vec![0.0; lsm.len()];
                for (row, &t) in targets.iter().enumerate() {
                    for j in 0..k {
                        if mask.as_ref().is_none_or(|m| m[j]) {
                            let p = lsm.data()[row * k + j].exp();
                            let y = if j == t { 1.0 } else { 0.0 };
                            dx[row * k + j] = scale * (p - y);
                        }
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(lsm.shape().to_vec(), dx).unwrap());
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, g.item()));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let shape = xv.shape().to_vec();
                let n = xv.len() as f64;
                self.accumulate(grads, *x, Tensor::full(&shape, g.item() / n));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Scale(x, c) => {
                let data = g.data().iter().map(|v| v * c).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data).unwrap());
            }
            Op::Gather(x, flat) => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                for (i, &f) in flat.iter().enumerate() {
                    dx.data[f] += g.data()[i];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatRows(xs) => {
                let mut start = 0;
                for &x in xs {
                    let len = self.value(x).len();
                    if self.rg(x) {
                        let shape = self.value(x).shape().to_vec();
                        let part = g.data()[start..start + len].to_vec();
                        self.accumulate(grads, x, Tensor::new(shape, part).unwrap());
                    }
                    start += len;
                }
            }
            Op::Stack(xs) => {
                let per = g.len() / xs.len();
                for (i, &x) in xs.iter().enumerate() {
                    if self.rg(x) {
                        let shape = self.value(x).shape().to_vec();
                        let part = g.data()[i * per..(i + 1) * per].to_vec();
                        self.accumulate(grads, x, Tensor::new(shape, part).unwrap());
                    }
                }
            }
        }
    }

    fn matmul_backward(&self, x: Var, w: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let xv = self.value(x);
        let wv = self.value(w);
        let (b, i) = (xv.shape()[0], xv.shape()[1]);
        let o = wv.shape()[1];
        if self.rg(x) {
            // dX = dY · Wᵀ
            let mut dx = vec![0.0; b * i];
            gemm(
                b,
                o,
                i,
                g.data(),
                (o as isize, 1),
                wv.data(),
                (1, o as isize),
                0.0,
                &mut dx,
            );
            self.accumulate(grads, x, Tensor::new(vec![b, i], dx).unwrap());
        }
        if self.rg(w) {
            // dW = Xᵀ · dY
            let mut dw = vec![0.0; i * o];
            gemm(
                i,
                b,
                o,
                xv.data(),
                (1, i as isize),
                g.data(),
                (o as isize, 1),
                0.0,
                &mut dw,
            );
            self.accumulate(grads, w, Tensor::new(vec![i, o], dw).unwrap());
        }
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let c = g.cols();
    let mut out = vec![0.0; c];
    for row in g.data().chunks_exact(c) {
        for (a, b) in out.iter_mut().zip(row) {
            *a += b;
        }
    }
    Tensor::vector(out)
}
