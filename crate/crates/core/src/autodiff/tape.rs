//! Explicit reverse-mode tape over dense matrices.
//!
//! A [`Tape`] is rebuilt for every training step: the set of experts can
//! change between steps, so no graph is ever cached. Nodes are identified
//! by [`NodeId`] and values are stored inline; [`Tape::backward`] walks the
//! record in reverse and writes parameter gradients into a [`ParamStore`].

use super::params::{ParamId, ParamStore};
use super::tensor::{smoothing_targets, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    /// Position in the vector returned by [`Tape::gradients`].
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulColumn(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    SoftmaxRows(NodeId),
    NormalizeRowSum(NodeId),
    L2NormalizeRows(NodeId),
    Column(NodeId, usize),
    MeanRows(NodeId),
    Sum(NodeId),
    SmoothedCe {
        logits: NodeId,
        targets: Vec<usize>,
        eps: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A free variable whose gradient is reported by [`Tape::gradients`]
    /// but not attached to any parameter.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Records a parameter. Frozen parameters enter the tape as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId> {
        let p = store.get(id)?;
        let node = self.push(p.value.clone(), Op::Leaf, !p.frozen);
        if !p.frozen {
            self.nodes[node.0].param = Some(id);
        }
        Ok(node)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    /// `a (m×n) + b (1×n)` broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        let (br, bn) = self.value(b).dims2()?;
        if br != 1 || bn != n {
            return Err(Error::Shape(format!("add_row: {m}x{n} + {br}x{bn}")));
        }
        let bias = self.value(b).data();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(bias) {
                *x += b;
            }
        }
        let v = Tensor::matrix(m, n, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::AddRow(a, b), rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "mul: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// Scales row `i` of `a (m×n)` by `c[i]` where `c` is `m×1`.
    pub fn mul_column(&mut self, a: NodeId, c: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        let (cm, cn) = self.value(c).dims2()?;
        if cm != m || cn != 1 {
            return Err(Error::Shape(format!("mul_column: {m}x{n} by {cm}x{cn}")));
        }
        let scale = self.value(c).data();
        let mut data = self.value(a).data().to_vec();
        for (row, s) in data.chunks_mut(n).zip(scale) {
            row.iter_mut().for_each(|x| *x *= s);
        }
        let v = Tensor::matrix(m, n, data)?;
        let rg = self.rg(a) || self.rg(c);
        Ok(self.push(v, Op::MulColumn(a, c), rg))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let va = self.value(a);
        let v = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().map(|x| x * s).collect(),
        )
        .expect("shape preserved");
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let v = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().map(|x| x.tanh()).collect(),
        )
        .expect("shape preserved");
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            data.extend(super::tensor::softmax(self.value(a).row_slice(r))?);
        }
        let v = Tensor::matrix(m, n, data)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::SoftmaxRows(a), rg))
    }

    /// Divides each row by its sum. Rows must have nonzero sums.
    pub fn normalize_row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            let s: f64 = row.iter().sum();
            if s == 0.0 {
                return Err(Error::Numerical("row sum is zero".into()));
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        let v = Tensor::matrix(m, n, data)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::NormalizeRowSum(a), rg))
    }

    /// Rescales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Numerical("cannot normalize a zero row".into()));
            }
            row.iter_mut().for_each(|x| *x /= norm);
        }
        let v = Tensor::matrix(m, n, data)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::L2NormalizeRows(a), rg))
    }

    /// Column `j` of `a` as an `m×1` matrix.
    pub fn column(&mut self, a: NodeId, j: usize) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        if j >= n {
            return Err(Error::Index { index: j, len: n });
        }
        let data = (0..m).map(|r| self.value(a).get(r, j)).collect();
        let v = Tensor::matrix(m, 1, data)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Column(a, j), rg))
    }

    /// Mean over rows: `m×n → 1×n`.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        if m == 0 {
            return Err(Error::Shape("mean over zero rows".into()));
        }
        let mut data = vec![0.0; n];
        for r in 0..m {
            for (d, x) in data.iter_mut().zip(self.value(a).row_slice(r)) {
                *d += x;
            }
        }
        data.iter_mut().for_each(|d| *d /= m as f64);
        let rg = self.rg(a);
        Ok(self.push(Tensor::row(data), Op::MeanRows(a), rg))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    /// Mean label-smoothed cross-entropy over the rows of `logits`.
    pub fn smoothed_ce(&mut self, logits: NodeId, targets: &[usize], eps: f64) -> Result<NodeId> {
        let (m, n) = self.value(logits).dims2()?;
        if targets.len() != m || m == 0 {
            return Err(Error::Shape(format!(
                "smoothed_ce: {m} rows but {} targets",
                targets.len()
            )));
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let (loss, _) =
                super::tensor::label_smoothed_ce(self.value(logits).row_slice(r), t, eps)?;
            total += loss;
        }
        debug_assert_eq!(n, self.value(logits).cols());
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / m as f64),
            Op::SmoothedCe {
                logits,
                targets: targets.to_vec(),
                eps,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar node. Returns the gradient of every node
    /// that requires one.
    pub fn gradients(&self, loss: NodeId) -> Result<Vec<Option<Tensor>>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &upstream, &mut grads)?;
            grads[idx] = Some(upstream);
        }
        Ok(grads)
    }

    /// Runs [`Tape::gradients`] and accumulates parameter gradients into
    /// `store`. Frozen parameters were recorded as constants and are
    /// untouched.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (node, grad) in self.nodes.iter().zip(grads) {
            if let (Some(pid), Some(g)) = (node.param, grad) {
                store.accumulate_grad(pid, &g)?;
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
        if !self.rg(id) {
            return Ok(());
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor,
        up: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let g = up.matmul(&self.value(*b).transpose()?)?;
                    self.accumulate(grads, *a, g)?;
                }
                if self.rg(*b) {
                    let g = self.value(*a).transpose()?.matmul(up)?;
                    self.accumulate(grads, *b, g)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, up.clone())?;
                self.accumulate(grads, *b, up.clone())?;
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, up.clone())?;
                if self.rg(*b) {
                    let (m, n) = up.dims2()?;
                    let mut col = vec![0.0; n];
                    for r in 0..m {
                        for (c, x) in col.iter_mut().zip(up.row_slice(r)) {
                            *c += x;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::row(col))?;
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = up
                        .data()
                        .iter()
                        .zip(vb.data())
                        .map(|(u, y)| u * y)
                        .collect();
                    self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), d)?)?;
                }
                if self.rg(*b) {
                    let d = up
                        .data()
                        .iter()
                        .zip(va.data())
                        .map(|(u, x)| u * x)
                        .collect();
                    self.accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), d)?)?;
                }
            }
            Op::MulColumn(a, c) => {
                let (m, n) = up.dims2()?;
                let va = self.value(*a);
                let vc = self.value(*c);
                if self.rg(*a) {
                    let mut d = up.data().to_vec();
                    for (row, s) in d.chunks_mut(n).zip(vc.data()) {
                        row.iter_mut().for_each(|x| *x *= s);
                    }
                    self.accumulate(grads, *a, Tensor::matrix(m, n, d)?)?;
                }
                if self.rg(*c) {
                    let d = (0..m)
                        .map(|r| {
                            up.row_slice(r)
                                .iter()
                                .zip(va.row_slice(r))
                                .map(|(u, x)| u * x)
                                .sum()
                        })
                        .collect();
                    self.accumulate(grads, *c, Tensor::matrix(m, 1, d)?)?;
                }
            }
            Op::Scale(a, s) => {
                let d = up.data().iter().map(|u| u * s).collect();
                self.accumulate(grads, *a, Tensor::new(up.shape().to_vec(), d)?)?;
            }
            Op::Tanh(a) => {
                let d = up
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(u, y)| u * (1.0 - y * y))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(up.shape().to_vec(), d)?)?;
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = out.dims2()?;
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    let y = out.row_slice(r);
                    let u = up.row_slice(r);
                    let dot: f64 = y.iter().zip(u).map(|(y, u)| y * u).sum();
                    for j in 0..n {
                        d[r * n + j] = y[j] * (u[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(m, n, d)?)?;
            }
            Op::NormalizeRowSum(a) => {
                let (m, n) = out.dims2()?;
                let x = self.value(*a);
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    let s: f64 = x.row_slice(r).iter().sum();
                    let y = out.row_slice(r);
                    let u = up.row_slice(r);
                    let dot: f64 = y.iter().zip(u).map(|(y, u)| y * u).sum();
                    for j in 0..n {
                        d[r * n + j] = (u[j] - dot) / s;
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(m, n, d)?)?;
            }
            Op::L2NormalizeRows(a) => {
                let (m, n) = out.dims2()?;
                let x = self.value(*a);
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    let norm = x.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let y = out.row_slice(r);
                    let u = up.row_slice(r);
                    let dot: f64 = y.iter().zip(u).map(|(y, u)| y * u).sum();
                    for j in 0..n {
                        d[r * n + j] = (u[j] - y[j] * dot) / norm;
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(m, n, d)?)?;
            }
            Op::Column(a, j) => {
                let (m, n) = self.value(*a).dims2()?;
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    d[r * n + j] = up.data()[r];
                }
                self.accumulate(grads, *a, Tensor::matrix(m, n, d)?)?;
            }
            Op::MeanRows(a) => {
                let (m, n) = self.value(*a).dims2()?;
                let mut d = Vec::with_capacity(m * n);
                for _ in 0..m {
                    d.extend(up.data().iter().map(|u| u / m as f64));
                }
                self.accumulate(grads, *a, Tensor::matrix(m, n, d)?)?;
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::filled(&shape, up.data()[0]))?;
            }
            Op::SmoothedCe {
                logits,
                targets,
                eps,
            } => {
                let x = self.value(*logits);
                let (m, n) = x.dims2()?;
                let scale = up.data()[0] / m as f64;
                let mut d = Vec::with_capacity(m * n);
                for (r, &t) in targets.iter().enumerate() {
                    let p = super::tensor::softmax(x.row_slice(r))?;
                    let q = smoothing_targets(n, t, *eps);
                    d.extend(p.iter().zip(&q).map(|(p, q)| (p - q) * scale));
                }
                self.accumulate(grads, *logits, Tensor::matrix(m, n, d)?)?;
            }
        }
        Ok(())
    }
}
