use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    StopGrad,
    StraightThrough(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    L2Normalize {
        input: Var,
        norms: Vec<f64>,
        epsilon: f64,
    },
    GatherRows(Var, Vec<usize>),
    LogSumExpRows {
        input: Var,
        softmax: Vec<f64>,
    },
    SliceCols {
        input: Var,
        start: usize,
        end: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation tape. Build one per mini-batch, call
/// [`Graph::backward`] once, then drop it.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` when `var` does
    /// not require gradients or is unreachable from the loss.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but yields zeros for unreachable nodes.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<f64> {
        self.get(var).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

impl Graph {
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

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, k2, n) = (av.rows(), av.cols(), bv.rows(), bv.cols());
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("[{m}x{k}] x [{k2}x{n}]"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, av.data(), false, bv.data(), false, 0.0, &mut out);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n, k2) = (av.rows(), av.cols(), bv.rows(), bv.cols());
        if k != k2 {
            return Err(Error::shape(
                "matmul_t",
                format!("[{m}x{k}] x [{n}x{k2}]^T"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, av.data(), false, bv.data(), true, 0.0, &mut out);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulT(a, b), rg))
    }

    /// Adds a bias vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let n = av.cols();
        if bv.len() != n {
            return Err(Error::shape(
                "add_row",
                format!("bias of length {} for {} columns", bv.len(), n),
            ));
        }
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.needs(a) || self.needs(bias);
        Ok(self.push(value, Op::AddRow(a, bias), rg))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.needs(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.needs(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.needs(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    /// Forward identity, zero gradient.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::StopGrad, false)
    }

    /// Takes the value `hard` in the forward pass and passes gradients to
    /// `soft` unchanged, i.e. `[hard - soft]_stop + soft` without the
    /// rounding error of the explicit sum.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Result<Var> {
        if hard.len() != self.value(soft).len() {
            return Err(Error::shape("straight_through", "hard/soft length mismatch"));
        }
        let hard = Tensor::new(self.value(soft).shape().to_vec(), hard.into_data())?;
        let rg = self.needs(soft);
        Ok(self.push(hard, Op::StraightThrough(soft), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let rg = self.needs(a);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    /// Mean negative log-likelihood of `labels` under the row-wise softmax of
    /// `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, classes) = (lv.rows(), lv.cols());
        if labels.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {} rows", labels.len(), n),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        let mut probs = vec![0.0; n * classes];
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &v) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (v - max).exp();
                z += *p;
            }
            for p in &mut probs[r * classes..(r + 1) * classes] {
                *p /= z;
            }
            total += z.ln() + max - row[y];
        }
        let value = if n == 0 { 0.0 } else { total / n as f64 };
        let rg = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Divides every row by `max(||row||, epsilon)`.
    pub fn l2_normalize(&mut self, a: Var, epsilon: f64) -> Var {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        let mut out = av.data().to_vec();
        let mut norms = Vec::with_capacity(rows);
        for row in out.chunks_mut(cols.max(1)).take(rows) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = norm.max(epsilon);
            row.iter_mut().for_each(|v| *v /= denom);
            norms.push(norm);
        }
        let value = Tensor::new(av.shape().to_vec(), out).expect("same shape");
        let rg = self.needs(a);
        self.push(
            value,
            Op::L2Normalize {
                input: a,
                norms,
                epsilon,
            },
            rg,
        )
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= av.rows()) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} of {}", av.rows()),
            ));
        }
        let value = av.select_rows(indices);
        let rg = self.needs(a);
        Ok(self.push(value, Op::GatherRows(a, indices.to_vec()), rg))
    }

    /// Row-wise `log(sum(exp(row)))`, stabilized by the row maximum.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        let mut softmax = vec![0.0; rows * cols];
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = av.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sm = &mut softmax[r * cols..(r + 1) * cols];
            let mut z = 0.0;
            for (s, &v) in sm.iter_mut().zip(row) {
                *s = (v - max).exp();
                z += *s;
            }
            sm.iter_mut().for_each(|s| *s /= z);
            out.push(max + z.ln());
        }
        let rg = self.needs(a);
        self.push(Tensor::vector(out), Op::LogSumExpRows { input: a, softmax }, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        if start > end || end > cols {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}..{end} of {cols} columns"),
            ));
        }
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&av.row(r)[start..end]);
        }
        let value = Tensor::matrix(rows, end - start, data)?;
        let rg = self.needs(a);
        Ok(self.push(value, Op::SliceCols { input: a, start, end }, rg))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.needs(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.needs(v) {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                acc(*a, &mut |da| gemm(m, n, k, 1.0, g, false, bv.data(), true, 1.0, da));
                acc(*b, &mut |db| gemm(k, m, n, 1.0, av.data(), true, g, false, 1.0, db));
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                acc(*a, &mut |da| gemm(m, n, k, 1.0, g, false, bv.data(), false, 1.0, da));
                acc(*b, &mut |db| gemm(n, m, k, 1.0, g, true, av.data(), false, 1.0, db));
            }
            Op::AddRow(a, bias) => {
                let cols = self.value(*bias).len().max(1);
                acc(*a, &mut |da| add_into(da, g));
                acc(*bias, &mut |db| {
                    for row in g.chunks(cols) {
                        add_into(db, row);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| db.iter_mut().zip(g).for_each(|(d, &x)| *d -= x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |da| {
                    for ((d, &x), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d += x * y;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, &x), &y) in db.iter_mut().zip(g).zip(av) {
                        *d += x * y;
                    }
                });
            }
            Op::Scale(a, factor) => {
                acc(*a, &mut |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d += factor * x));
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                acc(*a, &mut |da| {
                    for ((d, &x), &v) in da.iter_mut().zip(g).zip(av) {
                        if v > 0.0 {
                            *d += x;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let out = node.value.data();
                acc(*a, &mut |da| {
                    for ((d, &x), &s) in da.iter_mut().zip(g).zip(out) {
                        *d += x * s * (1.0 - s);
                    }
                });
            }
            Op::StraightThrough(a) => acc(*a, &mut |da| add_into(da, g)),
            Op::Sum(a) => acc(*a, &mut |da| da.iter_mut().for_each(|d| *d += g[0])),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                if n == 0 {
                    return Ok(());
                }
                let classes = probs.len() / n;
                let scale = g[0] / n as f64;
                acc(*logits, &mut |dl| {
                    for (r, &y) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == y { 1.0 } else { 0.0 };
                            dl[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                        }
                    }
                });
            }
            Op::L2Normalize {
                input,
                norms,
                epsilon,
            } => {
                let out = node.value.data();
                let cols = node.value.cols().max(1);
                acc(*input, &mut |dx| {
                    for (r, &norm) in norms.iter().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        let (y, gy) = (&out[span.clone()], &g[span.clone()]);
                        let dxr = &mut dx[span];
                        if norm >= *epsilon {
                            let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                            for ((d, &yi), &gi) in dxr.iter_mut().zip(y).zip(gy) {
                                *d += (gi - yi * dot) / norm;
                            }
                        } else {
                            for (d, &gi) in dxr.iter_mut().zip(gy) {
                                *d += gi / epsilon;
                            }
                        }
                    }
                });
            }
            Op::GatherRows(a, indices) => {
                let cols = self.value(*a).cols().max(1);
                acc(*a, &mut |da| {
                    for (r, &src) in indices.iter().enumerate() {
                        add_into(&mut da[src * cols..(src + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::LogSumExpRows { input, softmax } => {
                let rows = g.len();
                let cols = if rows == 0 { 0 } else { softmax.len() / rows };
                acc(*input, &mut |da| {
                    for (r, &gr) in g.iter().enumerate() {
                        for c in 0..cols {
                            da[r * cols + c] += gr * softmax[r * cols + c];
                        }
                    }
                });
            }
            Op::SliceCols { input, start, end } => {
                let cols = self.value(*input).cols();
                let width = end - start;
                acc(*input, &mut |da| {
                    for r in 0..g.len() / width.max(1) {
                        add_into(
                            &mut da[r * cols + start..r * cols + end],
                            &g[r * width..(r + 1) * width],
                        );
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
