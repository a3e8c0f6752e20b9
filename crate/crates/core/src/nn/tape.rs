//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! Forward ops append nodes to an arena; node creation order is a valid
//! topological order, so the backward pass is a single reverse sweep that
//! pushes each node's gradient into its parents. The tape is rebuilt per
//! mini-batch, which keeps recurrent unrolling trivial.

use super::tensor::Tensor;
use super::NnError;

/// Floor applied to probabilities before taking logs in the loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// x (B×n) plus a (1×n) bias broadcast over rows.
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    /// Elementwise product with a fixed (pre-scaled) dropout mask.
    Dropout(NodeId, Tensor),
    /// Gathers the given columns of the parent, in order.
    ColSelect(NodeId, Vec<usize>),
    /// Rows of a followed by rows of b, side by side.
    ConcatCols(NodeId, NodeId),
    /// Valid cross-correlation over the time axis of channel-major rows.
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        c_in: usize,
        l_in: usize,
        k: usize,
        stride: usize,
    },
    /// Fused softmax + mean categorical cross-entropy against class indices.
    /// Keeps the softmax probabilities for the backward pass.
    SoftmaxXent {
        logits: NodeId,
        probs: Tensor,
        targets: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Leaf gradients produced by [`Tape::backward`]. Interior-node gradients
/// are dropped during the sweep to cap memory.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a leaf, if the leaf influenced it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Inserts a tensor that gradients may flow into (parameters, inputs).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Adds a (1×n) bias row to every row of x (B×n).
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(NnError::ShapeMismatch(format!(
                "bias {:?} against input {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut value = xv.clone();
        let n = value.cols();
        let bias = bv.data().to_vec();
        for row in value.data_mut().chunks_exact_mut(n) {
            for (o, &b) in row.iter_mut().zip(&bias) {
                *o += b;
            }
        }
        Ok(self.push(value, Op::AddBias(x, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.value(a).same_shape(self.value(b))?;
        let mut value = self.value(a).clone();
        for (o, &v) in value.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o += v;
        }
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.value(a).same_shape(self.value(b))?;
        let mut value = self.value(a).clone();
        for (o, &v) in value.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o -= v;
        }
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.value(a).same_shape(self.value(b))?;
        let mut value = self.value(a).clone();
        for (o, &v) in value.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o *= v;
        }
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let mut value = self.value(x).clone();
        for v in value.data_mut() {
            *v = 1.0 / (1.0 + (-*v).exp());
        }
        self.push(value, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let mut value = self.value(x).clone();
        for v in value.data_mut() {
            *v = v.tanh();
        }
        self.push(value, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut value = self.value(x).clone();
        for v in value.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(value, Op::Relu(x))
    }

    /// Elementwise product with `mask`, which must already include the
    /// 1/(1-rate) inverted-dropout scaling.
    pub fn dropout(&mut self, x: NodeId, mask: Tensor) -> Result<NodeId, NnError> {
        self.value(x).same_shape(&mask)?;
        let mut value = self.value(x).clone();
        for (o, &m) in value.data_mut().iter_mut().zip(mask.data()) {
            *o *= m;
        }
        Ok(self.push(value, Op::Dropout(x, mask)))
    }

    /// Selects columns of x in the given order: out[:, j] = x[:, cols[j]].
    pub fn col_select(&mut self, x: NodeId, cols: Vec<usize>) -> Result<NodeId, NnError> {
        let xv = self.value(x);
        if let Some(&bad) = cols.iter().find(|&&c| c >= xv.cols()) {
            return Err(NnError::ShapeMismatch(format!(
                "column {bad} out of range for {:?}",
                xv.shape()
            )));
        }
        let rows = xv.rows();
        let mut value = Tensor::zeros(rows, cols.len());
        for i in 0..rows {
            let src = xv.row(i);
            for (j, &c) in cols.iter().enumerate() {
                value.set(i, j, src[c]);
            }
        }
        Ok(self.push(value, Op::ColSelect(x, cols)))
    }

    /// Concatenates a and b along columns: out = [a | b]. Row counts must match.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(NnError::ShapeMismatch(format!(
                "concat of {:?} with {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (rows, n_a, n_b) = (av.rows(), av.cols(), bv.cols());
        let mut value = Tensor::zeros(rows, n_a + n_b);
        for i in 0..rows {
            let row = &mut value.data_mut()[i * (n_a + n_b)..(i + 1) * (n_a + n_b)];
            row[..n_a].copy_from_slice(av.row(i));
            row[n_a..].copy_from_slice(bv.row(i));
        }
        Ok(self.push(value, Op::ConcatCols(a, b)))
    }

    /// Valid (no padding) cross-correlation over time. Rows of x hold
    /// `c_in` channels of length `l_in` back to back; kernels w are
    /// (filters × c_in·k); bias b is (1 × filters). The output rows hold
    /// `filters` channels of length `l_out = (l_in - k)/stride + 1`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        c_in: usize,
        l_in: usize,
        k: usize,
        stride: usize,
    ) -> Result<NodeId, NnError> {
        if stride < 1 {
            return Err(NnError::InvalidStride(stride));
        }
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols() != c_in * l_in || k > l_in {
            return Err(NnError::ShapeMismatch(format!(
                "conv input {:?} with c_in={c_in} l_in={l_in} k={k}",
                xv.shape()
            )));
        }
        let filters = wv.rows();
        if wv.cols() != c_in * k || bv.shape() != (1, filters) {
            return Err(NnError::ShapeMismatch(format!(
                "conv kernels {:?} bias {:?} with c_in={c_in} k={k}",
                wv.shape(),
                bv.shape()
            )));
        }
        let l_out = (l_in - k) / stride + 1;
        let batch = xv.rows();
        let mut value = Tensor::zeros(batch, filters * l_out);
        for bi in 0..batch {
            let row = xv.row(bi);
            for f in 0..filters {
                let kernel = wv.row(f);
                let bias = bv.data()[f];
                for t in 0..l_out {
                    let start = t * stride;
                    let mut acc = bias;
                    for c in 0..c_in {
                        let xs = &row[c * l_in + start..c * l_in + start + k];
                        let ws = &kernel[c * k..(c + 1) * k];
                        for (xv_, wv_) in xs.iter().zip(ws) {
                            acc += xv_ * wv_;
                        }
                    }
                    value.set(bi, f * l_out + t, acc);
                }
            }
        }
        Ok(self.push(value, Op::Conv1d { x, w, b, c_in, l_in, k, stride }))
    }

    /// Mean categorical cross-entropy of softmax(logits) against integer
    /// targets, as a 1×1 node. Probabilities are floored at 1e-12 before
    /// the log; the backward pass uses the exact (p - y)/batch gradient.
    pub fn softmax_xent(&mut self, logits: NodeId, targets: Vec<usize>) -> Result<NodeId, NnError> {
        let lv = self.value(logits);
        let (batch, n_classes) = lv.shape();
        if targets.len() != batch {
            return Err(NnError::ShapeMismatch(format!(
                "{} targets for batch of {batch}",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n_classes) {
            return Err(NnError::ShapeMismatch(format!(
                "target class {bad} out of range for {n_classes} classes"
            )));
        }
        let probs = softmax_rows(lv);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            loss -= probs.get(i, t).max(PROB_FLOOR).ln();
        }
        loss /= batch as f64;
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxXent { logits, probs, targets }))
    }

    /// Reverse sweep from `root` (typically the 1×1 loss), returning the
    /// gradient of root w.r.t. every node that influences it.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(
            self.nodes[root.0].value.rows(),
            self.nodes[root.0].value.cols(),
            1.0,
        ));

        for idx in (0..=root.0).rev() {
            let Some(grad) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                // Leaf gradients are the sweep's output: put them back.
                // Interior gradients are dropped once consumed.
                Op::Leaf => grads[idx] = Some(grad),
                Op::MatMul(a, b) => {
                    let da = grad.matmul_nt(self.value(*b));
                    let db = self.value(*a).matmul_tn(&grad);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddBias(x, b) => {
                    let n = grad.cols();
                    let mut db = Tensor::zeros(1, n);
                    for row in grad.data().chunks_exact(n) {
                        for (o, &g) in db.data_mut().iter_mut().zip(row) {
                            *o += g;
                        }
                    }
                    accumulate(&mut grads, *b, db);
                    accumulate(&mut grads, *x, grad);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, grad.clone());
                    accumulate(&mut grads, *b, grad);
                }
                Op::Sub(a, b) => {
                    let mut neg = grad.clone();
                    for v in neg.data_mut() {
                        *v = -*v;
                    }
                    accumulate(&mut grads, *a, grad);
                    accumulate(&mut grads, *b, neg);
                }
                Op::Mul(a, b) => {
                    let mut da = grad.clone();
                    for (o, &v) in da.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *o *= v;
                    }
                    let mut db = grad;
                    for (o, &v) in db.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *o *= v;
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Sigmoid(x) => {
                    let mut dx = grad;
                    for (o, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        *o *= y * (1.0 - y);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Tanh(x) => {
                    let mut dx = grad;
                    for (o, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        *o *= 1.0 - y * y;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Relu(x) => {
                    let mut dx = grad;
                    for (o, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        if y <= 0.0 {
                            *o = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Dropout(x, mask) => {
                    let mut dx = grad;
                    for (o, &m) in dx.data_mut().iter_mut().zip(mask.data()) {
                        *o *= m;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ColSelect(x, cols) => {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    for i in 0..grad.rows() {
                        for (j, &c) in cols.iter().enumerate() {
                            let v = dx.get(i, c) + grad.get(i, j);
                            dx.set(i, c, v);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatCols(a, b) => {
                    let n_a = self.value(*a).cols();
                    let n_b = self.value(*b).cols();
                    let rows = grad.rows();
                    let mut da = Tensor::zeros(rows, n_a);
                    let mut db = Tensor::zeros(rows, n_b);
                    for i in 0..rows {
                        let row = grad.row(i);
                        da.data_mut()[i * n_a..(i + 1) * n_a].copy_from_slice(&row[..n_a]);
                        db.data_mut()[i * n_b..(i + 1) * n_b].copy_from_slice(&row[n_a..]);
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Conv1d { x, w, b, c_in, l_in, k, stride } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let filters = wv.rows();
                    let l_out = (l_in - k) / stride + 1;
                    let batch = xv.rows();
                    let mut dx = Tensor::zeros(batch, c_in * l_in);
                    let mut dw = Tensor::zeros(filters, c_in * k);
                    let mut db = Tensor::zeros(1, filters);
                    for bi in 0..batch {
                        let x_row = xv.row(bi);
                        let g_row = grad.row(bi);
                        for f in 0..filters {
                            let kernel = wv.row(f);
                            for t in 0..l_out {
                                let g = g_row[f * l_out + t];
                                if g == 0.0 {
                                    continue;
                                }
                                db.data_mut()[f] += g;
                                let start = t * stride;
                                for c in 0..*c_in {
                                    let xo = c * l_in + start;
                                    let wo = c * k;
                                    for j in 0..*k {
                                        dx.data_mut()[bi * (c_in * l_in) + xo + j] +=
                                            g * kernel[wo + j];
                                        dw.data_mut()[f * (c_in * k) + wo + j] += g * x_row[xo + j];
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::SoftmaxXent { logits, probs, targets } => {
                    let scale = grad.get(0, 0) / targets.len() as f64;
                    let mut dl = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        let v = dl.get(i, t) - 1.0;
                        dl.set(i, t, v);
                    }
                    for v in dl.data_mut() {
                        *v *= scale;
                    }
                    accumulate(&mut grads, *logits, dl);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
    match &mut grads[id.0] {
        Some(g) => {
            for (o, &v) in g.data_mut().iter_mut().zip(delta.data()) {
                *o += v;
            }
        }
        slot => *slot = Some(delta),
    }
}

/// Row-wise softmax with max subtraction for numerical stability.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    let n = out.cols();
    for row in out.data_mut().chunks_exact_mut(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean cross-entropy of already-normalized probability rows against
/// integer targets, with the same 1e-12 floor the training loss uses.
pub fn cross_entropy_from_probs(probs: &Tensor, targets: &[usize]) -> Result<f64, NnError> {
    if probs.rows() != targets.len() {
        return Err(NnError::ShapeMismatch(format!(
            "{} targets for {} probability rows",
            targets.len(),
            probs.rows()
        )));
    }
    if targets.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= probs.cols() {
            return Err(NnError::ShapeMismatch(format!(
                "target class {t} out of range for {} classes",
                probs.cols()
            )));
        }
        loss -= probs.get(i, t).max(PROB_FLOOR).ln();
    }
    Ok(loss / targets.len() as f64)
}

/// Row-wise argmax; ties resolve to the lowest index.
pub fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    let n = probs.cols();
    probs
        .data()
        .chunks_exact(n)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
