//! Define-by-run reverse-mode differentiation on a flat tape.
//!
//! Every forward primitive records one node; [`Tape::backward`] replays the
//! tape in reverse, accumulating exact analytic adjoints. The tape is rebuilt
//! every training step, so node ids never outlive the step that created them.
//!
//! All kernels reduce in a fixed sequential order, which makes gradients
//! bit-reproducible regardless of caller threading.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Copy, Clone, PartialEq, Eq, Hash, Debug)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf { trainable: bool },
    MatMul(NodeId, NodeId),
    BiasAdd(NodeId, NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    Log(NodeId),
    ClampMin(NodeId, f64),
    Sqrt(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    RowSum(NodeId),
    RowL2Normalize(NodeId),
    PairwiseSqDist(NodeId),
    GradScale(NodeId, f64),
    SliceRows(NodeId, usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of a scalar root with respect to tape leaves.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `id` if any path reached it (leaves only).
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a leaf that must have received one.
    pub fn wrt(&self, id: NodeId) -> &Tensor {
        self.get(id).expect("no gradient reached this leaf")
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Non-trainable leaf (data, masks, frozen parameters).
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf { trainable: false })
    }

    /// Trainable leaf; `backward` reports a gradient for it.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf { trainable: true })
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf { trainable: true })
    }

    // ---- primitives ------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for l in 0..k {
                let aval = ta.values()[i * k + l];
                let brow = &tb.values()[l * m..(l + 1) * m];
                let orow = &mut out[i * m..(i + 1) * m];
                for j in 0..m {
                    orow[j] += aval * brow[j];
                }
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b)))
    }

    /// Add a length-`m` bias vector to every row of an `n x m` matrix.
    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.shape().len() != 2 || tb.shape().len() != 1 || tx.cols() != tb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "bias_add",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (n, m) = (tx.rows(), tx.cols());
        let mut out = tx.values().to_vec();
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] += tb.values()[j];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::BiasAdd(x, bias)))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let out: Vec<f64> = t.values().iter().map(|&v| v.max(0.0)).collect();
        self.push(Tensor::from_parts(t.shape().to_vec(), out), Op::Relu(x))
    }

    /// Hinge `[t]_+`; same kernel as ReLU.
    pub fn hinge(&mut self, x: NodeId) -> NodeId {
        self.relu(x)
    }

    /// Row-wise softmax with max subtraction for stability.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(Error::InvalidShape {
                op: "softmax",
                shape: t.shape().to_vec(),
                msg: "expects a matrix".into(),
            });
        }
        let (n, m) = (t.rows(), t.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = t.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..m {
                let e = (row[j] - mx).exp();
                out[i * m + j] = e;
                sum += e;
            }
            for j in 0..m {
                out[i * m + j] /= sum;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Softmax(x)))
    }

    /// Elementwise natural log; rejects non-positive inputs (clamp first).
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let min = t.values().iter().cloned().fold(f64::INFINITY, f64::min);
        if min <= 0.0 {
            return Err(Error::NonPositiveLog { min });
        }
        let out: Vec<f64> = t.values().iter().map(|v| v.ln()).collect();
        Ok(self.push(Tensor::from_parts(t.shape().to_vec(), out), Op::Log(x)))
    }

    /// Elementwise `max(x, c)`. Subgradient convention: zero gradient where
    /// the clamp is active (`x <= c`).
    pub fn clamp_min(&mut self, x: NodeId, c: f64) -> NodeId {
        let t = self.value(x);
        let out: Vec<f64> = t.values().iter().map(|&v| v.max(c)).collect();
        self.push(Tensor::from_parts(t.shape().to_vec(), out), Op::ClampMin(x, c))
    }

    /// Elementwise square root; rejects non-positive inputs so the adjoint
    /// `g / (2 sqrt(x))` stays finite (clamp first).
    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let min = t.values().iter().cloned().fold(f64::INFINITY, f64::min);
        if min <= 0.0 {
            return Err(Error::InvalidShape {
                op: "sqrt",
                shape: t.shape().to_vec(),
                msg: format!("non-positive input {min}; clamp before sqrt"),
            });
        }
        let out: Vec<f64> = t.values().iter().map(|v| v.sqrt()).collect();
        Ok(self.push(Tensor::from_parts(t.shape().to_vec(), out), Op::Sqrt(x)))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let t = self.value(x);
        let out: Vec<f64> = t.values().iter().map(|v| v * factor).collect();
        self.push(Tensor::from_parts(t.shape().to_vec(), out), Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let t = self.value(x);
        let out: Vec<f64> = t.values().iter().map(|v| v + c).collect();
        self.push(Tensor::from_parts(t.shape().to_vec(), out), Op::AddScalar(x))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).values().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let s: f64 = t.values().iter().sum();
        let m = s / t.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    /// Sum each row of an `n x m` matrix into an `n x 1` column.
    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(Error::InvalidShape {
                op: "row_sum",
                shape: t.shape().to_vec(),
                msg: "expects a matrix".into(),
            });
        }
        let (n, m) = (t.rows(), t.cols());
        let mut out = vec![0.0; n];
        for i in 0..n {
            out[i] = t.row(i).iter().sum();
        }
        let _ = m;
        Ok(self.push(Tensor::from_parts(vec![n, 1], out), Op::RowSum(x)))
    }

    /// Normalize each row to unit L2 norm; zero rows pass through unchanged
    /// (zero gradient there).
    pub fn row_l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(Error::InvalidShape {
                op: "row_l2_normalize",
                shape: t.shape().to_vec(),
                msg: "expects a matrix".into(),
            });
        }
        let (n, m) = (t.rows(), t.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = t.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for j in 0..m {
                    out[i * m + j] = row[j] / norm;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::RowL2Normalize(x)))
    }

    /// Squared Euclidean distance between every pair of rows: `n x e -> n x n`.
    pub fn pairwise_sq_dist(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(Error::InvalidShape {
                op: "pairwise_sq_dist",
                shape: t.shape().to_vec(),
                msg: "expects a matrix".into(),
            });
        }
        let (n, e) = (t.rows(), t.cols());
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let (ri, rj) = (t.row(i), t.row(j));
                let mut d = 0.0;
                for k in 0..e {
                    let diff = ri[k] - rj[k];
                    d += diff * diff;
                }
                out[i * n + j] = d;
                out[j * n + i] = d;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, n], out), Op::PairwiseSqDist(x)))
    }

    /// Identity forward; backward multiplies the incoming gradient by
    /// `factor`. A gradient reversal layer is `grad_scale(x, -lambda)`.
    pub fn grad_scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let t = self.value(x).clone();
        self.push(t, Op::GradScale(x, factor))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let t = self.value(x);
        if t.shape().len() != 2 || start >= end || end > t.rows() {
            return Err(Error::InvalidShape {
                op: "slice_rows",
                shape: t.shape().to_vec(),
                msg: format!("invalid row range {start}..{end}"),
            });
        }
        let m = t.cols();
        let out = t.values()[start * m..end * m].to_vec();
        Ok(self.push(
            Tensor::from_parts(vec![end - start, m], out),
            Op::SliceRows(x, start, end),
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Exact gradients of the scalar `root` with respect to every leaf it
    /// depends on. Pure: repeated calls return identical results.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_val = self.value(root);
        if !root_val.is_scalar() {
            return Err(Error::NonScalarRoot {
                shape: root_val.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            match node.op {
                Op::Leaf { .. } => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(a), self.value(b));
                    let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                    {
                        let ga = self.acc(&mut grads, a);
                        for i in 0..n {
                            for l in 0..k {
                                let mut s = 0.0;
                                for j in 0..m {
                                    s += g[i * m + j] * tb.values()[l * m + j];
                                }
                                ga[i * k + l] += s;
                            }
                        }
                    }
                    {
                        let gb = self.acc(&mut grads, b);
                        for l in 0..k {
                            for j in 0..m {
                                let mut s = 0.0;
                                for i in 0..n {
                                    s += ta.values()[i * k + l] * g[i * m + j];
                                }
                                gb[l * m + j] += s;
                            }
                        }
                    }
                }
                Op::BiasAdd(x, b) => {
                    let (n, m) = {
                        let t = self.value(x);
                        (t.rows(), t.cols())
                    };
                    {
                        let gx = self.acc(&mut grads, x);
                        for (gi, gv) in gx.iter_mut().zip(&g) {
                            *gi += gv;
                        }
                    }
                    {
                        let gb = self.acc(&mut grads, b);
                        for i in 0..n {
                            for j in 0..m {
                                gb[j] += g[i * m + j];
                            }
                        }
                    }
                }
                Op::Relu(x) => {
                    let tx = self.value(x);
                    let gx = self.acc(&mut grads, x);
                    for (i, &v) in tx.values().iter().enumerate() {
                        if v > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                }
                Op::Softmax(x) => {
                    let p = &node.value;
                    let (n, m) = (p.rows(), p.cols());
                    let gx = self.acc(&mut grads, x);
                    for i in 0..n {
                        let prow = p.row(i);
                        let grow = &g[i * m..(i + 1) * m];
                        let dot: f64 = prow.iter().zip(grow).map(|(p, g)| p * g).sum();
                        for j in 0..m {
                            gx[i * m + j] += prow[j] * (grow[j] - dot);
                        }
                    }
                }
                Op::Log(x) => {
                    let tx = self.value(x);
                    let gx = self.acc(&mut grads, x);
                    for (i, &v) in tx.values().iter().enumerate() {
                        gx[i] += g[i] / v;
                    }
                }
                Op::ClampMin(x, c) => {
                    let tx = self.value(x);
                    let gx = self.acc(&mut grads, x);
                    for (i, &v) in tx.values().iter().enumerate() {
                        if v > c {
                            gx[i] += g[i];
                        }
                    }
                }
                Op::Sqrt(x) => {
                    let y = &node.value;
                    let gx = self.acc(&mut grads, x);
                    for (i, &yv) in y.values().iter().enumerate() {
                        gx[i] += g[i] * 0.5 / yv;
                    }
                }
                Op::Add(a, b) => {
                    {
                        let ga = self.acc(&mut grads, a);
                        for (gi, gv) in ga.iter_mut().zip(&g) {
                            *gi += gv;
                        }
                    }
                    let gb = self.acc(&mut grads, b);
                    for (gi, gv) in gb.iter_mut().zip(&g) {
                        *gi += gv;
                    }
                }
                Op::Sub(a, b) => {
                    {
                        let ga = self.acc(&mut grads, a);
                        for (gi, gv) in ga.iter_mut().zip(&g) {
                            *gi += gv;
                        }
                    }
                    let gb = self.acc(&mut grads, b);
                    for (gi, gv) in gb.iter_mut().zip(&g) {
                        *gi -= gv;
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
                    {
                        let ga = self.acc(&mut grads, a);
                        for i in 0..g.len() {
                            ga[i] += g[i] * tb.values()[i];
                        }
                    }
                    let gb = self.acc(&mut grads, b);
                    for i in 0..g.len() {
                        gb[i] += g[i] * ta.values()[i];
                    }
                }
                Op::Scale(x, f) => {
                    let gx = self.acc(&mut grads, x);
                    for i in 0..g.len() {
                        gx[i] += g[i] * f;
                    }
                }
                Op::AddScalar(x) => {
                    let gx = self.acc(&mut grads, x);
                    for (gi, gv) in gx.iter_mut().zip(&g) {
                        *gi += gv;
                    }
                }
                Op::Sum(x) => {
                    let gx = self.acc(&mut grads, x);
                    for gi in gx.iter_mut() {
                        *gi += g[0];
                    }
                }
                Op::Mean(x) => {
                    let n = self.value(x).numel() as f64;
                    let gx = self.acc(&mut grads, x);
                    for gi in gx.iter_mut() {
                        *gi += g[0] / n;
                    }
                }
                Op::RowSum(x) => {
                    let (n, m) = {
                        let t = self.value(x);
                        (t.rows(), t.cols())
                    };
                    let gx = self.acc(&mut grads, x);
                    for i in 0..n {
                        for j in 0..m {
                            gx[i * m + j] += g[i];
                        }
                    }
                }
                Op::RowL2Normalize(x) => {
                    let tx = self.value(x);
                    let y = &node.value;
                    let (n, m) = (tx.rows(), tx.cols());
                    let gx = self.acc(&mut grads, x);
                    for i in 0..n {
                        let xrow = tx.row(i);
                        let norm = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm == 0.0 {
                            continue;
                        }
                        let yrow = y.row(i);
                        let grow = &g[i * m..(i + 1) * m];
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                        for j in 0..m {
                            gx[i * m + j] += (grow[j] - yrow[j] * dot) / norm;
                        }
                    }
                }
                Op::PairwiseSqDist(x) => {
                    let tx = self.value(x);
                    let (n, e) = (tx.rows(), tx.cols());
                    let gx = self.acc(&mut grads, x);
                    for p in 0..n {
                        for j in 0..n {
                            if j == p {
                                continue;
                            }
                            let w = g[p * n + j] + g[j * n + p];
                            if w == 0.0 {
                                continue;
                            }
                            for k in 0..e {
                                gx[p * e + k] +=
                                    2.0 * w * (tx.values()[p * e + k] - tx.values()[j * e + k]);
                            }
                        }
                    }
                }
                Op::GradScale(x, f) => {
                    let gx = self.acc(&mut grads, x);
                    for i in 0..g.len() {
                        gx[i] += g[i] * f;
                    }
                }
                Op::SliceRows(x, start, _end) => {
                    let m = self.value(x).cols();
                    let gx = self.acc(&mut grads, x);
                    for (i, gv) in g.iter().enumerate() {
                        gx[start * m + i] += gv;
                    }
                }
            }
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| matches!(self.nodes[i].op, Op::Leaf { .. }))
                    .map(|v| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), v))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], id: NodeId) -> &'a mut Vec<f64> {
        let numel = self.nodes[id.0].value.numel();
        grads[id.0].get_or_insert_with(|| vec![0.0; numel])
    }
}
