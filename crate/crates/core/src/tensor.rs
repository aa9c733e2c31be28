//! Dense 2-D matrices with tape-based reverse-mode differentiation.
//!
//! Every loss in the library is assembled from the operations here. The
//! design is deliberately small: row-major `f64` storage, an append-only
//! tape whose creation order is a valid topological order, and explicit
//! backward rules per operation. Reductions run in sequential row-major
//! order so results are bit-reproducible.
//!
//! Interior gradients are consumed by each backward sweep; leaf gradients
//! accumulate across repeated `backward` calls until [`Tape::zero_grads`]
//! is invoked. Training code rebuilds a fresh tape per step instead of
//! resetting.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{GvqError, Result};

/// Plain value matrix used for storage outside the tape (parameters,
/// features, codebooks, optimizer state).
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must be rows*cols");
        Mat { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Elementwise nonlinearities available to [`Tape::activation`] and the
/// encoder configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Elu,
    Sigmoid,
    Exp,
    Log,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp() - 1.0
                }
            }
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Exp => x.exp(),
            Activation::Log => x.ln(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed from input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Exp => y,
            Activation::Log => 1.0 / x,
            Activation::Identity => 1.0,
        }
    }
}

/// Neighbor aggregation modes for [`Tape::aggregate_neighbors`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggKind {
    Mean,
    Sum,
    Max,
}

/// Handle to a node on a [`Tape`]; cheap to copy, tied to its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    id: usize,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddRowVec(usize, usize),
    MulRowVec(usize, usize),
    Act(usize, Activation),
    SoftmaxRows(usize, f64),
    LogSoftmaxRows(usize),
    PairwiseSqDist(usize, usize),
    StopGrad,
    SumAll(usize),
    Transpose(usize),
    GatherRows(usize, Rc<Vec<usize>>),
    RowL2Normalize(usize),
    Aggregate(usize, Rc<Vec<Vec<u32>>>, AggKind, Vec<u32>),
    PairDots(usize, Rc<Vec<(u32, u32)>>),
    SegLse(usize, Rc<Vec<(u32, u32)>>),
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    grad: Vec<f64>,
    has_grad: bool,
    needs_grad: bool,
    op: Op,
}

/// Append-only computation record. Node creation order is a topological
/// order, so backward is a single reverse scan.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, rows: usize, cols: usize, value: Vec<f64>, needs_grad: bool, op: Op) -> Tensor {
        debug_assert_eq!(value.len(), rows * cols);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            rows,
            cols,
            grad: vec![0.0; value.len()],
            value,
            has_grad: false,
            needs_grad,
            op,
        });
        Tensor { id: nodes.len() - 1 }
    }

    fn needs(&self, t: Tensor) -> bool {
        self.nodes.borrow()[t.id].needs_grad
    }

    /// New leaf from a value matrix; `requires_grad` marks it as a trainable
    /// input whose gradient is wanted.
    pub fn leaf(&self, m: &Mat, requires_grad: bool) -> Tensor {
        self.push(m.rows, m.cols, m.data.clone(), requires_grad, Op::Leaf)
    }

    /// Leaf that participates in forward only.
    pub fn constant(&self, m: &Mat) -> Tensor {
        self.leaf(m, false)
    }

    pub fn shape(&self, t: Tensor) -> (usize, usize) {
        let nodes = self.nodes.borrow();
        (nodes[t.id].rows, nodes[t.id].cols)
    }

    /// Borrow of the forward value.
    pub fn value(&self, t: Tensor) -> Ref<'_, [f64]> {
        Ref::map(self.nodes.borrow(), |n| n[t.id].value.as_slice())
    }

    /// Copy of the forward value as a [`Mat`].
    pub fn to_mat(&self, t: Tensor) -> Mat {
        let nodes = self.nodes.borrow();
        let n = &nodes[t.id];
        Mat { rows: n.rows, cols: n.cols, data: n.value.clone() }
    }

    /// Copy of the accumulated gradient as a [`Mat`].
    pub fn grad(&self, t: Tensor) -> Mat {
        let nodes = self.nodes.borrow();
        let n = &nodes[t.id];
        Mat { rows: n.rows, cols: n.cols, data: n.grad.clone() }
    }

    /// Scalar value of a 1x1 tensor.
    pub fn scalar(&self, t: Tensor) -> Result<f64> {
        let nodes = self.nodes.borrow();
        let n = &nodes[t.id];
        if n.rows * n.cols != 1 {
            return Err(GvqError::Contract(format!(
                "expected scalar tensor, got {}x{}",
                n.rows, n.cols
            )));
        }
        Ok(n.value[0])
    }

    /// Reset all gradients to zero (accumulation otherwise persists across
    /// backward calls).
    pub fn zero_grads(&self) {
        let mut nodes = self.nodes.borrow_mut();
        for n in nodes.iter_mut() {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
            n.has_grad = false;
        }
    }

    // ---- forward ops ----

    pub fn matmul(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(GvqError::dim("matmul", (ar, ac), (br, bc)));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.id].value;
            let bv = &nodes[b.id].value;
            let mut out = vec![0.0; ar * bc];
            for i in 0..ar {
                for k in 0..ac {
                    let aik = av[i * ac + k];
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = &bv[k * bc..(k + 1) * bc];
                    let orow = &mut out[i * bc..(i + 1) * bc];
                    for j in 0..bc {
                        orow[j] += aik * brow[j];
                    }
                }
            }
            out
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(ar, bc, value, ng, Op::MatMul(a.id, b.id)))
    }

    fn elementwise(&self, a: Tensor, b: Tensor, name: &'static str, f: impl Fn(f64, f64) -> f64, op: impl Fn(usize, usize) -> Op) -> Result<Tensor> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(GvqError::dim(name, sa, sb));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.id].value;
            let bv = &nodes[b.id].value;
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(sa.0, sa.1, value, ng, op(a.id, b.id)))
    }

    pub fn add(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&self, a: Tensor, s: f64) -> Tensor {
        let (r, c) = self.shape(a);
        let value: Vec<f64> = self.value(a).iter().map(|&x| x * s).collect();
        let ng = self.needs(a);
        self.push(r, c, value, ng, Op::Scale(a.id, s))
    }

    pub fn add_scalar(&self, a: Tensor, s: f64) -> Tensor {
        let (r, c) = self.shape(a);
        let value: Vec<f64> = self.value(a).iter().map(|&x| x + s).collect();
        let ng = self.needs(a);
        self.push(r, c, value, ng, Op::AddScalar(a.id))
    }

    /// Broadcast-add a 1xd row vector to every row of an nxd matrix.
    pub fn add_rowvec(&self, a: Tensor, r: Tensor) -> Result<Tensor> {
        let (ar, ac) = self.shape(a);
        let (rr, rc) = self.shape(r);
        if rr != 1 || rc != ac {
            return Err(GvqError::dim("add_rowvec", (ar, ac), (rr, rc)));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.id].value;
            let rv = &nodes[r.id].value;
            let mut out = av.clone();
            for i in 0..ar {
                for j in 0..ac {
                    out[i * ac + j] += rv[j];
                }
            }
            out
        };
        let ng = self.needs(a) || self.needs(r);
        Ok(self.push(ar, ac, value, ng, Op::AddRowVec(a.id, r.id)))
    }

    /// Broadcast-multiply every row of an nxd matrix by a 1xd row vector.
    pub fn mul_rowvec(&self, a: Tensor, r: Tensor) -> Result<Tensor> {
        let (ar, ac) = self.shape(a);
        let (rr, rc) = self.shape(r);
        if rr != 1 || rc != ac {
            return Err(GvqError::dim("mul_rowvec", (ar, ac), (rr, rc)));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.id].value;
            let rv = &nodes[r.id].value;
            let mut out = av.clone();
            for i in 0..ar {
                for j in 0..ac {
                    out[i * ac + j] *= rv[j];
                }
            }
            out
        };
        let ng = self.needs(a) || self.needs(r);
        Ok(self.push(ar, ac, value, ng, Op::MulRowVec(a.id, r.id)))
    }

    /// Elementwise nonlinearity. `log` requires strictly positive inputs.
    pub fn activation(&self, a: Tensor, kind: Activation) -> Result<Tensor> {
        let (r, c) = self.shape(a);
        if kind == Activation::Log {
            if let Some(&bad) = self.value(a).iter().find(|v| **v <= 0.0) {
                return Err(GvqError::Domain(format!("log of non-positive value {bad}")));
            }
        }
        let value: Vec<f64> = self.value(a).iter().map(|&x| kind.apply(x)).collect();
        let ng = self.needs(a);
        Ok(self.push(r, c, value, ng, Op::Act(a.id, kind)))
    }

    /// Row-wise softmax of `a / temperature`, computed with max-subtraction.
    pub fn softmax_rows(&self, a: Tensor, temperature: f64) -> Result<Tensor> {
        if !(temperature > 0.0) {
            return Err(GvqError::Param(format!(
                "softmax temperature must be > 0, got {temperature}"
            )));
        }
        let (r, c) = self.shape(a);
        let value = {
            let v = self.value(a);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let row = &v[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..c {
                    let e = ((row[j] - m) / temperature).exp();
                    out[i * c + j] = e;
                    sum += e;
                }
                for j in 0..c {
                    out[i * c + j] /= sum;
                }
            }
            out
        };
        let ng = self.needs(a);
        Ok(self.push(r, c, value, ng, Op::SoftmaxRows(a.id, temperature)))
    }

    /// Row-wise log-softmax (unit temperature), stable under large inputs.
    pub fn log_softmax_rows(&self, a: Tensor) -> Tensor {
        let (r, c) = self.shape(a);
        let value = {
            let v = self.value(a);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let row = &v[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
                for j in 0..c {
                    out[i * c + j] = row[j] - lse;
                }
            }
            out
        };
        let ng = self.needs(a);
        self.push(r, c, value, ng, Op::LogSoftmaxRows(a.id))
    }

    /// All-pairs squared Euclidean distances: out[i][j] = ||a_i - b_j||^2.
    pub fn pairwise_sq_dist(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != bc {
            return Err(GvqError::dim("pairwise_sq_dist", (ar, ac), (br, bc)));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.id].value;
            let bv = &nodes[b.id].value;
            let mut out = vec![0.0; ar * br];
            for i in 0..ar {
                for j in 0..br {
                    let mut s = 0.0;
                    for k in 0..ac {
                        let d = av[i * ac + k] - bv[j * bc + k];
                        s += d * d;
                    }
                    out[i * br + j] = s;
                }
            }
            out
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(ar, br, value, ng, Op::PairwiseSqDist(a.id, b.id)))
    }

    /// Forward identity that blocks all gradient flow into `a`.
    pub fn stop_gradient(&self, a: Tensor) -> Tensor {
        let (r, c) = self.shape(a);
        let value = self.value(a).to_vec();
        self.push(r, c, value, false, Op::StopGrad)
    }

    /// Sum of all entries, as a 1x1 tensor.
    pub fn sum_all(&self, a: Tensor) -> Tensor {
        let value = vec![self.value(a).iter().sum()];
        let ng = self.needs(a);
        self.push(1, 1, value, ng, Op::SumAll(a.id))
    }

    /// Mean of all entries, as a 1x1 tensor.
    pub fn mean_all(&self, a: Tensor) -> Tensor {
        let (r, c) = self.shape(a);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / (r * c) as f64)
    }

    pub fn transpose(&self, a: Tensor) -> Tensor {
        let (r, c) = self.shape(a);
        let value = {
            let v = self.value(a);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = v[i * c + j];
                }
            }
            out
        };
        let ng = self.needs(a);
        self.push(c, r, value, ng, Op::Transpose(a.id))
    }

    /// Row gather: out row i = a[idx[i]]. Backward scatter-adds, so a row
    /// selected multiple times accumulates all its gradients.
    pub fn gather_rows(&self, a: Tensor, idx: &[usize]) -> Result<Tensor> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(GvqError::Contract(format!(
                "gather_rows index {bad} out of range for {r} rows"
            )));
        }
        let value = {
            let v = self.value(a);
            let mut out = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                out.extend_from_slice(&v[i * c..(i + 1) * c]);
            }
            out
        };
        let ng = self.needs(a);
        Ok(self.push(idx.len(), c, value, ng, Op::GatherRows(a.id, Rc::new(idx.to_vec()))))
    }

    /// L2-normalize each row. Rows with norm below 1e-12 are mapped to zero
    /// and receive zero gradient.
    pub fn row_l2_normalize(&self, a: Tensor) -> Tensor {
        let (r, c) = self.shape(a);
        let value = {
            let v = self.value(a);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let row = &v[i * c..(i + 1) * c];
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n >= 1e-12 {
                    for j in 0..c {
                        out[i * c + j] = row[j] / n;
                    }
                }
            }
            out
        };
        let ng = self.needs(a);
        self.push(r, c, value, ng, Op::RowL2Normalize(a.id))
    }

    /// Per-node neighbor aggregation: out row v = AGG over u in adj[v] of
    /// a row u. Empty neighborhoods produce a zero row.
    pub fn aggregate_neighbors(&self, a: Tensor, adj: &Rc<Vec<Vec<u32>>>, kind: AggKind) -> Result<Tensor> {
        let (r, c) = self.shape(a);
        if adj.len() != r {
            return Err(GvqError::Contract(format!(
                "adjacency has {} rows but tensor has {r}",
                adj.len()
            )));
        }
        let mut argmax = Vec::new();
        let value = {
            let v = self.value(a);
            let mut out = vec![0.0; r * c];
            match kind {
                AggKind::Mean | AggKind::Sum => {
                    for (i, nbrs) in adj.iter().enumerate() {
                        if nbrs.is_empty() {
                            continue;
                        }
                        let orow = &mut out[i * c..(i + 1) * c];
                        for &u in nbrs {
                            let urow = &v[u as usize * c..(u as usize + 1) * c];
                            for j in 0..c {
                                orow[j] += urow[j];
                            }
                        }
                        if kind == AggKind::Mean {
                            let inv = 1.0 / nbrs.len() as f64;
                            orow.iter_mut().for_each(|x| *x *= inv);
                        }
                    }
                }
                AggKind::Max => {
                    argmax = vec![0u32; r * c];
                    for (i, nbrs) in adj.iter().enumerate() {
                        if nbrs.is_empty() {
                            continue;
                        }
                        let orow = &mut out[i * c..(i + 1) * c];
                        orow.iter_mut().for_each(|x| *x = f64::NEG_INFINITY);
                        for &u in nbrs {
                            let urow = &v[u as usize * c..(u as usize + 1) * c];
                            for j in 0..c {
                                if urow[j] > orow[j] {
                                    orow[j] = urow[j];
                                    argmax[i * c + j] = u;
                                }
                            }
                        }
                    }
                }
            }
            out
        };
        let ng = self.needs(a);
        Ok(self.push(r, c, value, ng, Op::Aggregate(a.id, Rc::clone(adj), kind, argmax)))
    }

    /// Row dot products for an explicit pair list: out[m] = a[u_m] . a[w_m].
    pub fn pair_dots(&self, a: Tensor, pairs: &Rc<Vec<(u32, u32)>>) -> Result<Tensor> {
        let (r, c) = self.shape(a);
        if let Some(&(u, w)) = pairs.iter().find(|&&(u, w)| u as usize >= r || w as usize >= r) {
            return Err(GvqError::Contract(format!(
                "pair ({u}, {w}) out of range for {r} rows"
            )));
        }
        let value = {
            let v = self.value(a);
            pairs
                .iter()
                .map(|&(u, w)| {
                    let ur = &v[u as usize * c..(u as usize + 1) * c];
                    let wr = &v[w as usize * c..(w as usize + 1) * c];
                    ur.iter().zip(wr).map(|(&x, &y)| x * y).sum()
                })
                .collect()
        };
        let ng = self.needs(a);
        Ok(self.push(pairs.len(), 1, value, ng, Op::PairDots(a.id, Rc::clone(pairs))))
    }

    /// Segmented log-sum-exp over a column vector: out[s] = lse(a[start..end])
    /// for each (start, end) segment. Stable under max-subtraction.
    pub fn seg_lse(&self, a: Tensor, segments: &Rc<Vec<(u32, u32)>>) -> Result<Tensor> {
        let (r, c) = self.shape(a);
        if c != 1 {
            return Err(GvqError::Contract(format!("seg_lse expects a column vector, got {r}x{c}")));
        }
        for &(s, e) in segments.iter() {
            if s >= e || e as usize > r {
                return Err(GvqError::Contract(format!("bad segment [{s}, {e}) for {r} entries")));
            }
        }
        let value = {
            let v = self.value(a);
            segments
                .iter()
                .map(|&(s, e)| {
                    let seg = &v[s as usize..e as usize];
                    let m = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    m + seg.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
                })
                .collect()
        };
        let ng = self.needs(a);
        Ok(self.push(segments.len(), 1, value, ng, Op::SegLse(a.id, Rc::clone(segments))))
    }

    // ---- backward ----

    /// Reverse-mode sweep from a scalar loss. Gradients of `requires_grad`
    /// leaves (and intermediates) accumulate into their `grad` buffers.
    pub fn backward(&self, loss: Tensor) -> Result<()> {
        {
            let nodes = self.nodes.borrow();
            let n = &nodes[loss.id];
            if n.rows * n.cols != 1 {
                return Err(GvqError::Contract(format!(
                    "backward requires a scalar loss, got {}x{}",
                    n.rows, n.cols
                )));
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes[loss.id].grad[0] += 1.0;
        nodes[loss.id].has_grad = true;

        for id in (0..=loss.id).rev() {
            if !nodes[id].has_grad || !nodes[id].needs_grad {
                continue;
            }
            if matches!(nodes[id].op, Op::Leaf | Op::StopGrad) {
                continue;
            }
            // Take the node's gradient and op out, scatter to parents, put back.
            let gy = std::mem::take(&mut nodes[id].grad);

            macro_rules! acc {
                ($nodes:expr, $pid:expr, $idx:expr, $val:expr) => {{
                    let p = &mut $nodes[$pid];
                    if p.needs_grad {
                        p.grad[$idx] += $val;
                        p.has_grad = true;
                    }
                }};
            }

            let op = std::mem::replace(&mut nodes[id].op, Op::Leaf);
            match &op {
                Op::Leaf | Op::StopGrad => unreachable!(),
                Op::MatMul(a, b) => {
                    let (ar, ac) = (nodes[*a].rows, nodes[*a].cols);
                    let bc = nodes[*b].cols;
                    if nodes[*a].needs_grad {
                        let bv = nodes[*b].value.clone();
                        for i in 0..ar {
                            for k in 0..ac {
                                let mut s = 0.0;
                                for j in 0..bc {
                                    s += gy[i * bc + j] * bv[k * bc + j];
                                }
                                acc!(nodes, *a, i * ac + k, s);
                            }
                        }
                    }
                    if nodes[*b].needs_grad {
                        let av = nodes[*a].value.clone();
                        for k in 0..ac {
                            for j in 0..bc {
                                let mut s = 0.0;
                                for i in 0..ar {
                                    s += av[i * ac + k] * gy[i * bc + j];
                                }
                                acc!(nodes, *b, k * bc + j, s);
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for (i, &g) in gy.iter().enumerate() {
                        acc!(nodes, *a, i, g);
                    }
                    for (i, &g) in gy.iter().enumerate() {
                        acc!(nodes, *b, i, g);
                    }
                }
                Op::Sub(a, b) => {
                    for (i, &g) in gy.iter().enumerate() {
                        acc!(nodes, *a, i, g);
                    }
                    for (i, &g) in gy.iter().enumerate() {
                        acc!(nodes, *b, i, -g);
                    }
                }
                Op::Mul(a, b) => {
                    if nodes[*a].needs_grad {
                        let bv = nodes[*b].value.clone();
                        for (i, &g) in gy.iter().enumerate() {
                            acc!(nodes, *a, i, g * bv[i]);
                        }
                    }
                    if nodes[*b].needs_grad {
                        let av = nodes[*a].value.clone();
                        for (i, &g) in gy.iter().enumerate() {
                            acc!(nodes, *b, i, g * av[i]);
                        }
                    }
                }
                Op::Scale(a, s) => {
                    for (i, &g) in gy.iter().enumerate() {
                        acc!(nodes, *a, i, g * s);
                    }
                }
                Op::AddScalar(a) => {
                    for (i, &g) in gy.iter().enumerate() {
                        acc!(nodes, *a, i, g);
                    }
                }
                Op::AddRowVec(a, rv) => {
                    let c = nodes[*a].cols;
                    for (i, &g) in gy.iter().enumerate() {
                        acc!(nodes, *a, i, g);
                    }
                    if nodes[*rv].needs_grad {
                        let rows = nodes[*a].rows;
                        for j in 0..c {
                            let mut s = 0.0;
                            for i in 0..rows {
                                s += gy[i * c + j];
                            }
                            acc!(nodes, *rv, j, s);
                        }
                    }
                }
                Op::MulRowVec(a, rv) => {
                    let (rows, c) = (nodes[*a].rows, nodes[*a].cols);
                    if nodes[*a].needs_grad {
                        let rvv = nodes[*rv].value.clone();
                        for i in 0..rows {
                            for j in 0..c {
                                acc!(nodes, *a, i * c + j, gy[i * c + j] * rvv[j]);
                            }
                        }
                    }
                    if nodes[*rv].needs_grad {
                        let av = nodes[*a].value.clone();
                        for j in 0..c {
                            let mut s = 0.0;
                            for i in 0..rows {
                                s += gy[i * c + j] * av[i * c + j];
                            }
                            acc!(nodes, *rv, j, s);
                        }
                    }
                }
                Op::Act(a, kind) => {
                    if nodes[*a].needs_grad {
                        let xv = nodes[*a].value.clone();
                        let yv = nodes[id].value.clone();
                        for (i, &g) in gy.iter().enumerate() {
                            acc!(nodes, *a, i, g * kind.derivative(xv[i], yv[i]));
                        }
                    }
                }
                Op::SoftmaxRows(a, tau) => {
                    if nodes[*a].needs_grad {
                        let (rows, c) = (nodes[id].rows, nodes[id].cols);
                        let s = nodes[id].value.clone();
                        for i in 0..rows {
                            let mut dot = 0.0;
                            for j in 0..c {
                                dot += gy[i * c + j] * s[i * c + j];
                            }
                            for j in 0..c {
                                let g = s[i * c + j] * (gy[i * c + j] - dot) / tau;
                                acc!(nodes, *a, i * c + j, g);
                            }
                        }
                    }
                }
                Op::LogSoftmaxRows(a) => {
                    if nodes[*a].needs_grad {
                        let (rows, c) = (nodes[id].rows, nodes[id].cols);
                        let y = nodes[id].value.clone();
                        for i in 0..rows {
                            let gsum: f64 = gy[i * c..(i + 1) * c].iter().sum();
                            for j in 0..c {
                                let g = gy[i * c + j] - y[i * c + j].exp() * gsum;
                                acc!(nodes, *a, i * c + j, g);
                            }
                        }
                    }
                }
                Op::PairwiseSqDist(a, b) => {
                    let (ar, ac) = (nodes[*a].rows, nodes[*a].cols);
                    let br = nodes[*b].rows;
                    let av = nodes[*a].value.clone();
                    let bv = nodes[*b].value.clone();
                    if nodes[*a].needs_grad {
                        for i in 0..ar {
                            for j in 0..br {
                                let g = gy[i * br + j];
                                if g == 0.0 {
                                    continue;
                                }
                                for k in 0..ac {
                                    let d = av[i * ac + k] - bv[j * ac + k];
                                    acc!(nodes, *a, i * ac + k, 2.0 * g * d);
                                }
                            }
                        }
                    }
                    if nodes[*b].needs_grad {
                        for i in 0..ar {
                            for j in 0..br {
                                let g = gy[i * br + j];
                                if g == 0.0 {
                                    continue;
                                }
                                for k in 0..ac {
                                    let d = bv[j * ac + k] - av[i * ac + k];
                                    acc!(nodes, *b, j * ac + k, 2.0 * g * d);
                                }
                            }
                        }
                    }
                }
                Op::SumAll(a) => {
                    let g = gy[0];
                    let len = nodes[*a].value.len();
                    for i in 0..len {
                        acc!(nodes, *a, i, g);
                    }
                }
                Op::Transpose(a) => {
                    if nodes[*a].needs_grad {
                        let (r, c) = (nodes[*a].rows, nodes[*a].cols);
                        for i in 0..r {
                            for j in 0..c {
                                acc!(nodes, *a, i * c + j, gy[j * r + i]);
                            }
                        }
                    }
                }
                Op::GatherRows(a, idx) => {
                    if nodes[*a].needs_grad {
                        let c = nodes[*a].cols;
                        for (out_i, &src) in idx.iter().enumerate() {
                            for j in 0..c {
                                acc!(nodes, *a, src * c + j, gy[out_i * c + j]);
                            }
                        }
                    }
                }
                Op::RowL2Normalize(a) => {
                    if nodes[*a].needs_grad {
                        let (rows, c) = (nodes[*a].rows, nodes[*a].cols);
                        let xv = nodes[*a].value.clone();
                        let yv = nodes[id].value.clone();
                        for i in 0..rows {
                            let xr = &xv[i * c..(i + 1) * c];
                            let n = xr.iter().map(|x| x * x).sum::<f64>().sqrt();
                            if n < 1e-12 {
                                continue;
                            }
                            let yr = &yv[i * c..(i + 1) * c];
                            let gr = &gy[i * c..(i + 1) * c];
                            let dot: f64 = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                            for j in 0..c {
                                acc!(nodes, *a, i * c + j, (gr[j] - yr[j] * dot) / n);
                            }
                        }
                    }
                }
                Op::Aggregate(a, adj, kind, argmax) => {
                    if nodes[*a].needs_grad {
                        let c = nodes[*a].cols;
                        match kind {
                            AggKind::Sum => {
                                for (v, nbrs) in adj.iter().enumerate() {
                                    for &u in nbrs {
                                        for j in 0..c {
                                            acc!(nodes, *a, u as usize * c + j, gy[v * c + j]);
                                        }
                                    }
                                }
                            }
                            AggKind::Mean => {
                                for (v, nbrs) in adj.iter().enumerate() {
                                    if nbrs.is_empty() {
                                        continue;
                                    }
                                    let inv = 1.0 / nbrs.len() as f64;
                                    for &u in nbrs {
                                        for j in 0..c {
                                            acc!(nodes, *a, u as usize * c + j, gy[v * c + j] * inv);
                                        }
                                    }
                                }
                            }
                            AggKind::Max => {
                                for (v, nbrs) in adj.iter().enumerate() {
                                    if nbrs.is_empty() {
                                        continue;
                                    }
                                    for j in 0..c {
                                        let u = argmax[v * c + j] as usize;
                                        acc!(nodes, *a, u * c + j, gy[v * c + j]);
                                    }
                                }
                            }
                        }
                    }
                }
                Op::PairDots(a, pairs) => {
                    if nodes[*a].needs_grad {
                        let c = nodes[*a].cols;
                        let av = nodes[*a].value.clone();
                        for (m, &(u, w)) in pairs.iter().enumerate() {
                            let g = gy[m];
                            if g == 0.0 {
                                continue;
                            }
                            let (u, w) = (u as usize, w as usize);
                            for j in 0..c {
                                acc!(nodes, *a, u * c + j, g * av[w * c + j]);
                            }
                            for j in 0..c {
                                acc!(nodes, *a, w * c + j, g * av[u * c + j]);
                            }
                        }
                    }
                }
                Op::SegLse(a, segments) => {
                    if nodes[*a].needs_grad {
                        let xv = nodes[*a].value.clone();
                        let yv = nodes[id].value.clone();
                        for (s, &(start, end)) in segments.iter().enumerate() {
                            let g = gy[s];
                            if g == 0.0 {
                                continue;
                            }
                            for i in start as usize..end as usize {
                                // softmax within segment = exp(x_i - lse)
                                acc!(nodes, *a, i, g * (xv[i] - yv[s]).exp());
                            }
                        }
                    }
                }
            }
            nodes[id].op = op;
            // Interior gradients are consumed by the sweep; only leaves (and
            // stop-gradient outputs, which are never processed) retain theirs,
            // giving leaf accumulation across repeated backward calls.
            let mut consumed = gy;
            consumed.iter_mut().for_each(|g| *g = 0.0);
            nodes[id].grad = consumed;
            nodes[id].has_grad = false;
        }
        Ok(())
    }
}

/// Max relative error between the tape gradient of `f` at `x` and central
/// finite differences with step `h`, per entry:
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn finite_diff_check<F>(f: F, x: &Mat, h: f64) -> Result<f64>
where
    F: Fn(&Tape, Tensor) -> Result<Tensor>,
{
    let tape = Tape::new();
    let xt = tape.leaf(x, true);
    let loss = f(&tape, xt)?;
    tape.backward(loss)?;
    let grad = tape.grad(xt);

    let eval = |m: &Mat| -> Result<f64> {
        let t = Tape::new();
        let xt = t.leaf(m, false);
        let l = f(&t, xt)?;
        t.scalar(l)
    };

    let mut max_rel = 0.0f64;
    let mut xp = x.clone();
    for i in 0..x.data.len() {
        let orig = xp.data[i];
        xp.data[i] = orig + h;
        let fp = eval(&xp)?;
        xp.data[i] = orig - h;
        let fm = eval(&xp)?;
        xp.data[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let analytic = grad.data[i];
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
