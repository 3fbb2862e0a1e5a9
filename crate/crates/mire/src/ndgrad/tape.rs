//! Wengert tape: eager forward evaluation, reverse-order adjoint sweep.

use std::cell::RefCell;

use super::tensor::Tensor;
use super::NORM_EPS;
use crate::error::{Error, Result};

/// Handle to a node on a tape. Only meaningful with the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    /// a [m,k] * b [k,n]
    Matmul(Var, Var),
    /// a [m,k] * b^T for b [n,k]: pairwise row inner products when a == b
    Gram(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// elementwise product, same shape
    Mul(Var, Var),
    /// elementwise quotient, divisor must be nonzero
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// a [m,n] + row-broadcast bias [1,n]
    AddBias(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    /// row-wise stabilized log-sum-exp, [m,n] -> [m,1]
    RowLogSumExp(Var),
    /// row-wise v / ||v||
    NormalizeRows(Var),
    /// batch-all triplet hinge on a similarity matrix of unit embeddings
    TripletAllOnSims {
        sims: Var,
        labels: Vec<usize>,
        margin: f64,
    },
    /// log-sum formulation over ordered positive pairs on a similarity matrix
    NPairsOnSims { sims: Var, labels: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of one forward pass. Single-threaded by construction; build a fresh
/// tape per iteration instead of reusing graphs.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf (data, masks, constants).
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        self.nodes.borrow()[v.0].value.scalar_value()
    }

    fn binary_same_shape(&self, op_name: &'static str, a: Var, b: Var) -> Result<([usize; 2], bool)> {
        let nodes = self.nodes.borrow();
        let sa = nodes[a.0].value.shape();
        let sb = nodes[b.0].value.shape();
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: op_name,
                detail: format!("{sa:?} vs {sb:?}"),
            });
        }
        Ok((sa, nodes[a.0].requires_grad || nodes[b.0].requires_grad))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (_, rg) = self.binary_same_shape("add", a, b)?;
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            let data = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(x, y)| x + y)
                .collect();
            Tensor::new(va.rows(), va.cols(), data)?
        };
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (_, rg) = self.binary_same_shape("sub", a, b)?;
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            let data = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(x, y)| x - y)
                .collect();
            Tensor::new(va.rows(), va.cols(), data)?
        };
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (_, rg) = self.binary_same_shape("mul", a, b)?;
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            let data = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(x, y)| x * y)
                .collect();
            Tensor::new(va.rows(), va.cols(), data)?
        };
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let (_, rg) = self.binary_same_shape("div", a, b)?;
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            if let Some(i) = vb.data().iter().position(|&y| y == 0.0) {
                return Err(Error::Domain {
                    op: "div",
                    detail: format!("zero divisor at flat index {i}"),
                });
            }
            let data = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(x, y)| x / y)
                .collect();
            Tensor::new(va.rows(), va.cols(), data)?
        };
        Ok(self.push(value, Op::Div(a, b), rg))
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.0].value;
            let data = va.data().iter().map(|x| x * c).collect();
            (
                Tensor::new(va.rows(), va.cols(), data)?,
                nodes[a.0].requires_grad,
            )
        };
        Ok(self.push(value, Op::Scale(a, c), rg))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.0].value;
            let data = va.data().iter().map(|x| x + c).collect();
            (
                Tensor::new(va.rows(), va.cols(), data)?,
                nodes[a.0].requires_grad,
            )
        };
        Ok(self.push(value, Op::AddScalar(a), rg))
    }

    /// a [m,n] plus bias [1,n] broadcast over rows.
    pub fn add_bias(&self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            if vb.rows() != 1 || vb.cols() != va.cols() {
                return Err(Error::ShapeMismatch {
                    op: "add_bias",
                    detail: format!("{:?} + bias {:?}", va.shape(), vb.shape()),
                });
            }
            let mut data = Vec::with_capacity(va.numel());
            for r in 0..va.rows() {
                for c in 0..va.cols() {
                    data.push(va.get(r, c) + vb.get(0, c));
                }
            }
            (
                Tensor::new(va.rows(), va.cols(), data)?,
                nodes[a.0].requires_grad || nodes[b.0].requires_grad,
            )
        };
        Ok(self.push(value, Op::AddBias(a, b), rg))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k) = (va.rows(), va.cols());
            let (k2, n) = (vb.rows(), vb.cols());
            if k != k2 {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    detail: format!("[{m}, {k}] x [{k2}, {n}]"),
                });
            }
            let mut data = vec![0.0; m * n];
            for i in 0..m {
                for l in 0..k {
                    let ail = va.get(i, l);
                    let brow = vb.row_slice(l);
                    let orow = &mut data[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += ail * brow[j];
                    }
                }
            }
            (
                Tensor::new(m, n, data)?,
                nodes[a.0].requires_grad || nodes[b.0].requires_grad,
            )
        };
        Ok(self.push(value, Op::Matmul(a, b), rg))
    }

    /// Dot-product matrix a b^T: out[i][j] = <row_i(a), row_j(b)>.
    pub fn gram(&self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k) = (va.rows(), va.cols());
            let (n, k2) = (vb.rows(), vb.cols());
            if k != k2 {
                return Err(Error::ShapeMismatch {
                    op: "gram",
                    detail: format!("[{m}, {k}] x [{n}, {k2}]^T"),
                });
            }
            let mut data = vec![0.0; m * n];
            for i in 0..m {
                let arow = va.row_slice(i);
                for j in 0..n {
                    let brow = vb.row_slice(j);
                    let mut acc = 0.0;
                    for l in 0..k {
                        acc += arow[l] * brow[l];
                    }
                    data[i * n + j] = acc;
                }
            }
            (
                Tensor::new(m, n, data)?,
                nodes[a.0].requires_grad || nodes[b.0].requires_grad,
            )
        };
        Ok(self.push(value, Op::Gram(a, b), rg))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.0].value;
            let data = va.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
            (
                Tensor::new(va.rows(), va.cols(), data)?,
                nodes[a.0].requires_grad,
            )
        };
        Ok(self.push(value, Op::Relu(a), rg))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.0].value;
            let data = va.data().iter().map(|x| x.exp()).collect();
            (
                Tensor::new(va.rows(), va.cols(), data)?,
                nodes[a.0].requires_grad,
            )
        };
        Ok(self.push(value, Op::Exp(a), rg))
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.0].value;
            if let Some(i) = va.data().iter().position(|&x| x <= 0.0) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("non-positive input {} at flat index {i}", va.data()[i]),
                });
            }
            let data = va.data().iter().map(|x| x.ln()).collect();
            (
                Tensor::new(va.rows(), va.cols(), data)?,
                nodes[a.0].requires_grad,
            )
        };
        Ok(self.push(value, Op::Log(a), rg))
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.0].value;
            if let Some(i) = va.data().iter().position(|&x| x <= 0.0) {
                return Err(Error::Domain {
                    op: "sqrt",
                    detail: format!("non-positive input {} at flat index {i}", va.data()[i]),
                });
            }
            let data = va.data().iter().map(|x| x.sqrt()).collect();
            (
                Tensor::new(va.rows(), va.cols(), data)?,
                nodes[a.0].requires_grad,
            )
        };
        Ok(self.push(value, Op::Sqrt(a), rg))
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.0].value;
            (
                Tensor::scalar(va.data().iter().sum()),
                nodes[a.0].requires_grad,
            )
        };
        Ok(self.push(value, Op::Sum(a), rg))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.0].value;
            let n = va.numel() as f64;
            (
                Tensor::scalar(va.data().iter().sum::<f64>() / n),
                nodes[a.0].requires_grad,
            )
        };
        Ok(self.push(value, Op::Mean(a), rg))
    }

    /// Stabilized log(sum(exp(row))) per row; [m,n] -> [m,1].
    pub fn row_logsumexp(&self, a: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.0].value;
            let mut data = Vec::with_capacity(va.rows());
            for r in 0..va.rows() {
                data.push(row_lse(va.row_slice(r)));
            }
            (
                Tensor::new(va.rows(), 1, data)?,
                nodes[a.0].requires_grad,
            )
        };
        Ok(self.push(value, Op::RowLogSumExp(a), rg))
    }

    /// Row-wise projection to the unit sphere. Rows with ‖v‖ <= NORM_EPS are
    /// rejected; nothing is clamped.
    pub fn normalize_rows(&self, a: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.0].value;
            let mut data = Vec::with_capacity(va.numel());
            for r in 0..va.rows() {
                let row = va.row_slice(r);
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm <= NORM_EPS {
                    return Err(Error::DegenerateNorm {
                        row: r,
                        norm,
                        eps: NORM_EPS,
                    });
                }
                data.extend(row.iter().map(|x| x / norm));
            }
            (
                Tensor::new(va.rows(), va.cols(), data)?,
                nodes[a.0].requires_grad,
            )
        };
        Ok(self.push(value, Op::NormalizeRows(a), rg))
    }

    /// Batch-all triplet hinge over a similarity matrix of unit embeddings.
    /// On the unit sphere squared distance is 2 - 2s, so a triplet (a, p, n)
    /// contributes max(0, 2 s_an - 2 s_ap + margin); the loss is the mean
    /// over all valid triplets, 0 when none exist.
    pub fn triplet_all_on_sims(&self, sims: Var, labels: &[usize], margin: f64) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let s = &nodes[sims.0].value;
            check_sims_shape("triplet_all_on_sims", s, labels)?;
            let b = labels.len();
            let mut total = 0.0;
            let mut count = 0u64;
            for a in 0..b {
                for p in 0..b {
                    if p == a || labels[p] != labels[a] {
                        continue;
                    }
                    for n in 0..b {
                        if labels[n] == labels[a] {
                            continue;
                        }
                        count += 1;
                        let t = 2.0 * s.get(a, n) - 2.0 * s.get(a, p) + margin;
                        if t > 0.0 {
                            total += t;
                        }
                    }
                }
            }
            let v = if count == 0 { 0.0 } else { total / count as f64 };
            (Tensor::scalar(v), nodes[sims.0].requires_grad)
        };
        Ok(self.push(
            value,
            Op::TripletAllOnSims {
                sims,
                labels: labels.to_vec(),
                margin,
            },
            rg,
        ))
    }

    /// Log-sum formulation over ordered positive pairs (i, p):
    /// mean of log(1 + sum_{j: y_j != y_i} exp(s_ij - s_ip)), 0 with no pairs.
    pub fn n_pairs_on_sims(&self, sims: Var, labels: &[usize]) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let s = &nodes[sims.0].value;
            check_sims_shape("n_pairs_on_sims", s, labels)?;
            let b = labels.len();
            let mut total = 0.0;
            let mut pairs = 0u64;
            for i in 0..b {
                for p in 0..b {
                    if p == i || labels[p] != labels[i] {
                        continue;
                    }
                    pairs += 1;
                    let terms: Vec<f64> = (0..b)
                        .filter(|&j| labels[j] != labels[i])
                        .map(|j| s.get(i, j) - s.get(i, p))
                        .collect();
                    total += log1p_sum_exp(&terms);
                }
            }
            let v = if pairs == 0 { 0.0 } else { total / pairs as f64 };
            (Tensor::scalar(v), nodes[sims.0].requires_grad)
        };
        Ok(self.push(
            value,
            Op::NPairsOnSims {
                sims,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar root. Adjoint buffers exist only for nodes
    /// reached from the root that require gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root.0].value.shape();
        if root_shape != [1, 1] {
            return Err(Error::NonScalarRoot {
                shape: root_shape.to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            // reattach so callers can query this node's own gradient
            grads[id] = Some(gout.clone());
            if !nodes[id].requires_grad {
                continue;
            }
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&nodes, &mut grads, *a, |g| {
                        for (gi, go) in g.iter_mut().zip(&gout) {
                            *gi += go;
                        }
                    });
                    accumulate(&nodes, &mut grads, *b, |g| {
                        for (gi, go) in g.iter_mut().zip(&gout) {
                            *gi += go;
                        }
                    });
                }
                Op::Sub(a, b) => {
                    accumulate(&nodes, &mut grads, *a, |g| {
                        for (gi, go) in g.iter_mut().zip(&gout) {
                            *gi += go;
                        }
                    });
                    accumulate(&nodes, &mut grads, *b, |g| {
                        for (gi, go) in g.iter_mut().zip(&gout) {
                            *gi -= go;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[a.0].value.clone(), nodes[b.0].value.clone());
                    accumulate(&nodes, &mut grads, *a, |g| {
                        for i in 0..g.len() {
                            g[i] += gout[i] * vb.data()[i];
                        }
                    });
                    accumulate(&nodes, &mut grads, *b, |g| {
                        for i in 0..g.len() {
                            g[i] += gout[i] * va.data()[i];
                        }
                    });
                }
                Op::Div(a, b) => {
                    let (va, vb) = (nodes[a.0].value.clone(), nodes[b.0].value.clone());
                    accumulate(&nodes, &mut grads, *a, |g| {
                        for i in 0..g.len() {
                            g[i] += gout[i] / vb.data()[i];
                        }
                    });
                    accumulate(&nodes, &mut grads, *b, |g| {
                        for i in 0..g.len() {
                            let q = va.data()[i] / vb.data()[i];
                            g[i] -= gout[i] * q / vb.data()[i];
                        }
                    });
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&nodes, &mut grads, *a, |g| {
                        for (gi, go) in g.iter_mut().zip(&gout) {
                            *gi += go * c;
                        }
                    });
                }
                Op::AddScalar(a) => {
                    accumulate(&nodes, &mut grads, *a, |g| {
                        for (gi, go) in g.iter_mut().zip(&gout) {
                            *gi += go;
                        }
                    });
                }
                Op::AddBias(a, b) => {
                    let [m, n] = nodes[a.0].value.shape();
                    accumulate(&nodes, &mut grads, *a, |g| {
                        for (gi, go) in g.iter_mut().zip(&gout) {
                            *gi += go;
                        }
                    });
                    accumulate(&nodes, &mut grads, *b, |g| {
                        for r in 0..m {
                            for c in 0..n {
                                g[c] += gout[r * n + c];
                            }
                        }
                    });
                }
                Op::Matmul(a, b) => {
                    let (va, vb) = (nodes[a.0].value.clone(), nodes[b.0].value.clone());
                    let (m, k) = (va.rows(), va.cols());
                    let n = vb.cols();
                    accumulate(&nodes, &mut grads, *a, |g| {
                        for i in 0..m {
                            for j in 0..n {
                                let go = gout[i * n + j];
                                for l in 0..k {
                                    g[i * k + l] += go * vb.get(l, j);
                                }
                            }
                        }
                    });
                    accumulate(&nodes, &mut grads, *b, |g| {
                        for i in 0..m {
                            for j in 0..n {
                                let go = gout[i * n + j];
                                for l in 0..k {
                                    g[l * n + j] += go * va.get(i, l);
                                }
                            }
                        }
                    });
                }
                Op::Gram(a, b) => {
                    let (va, vb) = (nodes[a.0].value.clone(), nodes[b.0].value.clone());
                    let (m, k) = (va.rows(), va.cols());
                    let n = vb.rows();
                    accumulate(&nodes, &mut grads, *a, |g| {
                        for i in 0..m {
                            for j in 0..n {
                                let go = gout[i * n + j];
                                for l in 0..k {
                                    g[i * k + l] += go * vb.get(j, l);
                                }
                            }
                        }
                    });
                    accumulate(&nodes, &mut grads, *b, |g| {
                        for i in 0..m {
                            for j in 0..n {
                                let go = gout[i * n + j];
                                for l in 0..k {
                                    g[j * k + l] += go * va.get(i, l);
                                }
                            }
                        }
                    });
                }
                Op::Relu(a) => {
                    let va = nodes[a.0].value.clone();
                    accumulate(&nodes, &mut grads, *a, |g| {
                        for i in 0..g.len() {
                            if va.data()[i] > 0.0 {
                                g[i] += gout[i];
                            }
                        }
                    });
                }
                Op::Exp(a) => {
                    let out = node.value.clone();
                    accumulate(&nodes, &mut grads, *a, |g| {
                        for i in 0..g.len() {
                            g[i] += gout[i] * out.data()[i];
                        }
                    });
                }
                Op::Log(a) => {
                    let va = nodes[a.0].value.clone();
                    accumulate(&nodes, &mut grads, *a, |g| {
                        for i in 0..g.len() {
                            g[i] += gout[i] / va.data()[i];
                        }
                    });
                }
                Op::Sqrt(a) => {
                    let out = node.value.clone();
                    accumulate(&nodes, &mut grads, *a, |g| {
                        for i in 0..g.len() {
                            g[i] += gout[i] * 0.5 / out.data()[i];
                        }
                    });
                }
                Op::Sum(a) => {
                    accumulate(&nodes, &mut grads, *a, |g| {
                        for gi in g.iter_mut() {
                            *gi += gout[0];
                        }
                    });
                }
                Op::Mean(a) => {
                    let n = nodes[a.0].value.numel() as f64;
                    accumulate(&nodes, &mut grads, *a, |g| {
                        for gi in g.iter_mut() {
                            *gi += gout[0] / n;
                        }
                    });
                }
                Op::RowLogSumExp(a) => {
                    let va = nodes[a.0].value.clone();
                    let out = node.value.clone();
                    let (m, n) = (va.rows(), va.cols());
                    accumulate(&nodes, &mut grads, *a, |g| {
                        for r in 0..m {
                            let lse = out.data()[r];
                            for c in 0..n {
                                g[r * n + c] += gout[r] * (va.get(r, c) - lse).exp();
                            }
                        }
                    });
                }
                Op::NormalizeRows(a) => {
                    let va = nodes[a.0].value.clone();
                    let out = node.value.clone();
                    let (m, n) = (va.rows(), va.cols());
                    // d v = (d y - y <y, d y>) / ||v||
                    accumulate(&nodes, &mut grads, *a, |g| {
                        for r in 0..m {
                            let vrow = va.row_slice(r);
                            let yrow = out.row_slice(r);
                            let norm = vrow.iter().map(|x| x * x).sum::<f64>().sqrt();
                            let dot: f64 = (0..n).map(|c| yrow[c] * gout[r * n + c]).sum();
                            for c in 0..n {
                                g[r * n + c] += (gout[r * n + c] - yrow[c] * dot) / norm;
                            }
                        }
                    });
                }
                Op::TripletAllOnSims {
                    sims,
                    labels,
                    margin,
                } => {
                    let s = nodes[sims.0].value.clone();
                    let b = labels.len();
                    let labels = labels.clone();
                    let margin = *margin;
                    let mut count = 0u64;
                    for a in 0..b {
                        for p in 0..b {
                            if p == a || labels[p] != labels[a] {
                                continue;
                            }
                            for n in 0..b {
                                if labels[n] != labels[a] {
                                    count += 1;
                                }
                            }
                        }
                    }
                    if count > 0 {
                        let w = gout[0] / count as f64;
                        accumulate(&nodes, &mut grads, *sims, |g| {
                            for a in 0..b {
                                for p in 0..b {
                                    if p == a || labels[p] != labels[a] {
                                        continue;
                                    }
                                    for n in 0..b {
                                        if labels[n] == labels[a] {
                                            continue;
                                        }
                                        let t = 2.0 * s.get(a, n) - 2.0 * s.get(a, p) + margin;
                                        if t > 0.0 {
                                            g[a * b + n] += 2.0 * w;
                                            g[a * b + p] -= 2.0 * w;
                                        }
                                    }
                                }
                            }
                        });
                    }
                }
                Op::NPairsOnSims { sims, labels } => {
                    let s = nodes[sims.0].value.clone();
                    let b = labels.len();
                    let labels = labels.clone();
                    let mut pairs = 0u64;
                    for i in 0..b {
                        for p in 0..b {
                            if p != i && labels[p] == labels[i] {
                                pairs += 1;
                            }
                        }
                    }
                    if pairs > 0 {
                        let w = gout[0] / pairs as f64;
                        accumulate(&nodes, &mut grads, *sims, |g| {
                            for i in 0..b {
                                let negs: Vec<usize> =
                                    (0..b).filter(|&j| labels[j] != labels[i]).collect();
                                for p in 0..b {
                                    if p == i || labels[p] != labels[i] {
                                        continue;
                                    }
                                    // softmax weights of log(1 + sum exp(x_j))
                                    let xs: Vec<f64> =
                                        negs.iter().map(|&j| s.get(i, j) - s.get(i, p)).collect();
                                    let m = xs.iter().fold(0.0f64, |acc, &x| acc.max(x));
                                    let denom = (-m).exp()
                                        + xs.iter().map(|x| (x - m).exp()).sum::<f64>();
                                    let mut wsum = 0.0;
                                    for (idx, &j) in negs.iter().enumerate() {
                                        let wj = (xs[idx] - m).exp() / denom;
                                        g[i * b + j] += w * wj;
                                        wsum += wj;
                                    }
                                    g[i * b + p] -= w * wsum;
                                }
                            }
                        });
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Adjoints from one backward sweep, queried by node handle.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `v`, if `v` required a
    /// gradient and was reached from the root.
    pub fn get(&self, tape: &Tape, v: Var) -> Option<Tensor> {
        if !tape.needs_grad(v) {
            return None;
        }
        self.grads[v.0].as_ref().map(|g| {
            let [r, c] = tape.shape(v);
            Tensor::new(r, c, g.clone()).expect("adjoint matches node shape")
        })
    }
}

fn accumulate(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    target: Var,
    apply: impl FnOnce(&mut Vec<f64>),
) {
    if !nodes[target.0].requires_grad {
        return;
    }
    let buf = grads[target.0]
        .get_or_insert_with(|| vec![0.0; nodes[target.0].value.numel()]);
    apply(buf);
}

fn check_sims_shape(op: &'static str, s: &Tensor, labels: &[usize]) -> Result<()> {
    let b = labels.len();
    if s.rows() != b || s.cols() != b {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("similarity matrix {:?} vs {b} labels", s.shape()),
        });
    }
    Ok(())
}

fn row_lse(row: &[f64]) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// log(1 + sum_i exp(x_i)), stabilized against large positive x.
pub(crate) fn log1p_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().fold(0.0f64, |acc, &x| acc.max(x));
    m + ((-m).exp() + xs.iter().map(|x| (x - m).exp()).sum::<f64>()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eager_values_and_shapes() {
        let t = Tape::new();
        let a = t.leaf(Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.constant(Tensor::new(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
        assert!(t.matmul(a, t.constant(Tensor::zeros(3, 2))).is_err());
    }

    #[test]
    fn backward_root_must_be_scalar() {
        let t = Tape::new();
        let a = t.leaf(Tensor::zeros(2, 2));
        assert!(matches!(
            t.backward(a),
            Err(Error::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn loss_grad_wrt_itself_is_one() {
        let t = Tape::new();
        let a = t.leaf(Tensor::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let s = t.sum(a).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(&t, s).unwrap().data(), &[1.0]);
        assert_eq!(g.get(&t, a).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = sum(x * x) + sum(x): dy/dx = 2x + 1
        let t = Tape::new();
        let x = t.leaf(Tensor::new(1, 2, vec![3.0, -2.0]).unwrap());
        let sq = t.mul(x, x).unwrap();
        let y = t.add(t.sum(sq).unwrap(), t.sum(x).unwrap()).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(&t, x).unwrap().data(), &[7.0, -3.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let t = Tape::new();
        let x = t.leaf(Tensor::scalar(2.0));
        let c = t.constant(Tensor::scalar(5.0));
        let y = t.mul(x, c).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(&t, c).is_none());
        assert_eq!(g.get(&t, x).unwrap().data(), &[5.0]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let t = Tape::new();
        let a = t.leaf(Tensor::new(1, 2, vec![1.0, 0.0]).unwrap());
        assert!(matches!(t.log(a), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn div_rejects_zero_divisor() {
        let t = Tape::new();
        let a = t.leaf(Tensor::scalar(1.0));
        let b = t.constant(Tensor::scalar(0.0));
        assert!(t.div(a, b).is_err());
    }

    #[test]
    fn normalize_rejects_tiny_rows() {
        let t = Tape::new();
        let a = t.leaf(Tensor::new(1, 2, vec![1e-13, 0.0]).unwrap());
        assert!(matches!(
            t.normalize_rows(a),
            Err(Error::DegenerateNorm { .. })
        ));
    }

    #[test]
    fn logsumexp_survives_large_shifts() {
        // lse([x, x]) = x + ln 2 exactly, even at x = +-1e4
        let t = Tape::new();
        for &x in &[1e4, -1e4, 1000.0] {
            let a = t.constant(Tensor::new(1, 2, vec![x, x]).unwrap());
            let l = t.row_logsumexp(a).unwrap();
            let got = t.value(l).data()[0];
            assert!(
                (got - (x + 2.0f64.ln())).abs() < 1e-9,
                "lse({x}) = {got}"
            );
        }
    }
}
