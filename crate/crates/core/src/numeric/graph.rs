//! Define-by-run reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` is a single reverse sweep. Values are
//! computed eagerly; each op keeps whatever it needs for its adjoint.

use super::{gemm, softmax::log_softmax_ext, DenseArray, NumericError};

/// Handle to a node of one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Detach,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Ln(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Dot(Var, Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Pick {
        x: Var,
        cols: Vec<usize>,
    },
    LogSoftmaxRows(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: DenseArray,
    op: Op,
    detached: bool,
}

#[derive(Debug, Default)]
struct Frozen {
    values: Vec<DenseArray>,
    next: usize,
}

/// Tape of differentiable operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    frozen: Option<Frozen>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<DenseArray>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; zeros when `v` is unreached.
    pub fn get(&self, v: Var) -> DenseArray {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => DenseArray::zeros(self.shapes[v.0].clone()),
        }
    }

    pub fn wrt(&self, v: Var) -> Option<&DenseArray> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> DenseArray {
        match self.grads.get_mut(v.0).and_then(Option::take) {
            Some(g) => g,
            None => DenseArray::zeros(self.shapes[v.0].clone()),
        }
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn mismatch(op: &'static str, a: &DenseArray, b: &DenseArray) -> NumericError {
    NumericError::IncompatibleShapes {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose `detach` calls return `values` in order instead of
    /// copying their input. Used to hold stop-gradient targets fixed while
    /// probing a function by finite differences.
    pub fn with_frozen_detach(values: Vec<DenseArray>) -> Self {
        Self {
            nodes: Vec::new(),
            frozen: Some(Frozen { values, next: 0 }),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.nodes[v.0].value
    }

    pub fn is_detached(&self, v: Var) -> bool {
        self.nodes[v.0].detached
    }

    /// Values of every `detach` node, in creation order.
    pub fn detached_values(&self) -> Vec<DenseArray> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Detach))
            .map(|n| n.value.clone())
            .collect()
    }

    fn push(&mut self, value: DenseArray, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            detached: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: DenseArray) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: DenseArray) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].detached = true;
        v
    }

    /// Stop-gradient: same value as `x`, but backward stops here.
    pub fn detach(&mut self, x: Var) -> Var {
        let own = self.nodes[x.0].value.clone();
        let value = match self.frozen.as_mut() {
            Some(f) if f.next < f.values.len() && f.values[f.next].shape() == own.shape() => {
                f.next += 1;
                f.values[f.next - 1].clone()
            }
            _ => own,
        };
        let v = self.push(value, Op::Detach);
        self.nodes[v.0].detached = true;
        v
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumericError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(name, va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = DenseArray::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Ln(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.push(value, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(DenseArray::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(DenseArray::scalar(s), Op::Mean(a))
    }

    /// `sum_i w_i * x_i`, where a term with `w_i == 0` contributes exactly 0
    /// even if `x_i` is infinite.
    pub fn dot(&mut self, w: Var, x: Var) -> Result<Var, NumericError> {
        let (vw, vx) = (self.value(w), self.value(x));
        if vw.len() != vx.len() {
            return Err(mismatch("dot", vw, vx));
        }
        let s = vw
            .data()
            .iter()
            .zip(vx.data())
            .filter(|(&a, _)| a != 0.0)
            .map(|(a, b)| a * b)
            .sum();
        Ok(self.push(DenseArray::scalar(s), Op::Dot(w, x)))
    }

    /// `[.., k] x [k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.shape().len() != 2 || va.cols() != vb.shape()[0] {
            return Err(mismatch("matmul", va, vb));
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), false, 0.0, &mut out);
        let mut shape = va.shape().to_vec();
        *shape.last_mut().expect("matmul operand has rank >= 1") = n;
        let value = DenseArray::new(shape, out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Adds a `[n]` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NumericError> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.len() != vx.cols() {
            return Err(mismatch("add_bias", vx, vb));
        }
        let mut value = vx.clone();
        let cols = vx.cols();
        for (i, y) in value.data_mut().iter_mut().enumerate() {
            *y += vb.data()[i % cols];
        }
        Ok(self.push(value, Op::AddBias(x, bias)))
    }

    /// tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        self.push(value, Op::Gelu(x))
    }

    /// Row-wise layer normalization with affine `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NumericError> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let cols = vx.cols();
        if vg.len() != cols || vb.len() != cols {
            return Err(mismatch("layer_norm", vx, vg));
        }
        let rows = vx.rows();
        let mut xhat = vec![0.0; vx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = vx.row(r);
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = s;
            for c in 0..cols {
                let h = (row[c] - mu) * s;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * vg.data()[c] + vb.data()[c];
            }
        }
        let value = DenseArray::new(vx.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Row lookup into a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericError> {
        let vt = self.value(table);
        let (rows, d) = (vt.rows(), vt.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(NumericError::IncompatibleShapes {
                op: "embedding",
                left: vt.shape().to_vec(),
                right: vec![bad],
            });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(vt.row(i));
        }
        let value = DenseArray::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Multi-head causal self-attention on `[batch * seq, d]` projections.
    /// Position `t` attends to positions `0..=t` of its own sequence.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var, NumericError> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let d = vq.cols();
        if vk.shape() != vq.shape()
            || vv.shape() != vq.shape()
            || vq.rows() != batch * seq
            || heads == 0
            || d % heads != 0
        {
            return Err(mismatch("causal_attention", vq, vk));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (vq.data(), vk.data(), vv.data());
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; batch * seq * d];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for t in 0..seq {
                    let qi = (b * seq + t) * d + off;
                    let mut max = f64::NEG_INFINITY;
                    for s in 0..=t {
                        let ki = (b * seq + s) * d + off;
                        let dotp: f64 = (0..dh).map(|c| qd[qi + c] * kd[ki + c]).sum();
                        scores[s] = dotp * scale;
                        max = max.max(scores[s]);
                    }
                    let mut z = 0.0;
                    for sc in scores.iter_mut().take(t + 1) {
                        *sc = (*sc - max).exp();
                        z += *sc;
                    }
                    let prow = ((b * heads + h) * seq + t) * seq;
                    let oi = (b * seq + t) * d + off;
                    for s in 0..=t {
                        let p = scores[s] / z;
                        probs[prow + s] = p;
                        let vi = (b * seq + s) * d + off;
                        for c in 0..dh {
                            out[oi + c] += p * vd[vi + c];
                        }
                    }
                }
            }
        }
        let value = DenseArray::new(vq.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
        ))
    }

    /// Selects rows of `x` (viewed as a matrix) into a `[rows.len(), cols]` array.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, NumericError> {
        let vx = self.value(x);
        let cols = vx.cols();
        if let Some(&bad) = rows.iter().find(|&&r| r >= vx.rows()) {
            return Err(NumericError::IncompatibleShapes {
                op: "gather_rows",
                left: vx.shape().to_vec(),
                right: vec![bad],
            });
        }
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            out.extend_from_slice(vx.row(r));
        }
        let value = DenseArray::new(vec![rows.len(), cols], out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// `y[i] = x[i, cols[i]]`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var, NumericError> {
        let vx = self.value(x);
        if cols.len() != vx.rows() || cols.iter().any(|&c| c >= vx.cols()) {
            return Err(NumericError::IncompatibleShapes {
                op: "pick",
                left: vx.shape().to_vec(),
                right: vec![cols.len()],
            });
        }
        let out = cols.iter().enumerate().map(|(i, &c)| vx.row(i)[c]).collect();
        let value = DenseArray::from_vec(out);
        Ok(self.push(
            value,
            Op::Pick {
                x,
                cols: cols.to_vec(),
            },
        ))
    }

    /// Row-wise [`log_softmax_ext`].
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var, NumericError> {
        let vx = self.value(x);
        let mut value = vx.clone();
        for r in 0..vx.rows() {
            let row = log_softmax_ext(vx.row(r))?;
            value.row_mut(r).copy_from_slice(&row);
        }
        Ok(self.push(value, Op::LogSoftmaxRows(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, NumericError> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients, NumericError> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(NumericError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<DenseArray>> = vec![None; root.0 + 1];
        grads[root.0] = Some(DenseArray::filled(rv.shape().to_vec(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.detached {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<DenseArray>], v: Var) -> &'a mut [f64] {
        grads[v.0]
            .get_or_insert_with(|| DenseArray::zeros(self.nodes[v.0].value.shape().to_vec()))
            .data_mut()
    }

    fn propagate(&self, node: &Node, g: &DenseArray, grads: &mut [Option<DenseArray>]) {
        let gd = g.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b) => {
                for (s, d) in self.slot(grads, *a).iter_mut().zip(gd) {
                    *s += d;
                }
                for (s, d) in self.slot(grads, *b).iter_mut().zip(gd) {
                    *s += d;
                }
            }
            Op::Sub(a, b) => {
                for (s, d) in self.slot(grads, *a).iter_mut().zip(gd) {
                    *s += d;
                }
                for (s, d) in self.slot(grads, *b).iter_mut().zip(gd) {
                    *s -= d;
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                for ((s, d), x) in self.slot(grads, *a).iter_mut().zip(gd).zip(vb) {
                    *s += d * x;
                }
                for ((s, d), x) in self.slot(grads, *b).iter_mut().zip(gd).zip(va) {
                    *s += d * x;
                }
            }
            Op::Scale(a, c) => {
                for (s, d) in self.slot(grads, *a).iter_mut().zip(gd) {
                    *s += c * d;
                }
            }
            Op::Ln(a) => {
                let va = self.value(*a).data();
                for ((s, d), x) in self.slot(grads, *a).iter_mut().zip(gd).zip(va) {
                    *s += d / x;
                }
            }
            Op::Exp(a) => {
                for ((s, d), e) in self.slot(grads, *a).iter_mut().zip(gd).zip(y) {
                    *s += d * e;
                }
            }
            Op::Square(a) => {
                let va = self.value(*a).data();
                for ((s, d), x) in self.slot(grads, *a).iter_mut().zip(gd).zip(va) {
                    *s += 2.0 * x * d;
                }
            }
            Op::Sum(a) => {
                let d = gd[0];
                for s in self.slot(grads, *a) {
                    *s += d;
                }
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let d = gd[0] / n;
                for s in self.slot(grads, *a) {
                    *s += d;
                }
            }
            Op::Dot(w, x) => {
                let d = gd[0];
                let (vw, vx) = (self.value(*w).data(), self.value(*x).data());
                for (s, wi) in self.slot(grads, *x).iter_mut().zip(vw) {
                    if *wi != 0.0 {
                        *s += d * wi;
                    }
                }
                if !self.nodes[w.0].detached {
                    for (s, xi) in self.slot(grads, *w).iter_mut().zip(vx) {
                        *s += d * xi;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.shape()[1]);
                gemm(m, n, k, gd, false, vb.data(), true, 1.0, self.slot(grads, *a));
                gemm(k, m, n, va.data(), true, gd, false, 1.0, self.slot(grads, *b));
            }
            Op::AddBias(x, b) => {
                for (s, d) in self.slot(grads, *x).iter_mut().zip(gd) {
                    *s += d;
                }
                let cols = g.cols();
                let sb = self.slot(grads, *b);
                for (i, d) in gd.iter().enumerate() {
                    sb[i % cols] += d;
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                for ((s, d), xi) in self.slot(grads, *x).iter_mut().zip(gd).zip(vx) {
                    *s += d * gelu_grad(*xi);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = g.cols();
                let rows = g.rows();
                let vg = self.value(*gamma).data();
                {
                    let sb = self.slot(grads, *beta);
                    for (i, d) in gd.iter().enumerate() {
                        sb[i % cols] += d;
                    }
                }
                {
                    let sg = self.slot(grads, *gamma);
                    for (i, d) in gd.iter().enumerate() {
                        sg[i % cols] += d * xhat[i];
                    }
                }
                let sx = self.slot(grads, *x);
                let mut dxhat = vec![0.0; cols];
                for r in 0..rows {
                    let base = r * cols;
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for c in 0..cols {
                        dxhat[c] = gd[base + c] * vg[c];
                        mean_d += dxhat[c];
                        mean_dx += dxhat[c] * xhat[base + c];
                    }
                    mean_d /= cols as f64;
                    mean_dx /= cols as f64;
                    for c in 0..cols {
                        sx[base + c] += rstd[r] * (dxhat[c] - mean_d - xhat[base + c] * mean_dx);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = g.cols();
                let st = self.slot(grads, *table);
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        st[id * d + c] += gd[r * d + c];
                    }
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => self.attention_backward(
                (*q, *k, *v),
                (*batch, *seq, *heads),
                probs,
                gd,
                grads,
            ),
            Op::GatherRows { x, rows } => {
                let cols = g.cols();
                let sx = self.slot(grads, *x);
                for (i, &r) in rows.iter().enumerate() {
                    for c in 0..cols {
                        sx[r * cols + c] += gd[i * cols + c];
                    }
                }
            }
            Op::Pick { x, cols } => {
                let width = self.value(*x).cols();
                let sx = self.slot(grads, *x);
                for (i, &c) in cols.iter().enumerate() {
                    sx[i * width + c] += gd[i];
                }
            }
            Op::LogSoftmaxRows(x) => {
                let cols = g.cols();
                let sx = self.slot(grads, *x);
                for r in 0..g.rows() {
                    let base = r * cols;
                    let total: f64 = gd[base..base + cols].iter().sum();
                    for c in 0..cols {
                        let p = y[base + c].exp();
                        sx[base + c] += gd[base + c] - p * total;
                    }
                }
            }
            Op::Reshape(x) => {
                for (s, d) in self.slot(grads, *x).iter_mut().zip(gd) {
                    *s += d;
                }
            }
        }
    }

    fn attention_backward(
        &self,
        (q, k, v): (Var, Var, Var),
        (batch, seq, heads): (usize, usize, usize),
        probs: &[f64],
        gd: &[f64],
        grads: &mut [Option<DenseArray>],
    ) {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let d = vq.cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (vq.data(), vk.data(), vv.data());
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut dp = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for t in 0..seq {
                    let prow = ((b * heads + h) * seq + t) * seq;
                    let oi = (b * seq + t) * d + off;
                    let mut weighted = 0.0;
                    for s in 0..=t {
                        let vi = (b * seq + s) * d + off;
                        let p = probs[prow + s];
                        let mut acc = 0.0;
                        for c in 0..dh {
                            acc += gd[oi + c] * vd[vi + c];
                            dv[vi + c] += p * gd[oi + c];
                        }
                        dp[s] = acc;
                        weighted += p * acc;
                    }
                    let qi = oi;
                    for s in 0..=t {
                        let ds = probs[prow + s] * (dp[s] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let ki = (b * seq + s) * d + off;
                        for c in 0..dh {
                            dq[qi + c] += ds * kd[ki + c];
                            dk[ki + c] += ds * qd[qi + c];
                        }
                    }
                }
            }
        }
        for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
            for (s, x) in self.slot(grads, var).iter_mut().zip(&delta) {
                *s += x;
            }
        }
    }
}
