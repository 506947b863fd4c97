use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-12;
/// Probabilities are clamped to `[PROB_FLOOR, 1]` before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
/// Allowed deviation of a probability row's sum from 1.
pub const PROB_SUM_TOLERANCE: f64 = 1e-6;

/// Handle to a node of a [`Graph`].
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
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    AddConst { a: Var },
    Mul { a: Var, b: Var },
    MulConst { a: Var, factor: Vec<f64> },
    MulCol { a: Var, col: Var },
    Scale { a: Var, s: f64 },
    Gelu { a: Var },
    Tanh { a: Var },
    Softmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    GatherRows { a: Var, idx: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    Permute { a: Var, axes: Vec<usize> },
    Reshape { a: Var },
    Sum { a: Var },
    MaskedMeanTokens { a: Var, mask: Vec<f64>, seq: usize, counts: Vec<f64> },
    MaskedMse { a: Var, b: Var, mask: Vec<f64>, denom: f64 },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Kl { p: Var, q: Var },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of one forward pass.
///
/// Nodes are stored in creation order, which is a topological order, so the
/// backward pass is a single reverse sweep.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    consumed: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when the node was not on any path to the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            consumed: false,
        }
    }

    /// Graph whose nodes never require gradients (evaluation, teacher passes).
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a node out as a detached tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("graph values are finite")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf copied from `t`; tracks gradients when `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: self.grad_enabled && t.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// `a[..., k] x b[k, n] -> [..., n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || last_dim(&sa) != sb[0] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).len() / k.max(1);
        let value = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        self.push("matmul", shape, value, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    /// Batched product of rank-3 tensors: `[B,M,K] x [B,K,N]`, or
    /// `[B,M,K] x [B,N,K]^T` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch("bmm", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        if kb != k {
            return Err(mismatch("bmm", &sa, &sb));
        }
        let mut value = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for i in 0..batch {
                let ab = &av[i * m * k..(i + 1) * m * k];
                let bb = &bv[i * k * n..(i + 1) * k * n];
                let ob = &mut value[i * m * n..(i + 1) * m * n];
                if trans_b {
                    kernels::matmul_a_bt_acc(ab, bb, m, k, n, ob);
                } else {
                    kernels::matmul_acc(ab, bb, m, k, n, ob);
                }
            }
        }
        self.push(
            "bmm",
            vec![batch, m, n],
            value,
            Op::BatchMatMul { a, b, batch, m, k, n, trans_b },
            &[a, b],
        )
    }

    /// Elementwise sum of equal shapes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", self.shape(a), self.shape(b)));
        }
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push("add", self.shape(a).to_vec(), value, Op::Add { a, b }, &[a, b])
    }

    /// Broadcasts a rank-1 `row` over the last axis of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.value(row).len();
        if self.shape(row).len() != 1 || last_dim(self.shape(a)) != n {
            return Err(mismatch("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row);
        let value = self.value(a).iter().enumerate().map(|(i, x)| x + r[i % n]).collect();
        self.push("add_row", self.shape(a).to_vec(), value, Op::AddRow { a, row }, &[a, row])
    }

    /// Adds a constant offset of the same shape; gradient passes through.
    pub fn add_const(&mut self, a: Var, offset: &[f64]) -> Result<Var> {
        if offset.len() != self.value(a).len() {
            return Err(mismatch("add_const", self.shape(a), &[offset.len()]));
        }
        let value = self.value(a).iter().zip(offset).map(|(x, y)| x + y).collect();
        self.push("add_const", self.shape(a).to_vec(), value, Op::AddConst { a }, &[a])
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul", self.shape(a), self.shape(b)));
        }
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.push("mul", self.shape(a).to_vec(), value, Op::Mul { a, b }, &[a, b])
    }

    /// Elementwise product with a constant factor (dropout masks).
    pub fn mul_const(&mut self, a: Var, factor: Vec<f64>) -> Result<Var> {
        if factor.len() != self.value(a).len() {
            return Err(mismatch("mul_const", self.shape(a), &[factor.len()]));
        }
        let value = self.value(a).iter().zip(&factor).map(|(x, y)| x * y).collect();
        self.push("mul_const", self.shape(a).to_vec(), value, Op::MulConst { a, factor }, &[a])
    }

    /// Scales each row of `a` (rows = leading axes) by the matching entry of `col`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let n = last_dim(self.shape(a));
        let rows = self.value(a).len() / n.max(1);
        if self.value(col).len() != rows {
            return Err(mismatch("mul_col", self.shape(a), self.shape(col)));
        }
        let c = self.value(col);
        let value = self.value(a).iter().enumerate().map(|(i, x)| x * c[i / n]).collect();
        self.push("mul_col", self.shape(a).to_vec(), value, Op::MulCol { a, col }, &[a, col])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).iter().map(|x| x * s).collect();
        self.push("scale", self.shape(a).to_vec(), value, Op::Scale { a, s }, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).iter().map(|&x| kernels::gelu(x)).collect();
        self.push("gelu", self.shape(a).to_vec(), value, Op::Gelu { a }, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push("tanh", self.shape(a).to_vec(), value, Op::Tanh { a }, &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let n = last_dim(self.shape(a));
        let mut value = self.value(a).to_vec();
        for row in value.chunks_mut(n.max(1)) {
            kernels::softmax_row(row);
        }
        self.push("softmax", self.shape(a).to_vec(), value, Op::Softmax { a }, &[a])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = last_dim(self.shape(x));
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x);
        let rows = xv.len() / n;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut value = vec![0.0; xv.len()];
        let (gv, bv) = (self.value(gamma), self.value(beta));
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                value[r * n + j] = h * gv[j] + bv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            "layer_norm",
            shape,
            value,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            &[x, gamma, beta],
        )
    }

    /// Looks up rows of a `[V, d]` table; output shape is `out_shape + [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], out_shape: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || out_shape.iter().product::<usize>() != ids.len() {
            return Err(mismatch("embedding", &st, out_shape));
        }
        let d = st[1];
        if let Some(&bad) = ids.iter().find(|&&i| i >= st[0]) {
            return Err(Error::Invalid(format!("embedding: id {bad} outside table of {} rows", st[0])));
        }
        let tv = self.value(table);
        let mut value = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            value.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = out_shape.to_vec();
        shape.push(d);
        self.push("embedding", shape, value, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    /// Selects rows (last axis kept, leading axes flattened) by index: `[m, d]`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let d = last_dim(self.shape(a));
        let rows = self.value(a).len() / d.max(1);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Invalid(format!("gather_rows: row {bad} outside {rows} rows")));
        }
        let av = self.value(a);
        let mut value = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            value.extend_from_slice(&av[i * d..(i + 1) * d]);
        }
        self.push("gather_rows", vec![idx.len(), d], value, Op::GatherRows { a, idx: idx.to_vec() }, &[a])
    }

    /// Stacks `[m_i, d]` parts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Invalid("concat_rows: no parts".into()));
        };
        let d = last_dim(self.shape(first));
        let mut value = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != d {
                return Err(mismatch("concat_rows", self.shape(first), s));
            }
            value.extend_from_slice(self.value(p));
        }
        let rows = value.len() / d;
        self.push("concat_rows", vec![rows, d], value, Op::ConcatRows { parts: parts.to_vec() }, parts)
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if axes.len() != sa.len() || axes.iter().any(|&x| x >= sa.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(mismatch("permute", &sa, axes));
        }
        let value = kernels::permute(self.value(a), &sa, axes);
        let shape = axes.iter().map(|&x| sa[x]).collect();
        self.push("permute", shape, value, Op::Permute { a, axes: axes.to_vec() }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(mismatch("reshape", self.shape(a), shape));
        }
        let value = self.value(a).to_vec();
        self.push("reshape", shape.to_vec(), value, Op::Reshape { a }, &[a])
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = vec![self.value(a).iter().sum()];
        self.push("sum", Vec::new(), value, Op::Sum { a }, &[a])
    }

    /// Mean over the token axis of `[B, S, d]`, counting only positions with
    /// `mask > 0`. Returns `[B, d]`.
    pub fn masked_mean_tokens(&mut self, a: Var, mask: &[f64]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 3 || mask.len() != sa[0] * sa[1] {
            return Err(mismatch("masked_mean_tokens", &sa, &[mask.len()]));
        }
        let (b, s, d) = (sa[0], sa[1], sa[2]);
        let av = self.value(a);
        let mut counts = vec![0.0; b];
        let mut value = vec![0.0; b * d];
        for bi in 0..b {
            let cnt: f64 = mask[bi * s..(bi + 1) * s].iter().sum();
            if cnt <= 0.0 {
                return Err(Error::Invalid(format!("masked_mean_tokens: row {bi} has no real tokens")));
            }
            counts[bi] = cnt;
            for si in 0..s {
                let w = mask[bi * s + si];
                if w == 0.0 {
                    continue;
                }
                let src = &av[(bi * s + si) * d..(bi * s + si + 1) * d];
                for j in 0..d {
                    value[bi * d + j] += w * src[j];
                }
            }
            for j in 0..d {
                value[bi * d + j] /= cnt;
            }
        }
        self.push(
            "masked_mean_tokens",
            vec![b, d],
            value,
            Op::MaskedMeanTokens { a, mask: mask.to_vec(), seq: s, counts },
            &[a],
        )
    }

    /// Mean squared error over rows whose mask is set and all of their
    /// last-axis entries. `mask` has one entry per row.
    pub fn masked_mse(&mut self, a: Var, b: Var, mask: &[f64]) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("masked_mse", self.shape(a), self.shape(b)));
        }
        let d = last_dim(self.shape(a));
        let rows = self.value(a).len() / d.max(1);
        if mask.len() != rows {
            return Err(mismatch("masked_mse", self.shape(a), &[mask.len()]));
        }
        let real: f64 = mask.iter().sum();
        if real <= 0.0 {
            return Err(Error::Invalid("masked_mse: mask selects no rows".into()));
        }
        let denom = real * d as f64;
        let (av, bv) = (self.value(a), self.value(b));
        let mut total = 0.0;
        for r in 0..rows {
            if mask[r] == 0.0 {
                continue;
            }
            let sq: f64 = (0..d).map(|j| (av[r * d + j] - bv[r * d + j]).powi(2)).sum();
            total += mask[r] * sq;
        }
        self.push(
            "masked_mse",
            Vec::new(),
            vec![total / denom],
            Op::MaskedMse { a, b, mask: mask.to_vec(), denom },
            &[a, b],
        )
    }

    /// Batch-mean cross-entropy of `[B, C]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(mismatch("cross_entropy", &sl, &[labels.len()]));
        }
        let c = sl[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Invalid(format!("cross_entropy: label {bad} with {c} classes")));
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let raw = &self.nodes[logits.0].value[r * c..(r + 1) * c];
            let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + raw.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - raw[labels[r]];
            kernels::softmax_row(row);
        }
        let value = vec![loss / labels.len() as f64];
        self.push(
            "cross_entropy",
            Vec::new(),
            value,
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            &[logits],
        )
    }

    /// Batch-mean `KL(p || q)` between probability rows over the last axis.
    /// Both arguments are clamped to `[PROB_FLOOR, 1]` before the log.
    pub fn kl_div(&mut self, p: Var, q: Var) -> Result<Var> {
        if self.shape(p) != self.shape(q) {
            return Err(mismatch("kl_div", self.shape(p), self.shape(q)));
        }
        let c = last_dim(self.shape(p));
        let (pv, qv) = (self.value(p), self.value(q));
        let rows = pv.len() / c.max(1);
        for (name, v) in [("p", pv), ("q", qv)] {
            for (r, row) in v.chunks(c).enumerate() {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > PROB_SUM_TOLERANCE || row.iter().any(|&x| x < 0.0) {
                    return Err(Error::Invalid(format!(
                        "kl_div: {name} row {r} is not a probability vector (sum {s})"
                    )));
                }
            }
        }
        let mut total = 0.0;
        for (pi, qi) in pv.iter().zip(qv) {
            let pc = pi.clamp(PROB_FLOOR, 1.0);
            let qc = qi.clamp(PROB_FLOOR, 1.0);
            total += pi * (pc.ln() - qc.ln());
        }
        self.push("kl_div", Vec::new(), vec![total / rows as f64], Op::Kl { p, q }, &[p, q])
    }

    /// Reverse sweep from a scalar `loss`. Consumes the graph: a second call
    /// fails until a new forward pass is recorded on a fresh graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if !self.grad_enabled {
            return Err(Error::NoGradGraph);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NotScalar(self.nodes[loss.0].shape.clone()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        // interior nodes keep their gradients too; callers read leaves
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if wants(*a) {
                    let bv = &nodes[b.0].value;
                    acc(*a, &mut |ga| kernels::matmul_a_bt_acc(g, bv, m, n, k, ga));
                }
                if wants(*b) {
                    let av = &nodes[a.0].value;
                    acc(*b, &mut |gb| kernels::matmul_at_b_acc(av, g, m, k, n, gb));
                }
            }
            Op::BatchMatMul { a, b, batch, m, k, n, trans_b } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if wants(*a) {
                    acc(*a, &mut |ga| {
                        for i in 0..batch {
                            let gb = &g[i * m * n..(i + 1) * m * n];
                            let bb = &bv[i * k * n..(i + 1) * k * n];
                            let out = &mut ga[i * m * k..(i + 1) * m * k];
                            if *trans_b {
                                // dA = dC B, B is [n, k]
                                kernels::matmul_acc(gb, bb, m, n, k, out);
                            } else {
                                kernels::matmul_a_bt_acc(gb, bb, m, n, k, out);
                            }
                        }
                    });
                }
                if wants(*b) {
                    acc(*b, &mut |gbv| {
                        for i in 0..batch {
                            let gb = &g[i * m * n..(i + 1) * m * n];
                            let ab = &av[i * m * k..(i + 1) * m * k];
                            let out = &mut gbv[i * k * n..(i + 1) * k * n];
                            if *trans_b {
                                // dB = dC^T A, [n, k]
                                kernels::matmul_at_b_acc(gb, ab, m, n, k, out);
                            } else {
                                kernels::matmul_at_b_acc(ab, gb, m, k, n, out);
                            }
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    acc(v, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
            }
            Op::AddRow { a, row } => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let n = nodes[row.0].value.len();
                acc(*row, &mut |gr| {
                    for (i, y) in g.iter().enumerate() {
                        gr[i % n] += y;
                    }
                });
            }
            Op::AddConst { a } | Op::Reshape { a } => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::MulConst { a, factor } => {
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * factor[i];
                    }
                });
            }
            Op::MulCol { a, col } => {
                let (av, cv) = (&nodes[a.0].value, &nodes[col.0].value);
                let n = av.len() / cv.len().max(1);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * cv[i / n];
                    }
                });
                acc(*col, &mut |gc| {
                    for i in 0..av.len() {
                        gc[i / n] += g[i] * av[i];
                    }
                });
            }
            Op::Scale { a, s } => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y));
            }
            Op::Gelu { a } => {
                let av = &nodes[a.0].value;
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * kernels::gelu_grad(av[i]);
                    }
                });
            }
            Op::Tanh { a } => {
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Softmax { a } => {
                let y = &node.value;
                let n = last_dim(&node.shape);
                acc(*a, &mut |ga| {
                    for r in 0..y.len() / n {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            ga[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = last_dim(&node.shape);
                let rows = xhat.len() / n;
                let gv = &nodes[gamma.0].value;
                acc(*gamma, &mut |gg| {
                    for r in 0..rows {
                        for j in 0..n {
                            gg[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for r in 0..rows {
                        for j in 0..n {
                            gb[j] += g[r * n + j];
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    let nf = n as f64;
                    for r in 0..rows {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..n {
                            let d = g[r * n + j] * gv[j];
                            sum_d += d;
                            sum_dx += d * xhat[r * n + j];
                        }
                        for j in 0..n {
                            let d = g[r * n + j] * gv[j];
                            gx[r * n + j] += rstd[r] / nf * (nf * d - sum_d - xhat[r * n + j] * sum_dx);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].shape[1];
                acc(*table, &mut |gt| {
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[i * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::GatherRows { a, idx } => {
                let d = last_dim(&node.shape);
                acc(*a, &mut |ga| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..d {
                            ga[i * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    let slice = &g[offset..offset + len];
                    acc(p, &mut |gp| gp.iter_mut().zip(slice).for_each(|(x, y)| *x += y));
                    offset += len;
                }
            }
            Op::Permute { a, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &x) in axes.iter().enumerate() {
                    inverse[x] = i;
                }
                let back = kernels::permute(g, &node.shape, &inverse);
                acc(*a, &mut |ga| ga.iter_mut().zip(&back).for_each(|(x, y)| *x += y));
            }
            Op::Sum { a } => {
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::MaskedMeanTokens { a, mask, seq, counts } => {
                let d = last_dim(&node.shape);
                let s = *seq;
                acc(*a, &mut |ga| {
                    for (bi, cnt) in counts.iter().enumerate() {
                        for si in 0..s {
                            let w = mask[bi * s + si] / cnt;
                            if w == 0.0 {
                                continue;
                            }
                            for j in 0..d {
                                ga[(bi * s + si) * d + j] += w * g[bi * d + j];
                            }
                        }
                    }
                });
            }
            Op::MaskedMse { a, b, mask, denom } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let d = last_dim(&nodes[a.0].shape);
                let coef = 2.0 * g[0] / denom;
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    acc(v, &mut |gv| {
                        for (r, &w) in mask.iter().enumerate() {
                            if w == 0.0 {
                                continue;
                            }
                            for j in 0..d {
                                let i = r * d + j;
                                gv[i] += sign * coef * w * (av[i] - bv[i]);
                            }
                        }
                    });
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = nodes[logits.0].shape[1];
                let scale = g[0] / labels.len() as f64;
                acc(*logits, &mut |gl| {
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let target = if j == y { 1.0 } else { 0.0 };
                            gl[r * c + j] += scale * (probs[r * c + j] - target);
                        }
                    }
                });
            }
            Op::Kl { p, q } => {
                let (pv, qv) = (&nodes[p.0].value, &nodes[q.0].value);
                let rows = pv.len() / last_dim(&nodes[p.0].shape).max(1);
                let scale = g[0] / rows as f64;
                acc(*p, &mut |gp| {
                    for i in 0..pv.len() {
                        let pc = pv[i].clamp(PROB_FLOOR, 1.0);
                        let qc = qv[i].clamp(PROB_FLOOR, 1.0);
                        // d/dp [p ln clamp(p)] includes p / clamp(p) only where clamp is the identity
                        let dlog = if pv[i] >= PROB_FLOOR { pv[i] / pc } else { 0.0 };
                        gp[i] += scale * (pc.ln() - qc.ln() + dlog);
                    }
                });
                acc(*q, &mut |gq| {
                    for i in 0..qv.len() {
                        let qc = qv[i].clamp(PROB_FLOOR, 1.0);
                        if qv[i] >= PROB_FLOOR {
                            gq[i] -= scale * pv[i] / qc;
                        }
                    }
                });
            }
        }
    }
}
