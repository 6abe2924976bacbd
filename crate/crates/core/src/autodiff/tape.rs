//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node whose inputs already exist on the tape, so the
//! tape is topologically ordered by construction and [`Tape::backward`] is a
//! single reverse sweep.

use crate::error::{contract, Error, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    AddScalar { a: Var },
    Exp { a: Var },
    Log { a: Var },
    Tanh { a: Var },
    Relu { a: Var },
    Gelu { a: Var },
    Clamp { a: Var, lo: f64, hi: f64 },
    Softmax { a: Var, dim: usize },
    LogSoftmax { a: Var, dim: usize },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        dim: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SelectRows { src: Var, idx: Vec<usize>, row: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Reshape { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    SumLast { a: Var, dim: usize },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        valid: Vec<bool>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// The computation tape: values, recorded operations and, after
/// [`Tape::backward`], gradients.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Splits `shape` at `axis` into (outer, axis length, inner) element counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

/// Gradient buffer for `v`, allocated on first touch; `None` when `v` does not
/// require a gradient.
fn grad_buf<'g>(
    grads: &'g mut [Option<Vec<f64>>],
    nodes: &[Node],
    v: Var,
) -> Option<&'g mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of `t` as a leaf. Gradients are tracked iff
    /// `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            requires_grad: t.requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.leaf(&t))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(&Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn item(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        assert_eq!(node.value.len(), 1, "item() on shape {:?}", node.shape);
        node.value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.clone()).expect("node shape is consistent")
    }

    /// Gradient of the last [`Tape::backward`] loss with respect to `v`.
    /// `None` if `v` does not require grad or is unreachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, value, op, &[a])
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let nb = vb.len();
        let value = va
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vb[i % nb]))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, value, op, &[a, b])
    }

    /// `a + b`, where `b`'s shape must equal a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("add", a, b)?;
        Ok(self.binary(a, b, |x, y| x + y, Op::Add { a, b }))
    }

    /// `a - b` with the same broadcasting rule as [`Tape::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("sub", a, b)?;
        Ok(self.binary(a, b, |x, y| x - y, Op::Sub { a, b }))
    }

    /// Elementwise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("mul", a, b)?;
        Ok(self.binary(a, b, |x, y| x * y, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar { a })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp { a })
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu { a })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu { a })
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp { a, lo, hi })
    }

    fn last_dim(&self, op: &'static str, a: Var) -> Result<usize> {
        match self.nodes[a.0].shape.last() {
            Some(&d) if d > 0 => Ok(d),
            _ => Err(shape_err(op, &self.nodes[a.0].shape, &[])),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let dim = self.last_dim("softmax", a)?;
        let mut value = self.nodes[a.0].value.clone();
        for row in value.chunks_mut(dim) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            row.iter_mut().for_each(|x| *x /= sum);
        }
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, value, Op::Softmax { a, dim }, &[a]))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let dim = self.last_dim("log_softmax", a)?;
        let mut value = self.nodes[a.0].value.clone();
        for row in value.chunks_mut(dim) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, value, Op::LogSoftmax { a, dim }, &[a]))
    }

    /// Layer normalization over the last axis followed by a per-feature affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let dim = self.last_dim("layer_norm", x)?;
        if !(eps > 0.0) {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        for p in [gain, bias] {
            if self.nodes[p.0].shape != [dim] {
                return Err(shape_err("layer_norm", &self.nodes[x.0].shape, &self.nodes[p.0].shape));
            }
        }
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gain.0].value;
        let b = &self.nodes[bias.0].value;
        let rows = xv.len() / dim;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut value = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * dim..(r + 1) * dim];
            let mean = row.iter().sum::<f64>() / dim as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..dim {
                let h = (row[c] - mean) * rs;
                xhat[r * dim + c] = h;
                value[r * dim + c] = h * g[c] + b[c];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(
            shape,
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                dim,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Matrix product of `a: [M, K]` and `b: [K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut value = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.nodes[a.0].value,
            (k as isize, 1),
            &self.nodes[b.0].value,
            (n as isize, 1),
            &mut value,
            0.0,
        );
        Ok(self.push(vec![m, n], value, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// Gathers rows along axis 0. Used for embedding lookups and token
    /// interleaving.
    pub fn select_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let shape = &self.nodes[src.0].shape;
        if shape.is_empty() {
            return Err(shape_err("select_rows", shape, &[]));
        }
        let rows = shape[0];
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(contract(format!("select_rows: index {bad} out of range for {rows} rows")));
        }
        let row = numel(&shape[1..]);
        let mut out_shape = shape.clone();
        out_shape[0] = idx.len();
        let sv = &self.nodes[src.0].value;
        let mut value = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            value.extend_from_slice(&sv[i * row..(i + 1) * row]);
        }
        Ok(self.push(
            out_shape,
            value,
            Op::SelectRows {
                src,
                idx: idx.to_vec(),
                row,
            },
            &[src],
        ))
    }

    /// Embedding lookup: rows `ids` of a `[vocab, dim]` table.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        if self.nodes[table.0].shape.len() != 2 {
            return Err(shape_err("embedding_lookup", &self.nodes[table.0].shape, &[]));
        }
        self.select_rows(table, ids)
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| contract("concat of zero tensors"))?;
        let base = self.nodes[first.0].shape.clone();
        if axis >= base.len() {
            return Err(shape_err("concat", &base, &[axis]));
        }
        let mut total = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (x, y))| d != axis && x != y)
            {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let node = &self.nodes[p.0];
                let chunk = node.shape[axis] * inner;
                value.extend_from_slice(&node.value[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            shape,
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(shape_err("slice", &shape, &[axis, start, len]));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let av = &self.nodes[a.0].value;
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            value.extend_from_slice(&av[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(out_shape, value, Op::Slice { a, axis, start }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.nodes[a.0].value.len() {
            return Err(shape_err("reshape", &self.nodes[a.0].shape, shape));
        }
        let value = self.nodes[a.0].value.clone();
        Ok(self.push(shape.to_vec(), value, Op::Reshape { a }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(Vec::new(), vec![s], Op::Mean { a }, &[a])
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let dim = self.last_dim("sum_last", a)?;
        let value = self.nodes[a.0]
            .value
            .chunks(dim)
            .map(|c| c.iter().sum())
            .collect();
        let mut shape = self.nodes[a.0].shape.clone();
        shape.pop();
        Ok(self.push(shape, value, Op::SumLast { a, dim }, &[a]))
    }

    /// Multi-head causal attention core on projected queries, keys and values.
    ///
    /// `q`, `k`, `v` are `[B*seq, D]` with the batch laid out as consecutive
    /// blocks of `seq` rows. Position `i` attends to positions `j <= i` whose
    /// `valid` flag is set; an invalid query row yields zeros. Masked keys are
    /// skipped outright, so outputs at `i` never read rows after `i`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        valid: &[bool],
    ) -> Result<Var> {
        let shape = self.nodes[q.0].shape.clone();
        for other in [k, v] {
            if self.nodes[other.0].shape != shape {
                return Err(shape_err("causal_attention", &shape, &self.nodes[other.0].shape));
            }
        }
        if shape.len() != 2 || seq == 0 || shape[0] % seq != 0 || valid.len() != shape[0] {
            return Err(shape_err("causal_attention", &shape, &[seq, valid.len()]));
        }
        let d = shape[1];
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "hidden dimension {d} is not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let batch = shape[0] / seq;
        let qv = &self.nodes[q.0].value;
        let kv = &self.nodes[k.0].value;
        let vv = &self.nodes[v.0].value;
        let mut out = vec![0.0; qv.len()];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            let r0 = b * seq;
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    if !valid[r0 + i] {
                        continue;
                    }
                    let qi = &qv[(r0 + i) * d + off..(r0 + i) * d + off + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        if !valid[r0 + j] {
                            continue;
                        }
                        let kj = &kv[(r0 + j) * d + off..(r0 + j) * d + off + dh];
                        let s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let mut sum = 0.0;
                    for j in 0..=i {
                        if valid[r0 + j] {
                            p[j] = (scores[j] - max).exp();
                            sum += p[j];
                        }
                    }
                    let oi = &mut out[(r0 + i) * d + off..(r0 + i) * d + off + dh];
                    for j in 0..=i {
                        if !valid[r0 + j] {
                            continue;
                        }
                        p[j] /= sum;
                        let vj = &vv[(r0 + j) * d + off..(r0 + j) * d + off + dh];
                        for (o, x) in oi.iter_mut().zip(vj) {
                            *o += p[j] * x;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                valid: valid.to_vec(),
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Attention probabilities recorded by a [`Tape::causal_attention`] node,
    /// laid out `[batch, heads, seq, seq]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Populates gradients of the scalar `loss` with respect to every node that
    /// requires grad. Previous gradients on this tape are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(contract("backward on an empty tape"));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let (lo, hi) = self.grads.split_at_mut(i);
            let gout = hi[0].as_deref().expect("checked above");
            backprop_node(&self.nodes, i, gout, lo);
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass buffers whose lengths match the strides for an
    // (m x k) * (k x n) product written into a dense row-major (m x n) `c`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn backprop_node(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            // dA = dC * B^T, dB = A^T * dC
            if let Some(ga) = grad_buf(grads, nodes, a) {
                gemm(m, n, k, g, (n as isize, 1), &nodes[b.0].value, (1, n as isize), ga, 1.0);
            }
            if let Some(gb) = grad_buf(grads, nodes, b) {
                gemm(k, m, n, &nodes[a.0].value, (1, k as isize), g, (n as isize, 1), gb, 1.0);
            }
        }
        &Op::Add { a, b } | &Op::Sub { a, b } => {
            let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
            if let Some(ga) = grad_buf(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = grad_buf(grads, nodes, b) {
                let nb = gb.len();
                for (idx, y) in g.iter().enumerate() {
                    gb[idx % nb] += sign * y;
                }
            }
        }
        &Op::Mul { a, b } => {
            let va = &nodes[a.0].value;
            let vb = &nodes[b.0].value;
            let nb = vb.len();
            if let Some(ga) = grad_buf(grads, nodes, a) {
                for (idx, x) in ga.iter_mut().enumerate() {
                    *x += g[idx] * vb[idx % nb];
                }
            }
            if let Some(gb) = grad_buf(grads, nodes, b) {
                for (idx, y) in g.iter().enumerate() {
                    gb[idx % nb] += y * va[idx];
                }
            }
        }
        &Op::Scale { a, c } => {
            if let Some(ga) = grad_buf(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
        }
        &Op::AddScalar { a } | &Op::Reshape { a } => {
            if let Some(ga) = grad_buf(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        &Op::Exp { a } => {
            if let Some(ga) = grad_buf(grads, nodes, a) {
                for ((x, y), out) in ga.iter_mut().zip(g).zip(&node.value) {
                    *x += y * out;
                }
            }
        }
        &Op::Log { a } => {
            let va = &nodes[a.0].value;
            if let Some(ga) = grad_buf(grads, nodes, a) {
                for ((x, y), inp) in ga.iter_mut().zip(g).zip(va) {
                    *x += y / inp;
                }
            }
        }
        &Op::Tanh { a } => {
            if let Some(ga) = grad_buf(grads, nodes, a) {
                for ((x, y), out) in ga.iter_mut().zip(g).zip(&node.value) {
                    *x += y * (1.0 - out * out);
                }
            }
        }
        &Op::Relu { a } => {
            let va = &nodes[a.0].value;
            if let Some(ga) = grad_buf(grads, nodes, a) {
                for ((x, y), inp) in ga.iter_mut().zip(g).zip(va) {
                    if *inp > 0.0 {
                        *x += y;
                    }
                }
            }
        }
        &Op::Gelu { a } => {
            let va = &nodes[a.0].value;
            if let Some(ga) = grad_buf(grads, nodes, a) {
                for ((x, y), inp) in ga.iter_mut().zip(g).zip(va) {
                    *x += y * gelu_grad(*inp);
                }
            }
        }
        &Op::Clamp { a, lo, hi } => {
            let va = &nodes[a.0].value;
            if let Some(ga) = grad_buf(grads, nodes, a) {
                for ((x, y), inp) in ga.iter_mut().zip(g).zip(va) {
                    if *inp >= lo && *inp <= hi {
                        *x += y;
                    }
                }
            }
        }
        &Op::Softmax { a, dim } => {
            if let Some(ga) = grad_buf(grads, nodes, a) {
                for ((gx, gy), y) in ga
                    .chunks_mut(dim)
                    .zip(g.chunks(dim))
                    .zip(node.value.chunks(dim))
                {
                    let dot: f64 = gy.iter().zip(y).map(|(p, q)| p * q).sum();
                    for c in 0..dim {
                        gx[c] += y[c] * (gy[c] - dot);
                    }
                }
            }
        }
        &Op::LogSoftmax { a, dim } => {
            if let Some(ga) = grad_buf(grads, nodes, a) {
                for ((gx, gy), y) in ga
                    .chunks_mut(dim)
                    .zip(g.chunks(dim))
                    .zip(node.value.chunks(dim))
                {
                    let total: f64 = gy.iter().sum();
                    for c in 0..dim {
                        gx[c] += gy[c] - y[c].exp() * total;
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            dim,
            xhat,
            rstd,
        } => {
            let dim = *dim;
            let gv = &nodes[gain.0].value;
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                let mut dxhat = vec![0.0; dim];
                for (r, rs) in rstd.iter().enumerate() {
                    let gy = &g[r * dim..(r + 1) * dim];
                    let xh = &xhat[r * dim..(r + 1) * dim];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for c in 0..dim {
                        dxhat[c] = gy[c] * gv[c];
                        mean_d += dxhat[c];
                        mean_dx += dxhat[c] * xh[c];
                    }
                    mean_d /= dim as f64;
                    mean_dx /= dim as f64;
                    let out = &mut gx[r * dim..(r + 1) * dim];
                    for c in 0..dim {
                        out[c] += rs * (dxhat[c] - mean_d - xh[c] * mean_dx);
                    }
                }
            }
            if let Some(gg) = grad_buf(grads, nodes, *gain) {
                for (idx, y) in g.iter().enumerate() {
                    gg[idx % dim] += y * xhat[idx];
                }
            }
            if let Some(gb) = grad_buf(grads, nodes, *bias) {
                for (idx, y) in g.iter().enumerate() {
                    gb[idx % dim] += y;
                }
            }
        }
        Op::SelectRows { src, idx, row } => {
            if let Some(gs) = grad_buf(grads, nodes, *src) {
                for (o, &r) in idx.iter().enumerate() {
                    let dst = &mut gs[r * row..(r + 1) * row];
                    for (x, y) in dst.iter_mut().zip(&g[o * row..(o + 1) * row]) {
                        *x += y;
                    }
                }
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = split_axis(&node.shape, *axis);
            let mut offset = 0;
            for p in parts {
                let len = nodes[p.0].shape[*axis];
                if let Some(gp) = grad_buf(grads, nodes, *p) {
                    let chunk = len * inner;
                    for o in 0..outer {
                        let src = &g[o * total * inner + offset * inner..][..chunk];
                        for (x, y) in gp[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                }
                offset += len;
            }
        }
        &Op::Slice { a, axis, start } => {
            let (outer, n, inner) = split_axis(&nodes[a.0].shape, axis);
            let len = node.shape[axis];
            if let Some(ga) = grad_buf(grads, nodes, a) {
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    for (x, y) in ga[base..base + len * inner].iter_mut().zip(src) {
                        *x += y;
                    }
                }
            }
        }
        &Op::Sum { a } => {
            if let Some(ga) = grad_buf(grads, nodes, a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        &Op::Mean { a } => {
            if let Some(ga) = grad_buf(grads, nodes, a) {
                let s = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|x| *x += s);
            }
        }
        &Op::SumLast { a, dim } => {
            if let Some(ga) = grad_buf(grads, nodes, a) {
                for (idx, x) in ga.iter_mut().enumerate() {
                    *x += g[idx / dim];
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            seq,
            heads,
            valid,
            probs,
        } => {
            let (seq, heads) = (*seq, *heads);
            let d = node.shape[1];
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let batch = node.shape[0] / seq;
            let qv = &nodes[q.0].value;
            let kv = &nodes[k.0].value;
            let vv = &nodes[v.0].value;
            let mut dq = vec![0.0; qv.len()];
            let mut dk = vec![0.0; qv.len()];
            let mut dv = vec![0.0; qv.len()];
            let mut dp = vec![0.0; seq];
            for b in 0..batch {
                let r0 = b * seq;
                for h in 0..heads {
                    let off = h * dh;
                    for i in 0..seq {
                        if !valid[r0 + i] {
                            continue;
                        }
                        let p = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                        let gi = &g[(r0 + i) * d + off..][..dh];
                        let mut weighted = 0.0;
                        for j in 0..=i {
                            if !valid[r0 + j] {
                                continue;
                            }
                            let vj = &vv[(r0 + j) * d + off..][..dh];
                            dp[j] = gi.iter().zip(vj).map(|(x, y)| x * y).sum();
                            weighted += p[j] * dp[j];
                            let dvj = &mut dv[(r0 + j) * d + off..][..dh];
                            for (x, y) in dvj.iter_mut().zip(gi) {
                                *x += p[j] * y;
                            }
                        }
                        let qi = &qv[(r0 + i) * d + off..][..dh];
                        for j in 0..=i {
                            if !valid[r0 + j] {
                                continue;
                            }
                            let ds = p[j] * (dp[j] - weighted) * scale;
                            let kj = &kv[(r0 + j) * d + off..][..dh];
                            let dqi = &mut dq[(r0 + i) * d + off..][..dh];
                            for (x, y) in dqi.iter_mut().zip(kj) {
                                *x += ds * y;
                            }
                            let dkj = &mut dk[(r0 + j) * d + off..][..dh];
                            for (x, y) in dkj.iter_mut().zip(qi) {
                                *x += ds * y;
                            }
                        }
                    }
                }
            }
            for (var, contrib) in [(*q, dq), (*k, dk), (*v, dv)] {
                if let Some(buf) = grad_buf(grads, nodes, var) {
                    buf.iter_mut().zip(&contrib).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
}
