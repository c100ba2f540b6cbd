//! Tape-based reverse-mode differentiation.
//!
//! Every op evaluates eagerly, appends a node holding its output value, and
//! returns a [`Var`] handle. [`Tape::backward`] walks the nodes once in
//! reverse order and accumulates gradients into the leaves.

use crate::attention;
use crate::error::{NumError, Result};
use crate::linalg::{gemm, MatMut, MatRef};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F: Real> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: F,
    },
    MulConst {
        x: Var,
        mask: Vec<F>,
    },
    Gelu {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Softmax {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    BroadcastRows {
        v: Var,
    },
    GatherCols {
        x: Var,
        idx: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<F>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
    BinaryCrossEntropy {
        logits: Var,
        targets: Vec<F>,
    },
    Mse {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    grad: Option<Vec<F>>,
}

/// Ordered record of differentiable operations. Confined to one thread.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumError {
    NumError::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; gradients are tracked iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<F>) -> Var {
        let requires_grad = tensor.requires_grad;
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf with gradient tracking.
    pub fn param(&mut self, tensor: Tensor<F>) -> Var {
        self.leaf(tensor.with_grad())
    }

    /// Leaf without gradient tracking.
    pub fn constant(&mut self, mut tensor: Tensor<F>) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- ops -------------------------------------------------------------

    /// `[..., k] × [k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.shape().is_empty() || av.cols() != bv.shape()[0] {
            return Err(dim_err("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
        let mut out = vec![F::zero(); m * n];
        gemm(
            F::one(),
            MatRef::dense(av.data(), m, k),
            MatRef::dense(bv.data(), k, n),
            F::zero(),
            MatMut::dense(&mut out, m, n),
        );
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
    ) -> Result<Tensor<F>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err(op, av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub { a, b }, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    /// Adds a `[n]` bias to every row of `[..., n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.shape().len() != 1 || bv.len() != xv.cols() {
            return Err(dim_err("add_bias", xv.shape(), bv.shape()));
        }
        let n = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (y, &c) in row.iter_mut().zip(bv.data()) {
                *y += c;
            }
        }
        let value = Tensor::new(xv.shape(), data)?;
        Ok(self.push(value, Op::AddBias { x, b }, &[x, b]))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let xv = self.value(x);
        let value = Tensor::new(xv.shape(), xv.data().iter().map(|&v| v * s).collect()).unwrap();
        self.push(value, Op::Scale { x, s }, &[x])
    }

    /// Elementwise product with a constant (e.g. a dropout mask).
    pub fn mul_const(&mut self, x: Var, mask: Vec<F>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(dim_err("mul_const", xv.shape(), &[mask.len()]));
        }
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::new(xv.shape(), data)?;
        Ok(self.push(value, Op::MulConst { x, mask }, &[x]))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = F::from_f64(GELU_C);
        let a = F::from_f64(GELU_A);
        let half = F::from_f64(0.5);
        let data = xv
            .data()
            .iter()
            .map(|&v| half * v * (F::one() + (c * (v + a * v * v * v)).tanh()))
            .collect();
        let value = Tensor::new(xv.shape(), data).unwrap();
        self.push(value, Op::Gelu { x }, &[x])
    }

    /// Normalizes each row of `[..., d]` to zero mean and unit variance,
    /// then applies `gain` and `bias` (both `[d]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(dim_err("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.rows();
        let mut xhat = vec![F::zero(); xv.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xv.len()];
        let inv_d = F::one() / F::from_f64(d as f64);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(xv.cols().max(1)) {
            softmax_in_place(row);
        }
        let value = Tensor::new(xv.shape(), data).unwrap();
        self.push(value, Op::Softmax { x }, &[x])
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(dim_err("concat", sa, sb));
        }
        let (na, nb) = (av.cols(), bv.cols());
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for r in 0..av.rows() {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = na + nb;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Concat { a, b }, &[a, b]))
    }

    /// Repeats a `[n]` vector into `[rows, n]`.
    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        let vv = self.value(v);
        if vv.shape().len() != 1 {
            return Err(dim_err("broadcast_rows", vv.shape(), &[rows]));
        }
        let n = vv.len();
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(vv.data());
        }
        let value = Tensor::new(&[rows, n], data)?;
        Ok(self.push(value, Op::BroadcastRows { v }, &[v]))
    }

    /// Selects columns of the last axis: `out[.., j] = x[.., idx[j]]`.
    pub fn gather_cols(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(dim_err("gather_cols", xv.shape(), &[bad]));
        }
        let mut data = Vec::with_capacity(xv.rows() * idx.len());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            data.extend(idx.iter().map(|&i| row[i]));
        }
        let mut shape = xv.shape().to_vec();
        if shape.is_empty() {
            return Err(dim_err("gather_cols", &[], &[idx.len()]));
        }
        *shape.last_mut().unwrap() = idx.len();
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::GatherCols { x, idx }, &[x]))
    }

    /// Rows `[start, end)` of a matrix, flattening leading extents.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start > end || end > xv.rows() {
            return Err(dim_err("slice_rows", xv.shape(), &[start, end]));
        }
        let c = xv.cols();
        let data = xv.data()[start * c..end * c].to_vec();
        let value = Tensor::new(&[end - start, c], data)?;
        Ok(self.push(value, Op::SliceRows { x, start }, &[x]))
    }

    /// Multi-head causal attention over already-projected `q`, `k`, `v`
    /// (each `[t, d]`). Output row `i` depends on `k`, `v` rows `<= i` only.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape().len() != 2 || qv.shape() != kv.shape() || kv.shape() != vv.shape() {
            return Err(dim_err("causal_attention", qv.shape(), kv.shape()));
        }
        let (t, d) = (qv.shape()[0], qv.shape()[1]);
        if heads == 0 || d % heads != 0 {
            return Err(NumError::Config(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        let (out, probs) = attention::forward(qv.data(), kv.data(), vv.data(), t, d, heads);
        let value = Tensor::new(&[t, d], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, c) = (lv.rows(), lv.cols());
        if lv.shape().len() != 2 || targets.len() != n {
            return Err(dim_err("cross_entropy", lv.shape(), &[targets.len()]));
        }
        if n == 0 {
            return Err(NumError::Usage("cross_entropy over zero rows".into()));
        }
        if let Some((row, &target)) = targets.iter().enumerate().find(|(_, &t)| t >= c) {
            return Err(NumError::Label {
                row,
                target,
                classes: c,
            });
        }
        let mut probs = lv.data().to_vec();
        let mut total = F::zero();
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let lrow = lv.row(r);
            let mx = lrow.iter().copied().fold(F::neg_infinity(), F::max);
            softmax_in_place(row);
            let lse = lrow.iter().map(|&x| (x - mx).exp()).sum::<F>().ln() + mx;
            total += lse - lrow[targets[r]];
        }
        let value = Tensor::scalar(total / F::from_f64(n as f64));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean elementwise binary cross-entropy on logits.
    pub fn binary_cross_entropy(&mut self, logits: Var, targets: &Tensor<F>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != targets.shape() {
            return Err(dim_err("binary_cross_entropy", lv.shape(), targets.shape()));
        }
        let total: F = lv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| x.max(F::zero()) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(total / F::from_f64(lv.len().max(1) as f64));
        Ok(self.push(
            value,
            Op::BinaryCrossEntropy {
                logits,
                targets: targets.data().to_vec(),
            },
            &[logits],
        ))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err("mse", av.shape(), bv.shape()));
        }
        let total: F = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let value = Tensor::scalar(total / F::from_f64(av.len().max(1) as f64));
        Ok(self.push(value, Op::Mse { a, b }, &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum { x }, &[x])
    }

    // ---- reverse pass ----------------------------------------------------

    /// Accumulates d`loss`/d`leaf` into every gradient-tracking leaf.
    ///
    /// Calling this twice without [`Tape::zero_grad`] adds the gradients
    /// twice.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        let mut leaf_grads = Vec::new();
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => leaf_grads.push((i, g)),
                op => backprop(&self.nodes, &mut grads, op, &node.value, &g),
            }
        }
        for (i, g) in leaf_grads {
            match &mut self.nodes[i].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn softmax_in_place<F: Real>(row: &mut [F]) {
    let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
    for x in row.iter_mut() {
        *x = (*x - mx).fast_exp();
    }
    let sum: F = row.iter().copied().sum();
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

/// Gradient buffer for `v`, or `None` when `v` does not track gradients.
fn slot<'g, F: Real>(
    nodes: &[Node<F>],
    grads: &'g mut [Option<Vec<F>>],
    v: Var,
) -> Option<&'g mut Vec<F>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); node.value.len()]))
}

fn backprop<F: Real>(
    nodes: &[Node<F>],
    grads: &mut [Option<Vec<F>>],
    op: &Op<F>,
    out: &Tensor<F>,
    g: &[F],
) {
    let val = |v: Var| &nodes[v.0].value;
    match op {
        Op::Leaf => unreachable!(),
        Op::MatMul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
            if let Some(ga) = slot(nodes, grads, *a) {
                gemm(
                    F::one(),
                    MatRef::dense(g, m, n),
                    MatRef::dense(bv.data(), k, n).t(),
                    F::one(),
                    MatMut::dense(ga, m, k),
                );
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gemm(
                    F::one(),
                    MatRef::dense(av.data(), m, k).t(),
                    MatRef::dense(g, m, n),
                    F::one(),
                    MatMut::dense(gb, k, n),
                );
            }
        }
        Op::Add { a, b } => {
            for v in [*a, *b] {
                if let Some(gv) = slot(nodes, grads, v) {
                    gv.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
        }
        Op::Sub { a, b } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y);
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((x, &y), &o) in ga.iter_mut().zip(g).zip(bv.data()) {
                    *x += y * o;
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for ((x, &y), &o) in gb.iter_mut().zip(g).zip(av.data()) {
                    *x += y * o;
                }
            }
        }
        Op::AddBias { x, b } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, &y)| *a += y);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                let n = gb.len();
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(a, &y)| *a += y);
                }
            }
        }
        Op::Scale { x, s } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, &y)| *a += y * *s);
            }
        }
        Op::MulConst { x, mask } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((a, &y), &m) in gx.iter_mut().zip(g).zip(mask) {
                    *a += y * m;
                }
            }
        }
        Op::Gelu { x } => {
            let xv = val(*x);
            let c = F::from_f64(GELU_C);
            let a3 = F::from_f64(3.0 * GELU_A);
            let a = F::from_f64(GELU_A);
            let half = F::from_f64(0.5);
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((dst, &y), &v) in gx.iter_mut().zip(g).zip(xv.data()) {
                    let t = (c * (v + a * v * v * v)).tanh();
                    let d = half * (F::one() + t)
                        + half * v * (F::one() - t * t) * c * (F::one() + a3 * v * v);
                    *dst += y * d;
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let gv = val(*gain);
            let d = gv.len();
            let rows = rstd.len();
            if let Some(gg) = slot(nodes, grads, *gain) {
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *bias) {
                for row in g.chunks(d) {
                    gb.iter_mut().zip(row).for_each(|(a, &y)| *a += y);
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let inv_d = F::one() / F::from_f64(d as f64);
                let mut dxhat = vec![F::zero(); d];
                for r in 0..rows {
                    let mut m1 = F::zero();
                    let mut m2 = F::zero();
                    for j in 0..d {
                        let dh = g[r * d + j] * gv.data()[j];
                        dxhat[j] = dh;
                        m1 += dh;
                        m2 += dh * xhat[r * d + j];
                    }
                    m1 *= inv_d;
                    m2 *= inv_d;
                    for j in 0..d {
                        gx[r * d + j] += rstd[r] * (dxhat[j] - m1 - xhat[r * d + j] * m2);
                    }
                }
            }
        }
        Op::Softmax { x } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let c = out.cols().max(1);
                for ((p, gy), dst) in out.data().chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: F = p.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    for ((d, &pi), &gi) in dst.iter_mut().zip(p).zip(gy) {
                        *d += pi * (gi - dot);
                    }
                }
            }
        }
        Op::Concat { a, b } => {
            let (na, nb) = (val(*a).cols(), val(*b).cols());
            let w = na + nb;
            if let Some(ga) = slot(nodes, grads, *a) {
                for (dst, row) in ga.chunks_mut(na).zip(g.chunks(w)) {
                    dst.iter_mut().zip(&row[..na]).for_each(|(x, &y)| *x += y);
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for (dst, row) in gb.chunks_mut(nb).zip(g.chunks(w)) {
                    dst.iter_mut().zip(&row[na..]).for_each(|(x, &y)| *x += y);
                }
            }
        }
        Op::BroadcastRows { v } => {
            if let Some(gv) = slot(nodes, grads, *v) {
                let n = gv.len();
                for row in g.chunks(n) {
                    gv.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                }
            }
        }
        Op::GatherCols { x, idx } => {
            let n = val(*x).cols();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (dst, row) in gx.chunks_mut(n).zip(g.chunks(idx.len())) {
                    for (&i, &y) in idx.iter().zip(row) {
                        dst[i] += y;
                    }
                }
            }
        }
        Op::SliceRows { x, start } => {
            let c = val(*x).cols();
            if let Some(gx) = slot(nodes, grads, *x) {
                gx[start * c..start * c + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, &y)| *a += y);
            }
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            probs,
        } => {
            let (qv, kv, vv) = (val(*q), val(*k), val(*v));
            let (t, d) = (qv.shape()[0], qv.shape()[1]);
            // Self-attention passes the same var for q/k/v; use scratch
            // buffers so the three gradients never alias.
            let want = |x: Var| nodes[x.0].requires_grad;
            let mut dq = want(*q).then(|| vec![F::zero(); t * d]);
            let mut dk = want(*k).then(|| vec![F::zero(); t * d]);
            let mut dv = want(*v).then(|| vec![F::zero(); t * d]);
            attention::backward(
                qv.data(),
                kv.data(),
                vv.data(),
                probs,
                g,
                t,
                d,
                *heads,
                dq.as_deref_mut(),
                dk.as_deref_mut(),
                dv.as_deref_mut(),
            );
            for (x, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                if let (Some(buf), Some(dst)) = (buf, slot(nodes, grads, x)) {
                    dst.iter_mut().zip(&buf).for_each(|(a, &b)| *a += b);
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            if let Some(gl) = slot(nodes, grads, *logits) {
                let c = val(*logits).cols();
                let scale = g[0] / F::from_f64(targets.len() as f64);
                for (r, (dst, p)) in gl.chunks_mut(c).zip(probs.chunks(c)).enumerate() {
                    for (j, (d, &pj)) in dst.iter_mut().zip(p).enumerate() {
                        let y = if j == targets[r] { F::one() } else { F::zero() };
                        *d += (pj - y) * scale;
                    }
                }
            }
        }
        Op::BinaryCrossEntropy { logits, targets } => {
            let lv = val(*logits);
            if let Some(gl) = slot(nodes, grads, *logits) {
                let scale = g[0] / F::from_f64(lv.len().max(1) as f64);
                for ((d, &x), &y) in gl.iter_mut().zip(lv.data()).zip(targets) {
                    let s = F::one() / (F::one() + (-x).exp());
                    *d += (s - y) * scale;
                }
            }
        }
        Op::Mse { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let scale = F::from_f64(2.0) * g[0] / F::from_f64(av.len().max(1) as f64);
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((d, &x), &y) in ga.iter_mut().zip(av.data()).zip(bv.data()) {
                    *d += (x - y) * scale;
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for ((d, &x), &y) in gb.iter_mut().zip(av.data()).zip(bv.data()) {
                    *d -= (x - y) * scale;
                }
            }
        }
        Op::Sum { x } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
        }
    }
}
