//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Operations are recorded eagerly into a [`Graph`]; `backward` walks the
//! node list in reverse and applies each operation's input-gradient rule.
//! Nodes whose ancestors contain no trainable leaf are skipped during the
//! backward pass, so constants (e.g. a frozen teacher) cost nothing.
//!
//! All kernels iterate in a fixed order: given the same inputs, results
//! are bit-identical across runs.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<E: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, E),
    Matmul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    GatherRows(NodeId, Vec<usize>),
    OverwriteRows {
        base: NodeId,
        rows: Vec<usize>,
        repl: NodeId,
    },
    SliceCols {
        a: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(NodeId, NodeId),
    SoftmaxRows(NodeId),
    ScaleRows(NodeId, Vec<E>),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: E,
    },
    Gelu(NodeId),
    MeanAll(NodeId),
    SumAll(NodeId),
    MeanRows(NodeId),
    DotRows(NodeId, NodeId),
    L2NormalizeRows(NodeId),
    CrossEntropyRows(NodeId, Vec<usize>),
    SoftCrossEntropyRows {
        logits: NodeId,
        target_probs: Vec<E>,
    },
    BceWithLogit {
        logit: NodeId,
        label: E,
    },
}

#[derive(Debug)]
struct Node<E: Scalar> {
    value: Tensor<E>,
    grad: Option<Vec<E>>,
    op: Op<E>,
    needs_grad: bool,
}

/// Recording graph for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph<E: Scalar> {
    nodes: Vec<Node<E>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<E: Scalar> Graph<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Inserts a non-trainable leaf. No gradient flows into it.
    pub fn constant(&mut self, value: Tensor<E>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Inserts a trainable leaf; `grad()` is available after `backward`.
    pub fn param(&mut self, value: Tensor<E>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[E]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, id: NodeId) -> E {
        let t = self.value(id);
        debug_assert_eq!(t.numel(), 1, "scalar_value on non-scalar node");
        t.data()[0]
    }

    fn shapes_equal(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    // ----- elementwise -----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.shapes_equal("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.shapes_equal("sub", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.shapes_equal("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: NodeId, c: E) -> NodeId {
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let ng = self.needs(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.mul(a, a)
    }

    // ----- linear algebra -----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![E::ZERO; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Matmul(a, b), ng))
    }

    /// `[m x n] + [n]` with the bias broadcast over rows.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2();
        if self.value(bias).numel() != n {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let mut data = self.value(a).data().to_vec();
        let bdata = self.value(bias).data();
        for i in 0..m {
            for (v, &bv) in data[i * n..(i + 1) * n].iter_mut().zip(bdata) {
                *v += bv;
            }
        }
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(t, Op::AddBias(a, bias), ng))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.value(a).dims2();
        let src = self.value(a).data();
        let mut out = vec![E::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], out).unwrap();
        let ng = self.needs(a);
        self.push(t, Op::Transpose(a), ng)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(Error::BadShape {
                op: "reshape",
                shape,
                reason: format!("source has {} elements", self.value(a).numel()),
            });
        }
        let t = Tensor::new(shape, self.value(a).data().to_vec())?;
        let ng = self.needs(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    // ----- row/column selection -----

    /// `out[r] = a[idx[r]]`; repeated indices scatter-add on backward.
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2();
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::BadShape {
                op: "gather_rows",
                shape: self.value(a).shape().to_vec(),
                reason: format!("row index {bad} out of range {m}"),
            });
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let t = Tensor::new(vec![idx.len(), n], out)?;
        let ng = self.needs(a);
        Ok(self.push(t, Op::GatherRows(a, idx.to_vec()), ng))
    }

    /// Copies `base` and replaces row `rows[r]` with `repl` row `r`.
    pub fn overwrite_rows(&mut self, base: NodeId, rows: &[usize], repl: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(base).dims2();
        let (rm, rn) = self.value(repl).dims2();
        if rm != rows.len() || rn != n {
            return Err(Error::ShapeMismatch {
                op: "overwrite_rows",
                lhs: self.value(base).shape().to_vec(),
                rhs: self.value(repl).shape().to_vec(),
            });
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= m) {
            return Err(Error::BadShape {
                op: "overwrite_rows",
                shape: self.value(base).shape().to_vec(),
                reason: format!("row index {bad} out of range {m}"),
            });
        }
        let mut data = self.value(base).data().to_vec();
        let rdata = self.value(repl).data();
        for (r, &i) in rows.iter().enumerate() {
            data[i * n..(i + 1) * n].copy_from_slice(&rdata[r * n..(r + 1) * n]);
        }
        let t = Tensor::new(self.value(base).shape().to_vec(), data)?;
        let ng = self.needs(base) || self.needs(repl);
        Ok(self.push(
            t,
            Op::OverwriteRows {
                base,
                rows: rows.to_vec(),
                repl,
            },
            ng,
        ))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2();
        if start + len > n {
            return Err(Error::BadShape {
                op: "slice_cols",
                shape: self.value(a).shape().to_vec(),
                reason: format!("columns {start}..{} out of range {n}", start + len),
            });
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let t = Tensor::new(vec![m, len], out)?;
        let ng = self.needs(a);
        Ok(self.push(t, Op::SliceCols { a, start, len }, ng))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, p) = self.value(a).dims2();
        let (m2, q) = self.value(b).dims2();
        if m != m2 {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            out.extend_from_slice(&da[i * p..(i + 1) * p]);
            out.extend_from_slice(&db[i * q..(i + 1) * q]);
        }
        let t = Tensor::new(vec![m, p + q], out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::ConcatCols(a, b), ng))
    }

    // ----- nonlinearities and normalizations -----

    /// Row-wise softmax, stabilized by max subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.value(a).dims2();
        let src = self.value(a).data();
        let mut out = vec![E::ZERO; m * n];
        for i in 0..m {
            softmax_row(&src[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        let t = Tensor::new(self.value(a).shape().to_vec(), out).unwrap();
        let ng = self.needs(a);
        self.push(t, Op::SoftmaxRows(a), ng)
    }

    /// Multiplies row `i` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, a: NodeId, factors: &[E]) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2();
        if factors.len() != m {
            return Err(Error::BadShape {
                op: "scale_rows",
                shape: self.value(a).shape().to_vec(),
                reason: format!("{} factors for {m} rows", factors.len()),
            });
        }
        let src = self.value(a).data();
        let mut out = vec![E::ZERO; m * n];
        for i in 0..m {
            let f = factors[i];
            for j in 0..n {
                out[i * n + j] = src[i * n + j] * f;
            }
        }
        let t = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let ng = self.needs(a);
        Ok(self.push(t, Op::ScaleRows(a, factors.to_vec()), ng))
    }

    /// Normalizes each row to zero mean / unit variance over the last
    /// axis, then applies the affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: E) -> Result<NodeId> {
        if eps.to_f64() <= 0.0 {
            return Err(Error::Config {
                field: "layer_norm.eps".into(),
                reason: "must be positive".into(),
            });
        }
        let (m, n) = self.value(x).dims2();
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(gamma).shape().to_vec(),
            });
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![E::ZERO; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let (mean, var) = mean_var(row);
            let inv = E::ONE / (var + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, eps }, ng))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let c = E::from_f64(GELU_C);
        let k = E::from_f64(GELU_A);
        let half = E::from_f64(0.5);
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| {
                let inner = c * (x + k * x * x * x);
                half * x * (E::ONE + inner.tanh())
            })
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let ng = self.needs(a);
        self.push(t, Op::Gelu(a), ng)
    }

    // ----- reductions -----

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel();
        let sum = sum_slice(self.value(a).data());
        let t = Tensor::scalar(sum / E::from_f64(n as f64));
        let ng = self.needs(a);
        self.push(t, Op::MeanAll(a), ng)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let t = Tensor::scalar(sum_slice(self.value(a).data()));
        let ng = self.needs(a);
        self.push(t, Op::SumAll(a), ng)
    }

    /// Column means: `[m x n] -> [1 x n]`.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.value(a).dims2();
        let src = self.value(a).data();
        let inv = E::from_f64(1.0 / m as f64);
        let mut out = vec![E::ZERO; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += src[i * n + j];
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        let t = Tensor::new(vec![1, n], out).unwrap();
        let ng = self.needs(a);
        self.push(t, Op::MeanRows(a), ng)
    }

    /// Per-row dot products: `[m x n] , [m x n] -> [m x 1]`.
    pub fn dot_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.shapes_equal("dot_rows", a, b)?;
        let (m, n) = self.value(a).dims2();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![E::ZERO; m];
        for i in 0..m {
            out[i] = dot(&da[i * n..(i + 1) * n], &db[i * n..(i + 1) * n]);
        }
        let t = Tensor::new(vec![m, 1], out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::DotRows(a, b), ng))
    }

    /// Scales each row to unit l2 norm.
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.value(a).dims2();
        let src = self.value(a).data();
        let mut out = vec![E::ZERO; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let r = row_norm(row);
            let inv = E::ONE / r;
            for j in 0..n {
                out[i * n + j] = row[j] * inv;
            }
        }
        let t = Tensor::new(self.value(a).shape().to_vec(), out).unwrap();
        let ng = self.needs(a);
        self.push(t, Op::L2NormalizeRows(a), ng)
    }

    // ----- losses -----

    /// Mean cross-entropy of `logits` rows against integer `targets`.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (m, n) = self.value(logits).dims2();
        if targets.len() != m {
            return Err(Error::BadShape {
                op: "cross_entropy_rows",
                shape: self.value(logits).shape().to_vec(),
                reason: format!("{} targets for {m} rows", targets.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::BadShape {
                op: "cross_entropy_rows",
                shape: self.value(logits).shape().to_vec(),
                reason: format!("target {bad} out of range {n}"),
            });
        }
        let src = self.value(logits).data();
        let mut total = E::ZERO;
        for (i, &t) in targets.iter().enumerate() {
            let row = &src[i * n..(i + 1) * n];
            total += log_sum_exp(row) - row[t];
        }
        let t = Tensor::scalar(total / E::from_f64(m as f64));
        let ng = self.needs(logits);
        Ok(self.push(t, Op::CrossEntropyRows(logits, targets.to_vec()), ng))
    }

    /// Mean soft cross-entropy: `-sum(q * log_softmax(logits))` per row,
    /// where `q` is a constant probability row (no gradient to `q`).
    pub fn soft_cross_entropy_rows(&mut self, logits: NodeId, target_probs: &Tensor<E>) -> Result<NodeId> {
        if self.value(logits).shape() != target_probs.shape() {
            return Err(Error::ShapeMismatch {
                op: "soft_cross_entropy_rows",
                lhs: self.value(logits).shape().to_vec(),
                rhs: target_probs.shape().to_vec(),
            });
        }
        let (m, n) = self.value(logits).dims2();
        let src = self.value(logits).data();
        let q = target_probs.data();
        let mut total = E::ZERO;
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let lse = log_sum_exp(row);
            let mut acc = E::ZERO;
            for j in 0..n {
                acc += q[i * n + j] * (row[j] - lse);
            }
            total += -acc;
        }
        let t = Tensor::scalar(total / E::from_f64(m as f64));
        let ng = self.needs(logits);
        Ok(self.push(
            t,
            Op::SoftCrossEntropyRows {
                logits,
                target_probs: q.to_vec(),
            },
            ng,
        ))
    }

    /// Binary cross-entropy on a single logit with label in {0, 1}.
    pub fn bce_with_logit(&mut self, logit: NodeId, label: bool) -> Result<NodeId> {
        if self.value(logit).numel() != 1 {
            return Err(Error::BadShape {
                op: "bce_with_logit",
                shape: self.value(logit).shape().to_vec(),
                reason: "expects a single logit".into(),
            });
        }
        let x = self.value(logit).data()[0];
        let y = if label { E::ONE } else { E::ZERO };
        // max(x,0) - y*x + ln(1 + exp(-|x|))
        let loss = x.maximum(E::ZERO) - y * x + (E::ONE + (-x.abs()).exp()).ln();
        let t = Tensor::scalar(loss);
        let ng = self.needs(logit);
        Ok(self.push(t, Op::BceWithLogit { logit, label: y }, ng))
    }

    // ----- backward -----

    /// Seeds `d(loss)/d(loss) = 1` and propagates gradients to every
    /// trainable leaf reachable from `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::BadShape {
                op: "backward",
                shape: self.value(loss).shape().to_vec(),
                reason: "loss must be scalar".into(),
            });
        }
        self.nodes[loss.0].grad = Some(vec![E::ONE]);
        for id in (0..=loss.0).rev() {
            self.backward_step(id);
        }
        Ok(())
    }

    fn backward_step(&mut self, id: usize) {
        if !self.nodes[id].needs_grad || self.nodes[id].grad.is_none() {
            return;
        }
        let (parents, rest) = self.nodes.split_at_mut(id);
        let node = &rest[0];
        let dy = node.grad.as_deref().unwrap();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accum(parents, *a, dy, |d, i| d[i]);
                accum(parents, *b, dy, |d, i| d[i]);
            }
            Op::Sub(a, b) => {
                accum(parents, *a, dy, |d, i| d[i]);
                accum(parents, *b, dy, |d, i| -d[i]);
            }
            Op::Mul(a, b) => {
                let av = parents[a.0].value.data().to_vec();
                let bv = parents[b.0].value.data().to_vec();
                accum(parents, *a, dy, |d, i| d[i] * bv[i]);
                accum(parents, *b, dy, |d, i| d[i] * av[i]);
            }
            Op::Scale(a, c) => {
                let c = *c;
                accum(parents, *a, dy, |d, i| d[i] * c);
            }
            Op::Matmul(a, b) => {
                let (m, k) = parents[a.0].value.dims2();
                let n = parents[b.0].value.dims2().1;
                if parents[a.0].needs_grad {
                    let bv = parents[b.0].value.data().to_vec();
                    let ga = grad_slot(&mut parents[a.0]);
                    matmul_abt_acc(dy, &bv, m, n, k, ga);
                }
                if parents[b.0].needs_grad {
                    let av = parents[a.0].value.data().to_vec();
                    let gb = grad_slot(&mut parents[b.0]);
                    matmul_atb_acc(&av, dy, m, k, n, gb);
                }
            }
            Op::AddBias(a, bias) => {
                let (m, n) = parents[a.0].value.dims2();
                accum(parents, *a, dy, |d, i| d[i]);
                if parents[bias.0].needs_grad {
                    let g = grad_slot(&mut parents[bias.0]);
                    for i in 0..m {
                        for j in 0..n {
                            g[j] += dy[i * n + j];
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = parents[a.0].value.dims2();
                if parents[a.0].needs_grad {
                    let g = grad_slot(&mut parents[a.0]);
                    for i in 0..m {
                        for j in 0..n {
                            g[i * n + j] += dy[j * m + i];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                accum(parents, *a, dy, |d, i| d[i]);
            }
            Op::GatherRows(a, idx) => {
                let n = parents[a.0].value.dims2().1;
                if parents[a.0].needs_grad {
                    let idx = idx.clone();
                    let g = grad_slot(&mut parents[a.0]);
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..n {
                            g[i * n + j] += dy[r * n + j];
                        }
                    }
                }
            }
            Op::OverwriteRows { base, rows, repl } => {
                let (m, n) = parents[base.0].value.dims2();
                let mut replaced = vec![false; m];
                for &r in rows {
                    replaced[r] = true;
                }
                if parents[base.0].needs_grad {
                    let g = grad_slot(&mut parents[base.0]);
                    for i in 0..m {
                        if !replaced[i] {
                            for j in 0..n {
                                g[i * n + j] += dy[i * n + j];
                            }
                        }
                    }
                }
                if parents[repl.0].needs_grad {
                    let rows = rows.clone();
                    let g = grad_slot(&mut parents[repl.0]);
                    for (r, &i) in rows.iter().enumerate() {
                        for j in 0..n {
                            g[r * n + j] += dy[i * n + j];
                        }
                    }
                }
            }
            Op::SliceCols { a, start, len } => {
                let (m, n) = parents[a.0].value.dims2();
                let (start, len) = (*start, *len);
                if parents[a.0].needs_grad {
                    let g = grad_slot(&mut parents[a.0]);
                    for i in 0..m {
                        for j in 0..len {
                            g[i * n + start + j] += dy[i * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (m, p) = parents[a.0].value.dims2();
                let q = parents[b.0].value.dims2().1;
                if parents[a.0].needs_grad {
                    let g = grad_slot(&mut parents[a.0]);
                    for i in 0..m {
                        for j in 0..p {
                            g[i * p + j] += dy[i * (p + q) + j];
                        }
                    }
                }
                if parents[b.0].needs_grad {
                    let g = grad_slot(&mut parents[b.0]);
                    for i in 0..m {
                        for j in 0..q {
                            g[i * q + j] += dy[i * (p + q) + p + j];
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = node.value.dims2();
                let y = node.value.data();
                if parents[a.0].needs_grad {
                    let mut dx = vec![E::ZERO; m * n];
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let dr = &dy[i * n..(i + 1) * n];
                        let s = dot(dr, yr);
                        for j in 0..n {
                            dx[i * n + j] = yr[j] * (dr[j] - s);
                        }
                    }
                    let g = grad_slot(&mut parents[a.0]);
                    for (gi, di) in g.iter_mut().zip(&dx) {
                        *gi += *di;
                    }
                }
            }
            Op::ScaleRows(a, factors) => {
                let n = parents[a.0].value.dims2().1;
                let factors = factors.clone();
                accum(parents, *a, dy, |d, i| d[i] * factors[i / n]);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (m, n) = parents[x.0].value.dims2();
                let xv = parents[x.0].value.data().to_vec();
                let gv = parents[gamma.0].value.data().to_vec();
                let eps = *eps;
                let inv_n = E::from_f64(1.0 / n as f64);
                // recompute per-row statistics
                let mut dx_total = vec![E::ZERO; m * n];
                let mut dgamma = vec![E::ZERO; n];
                let mut dbeta = vec![E::ZERO; n];
                for i in 0..m {
                    let row = &xv[i * n..(i + 1) * n];
                    let dr = &dy[i * n..(i + 1) * n];
                    let (mean, var) = mean_var(row);
                    let inv = E::ONE / (var + eps).sqrt();
                    let mut mean_g = E::ZERO;
                    let mut mean_gx = E::ZERO;
                    for j in 0..n {
                        let xh = (row[j] - mean) * inv;
                        let gd = gv[j] * dr[j];
                        mean_g += gd;
                        mean_gx += gd * xh;
                        dgamma[j] += dr[j] * xh;
                        dbeta[j] += dr[j];
                    }
                    mean_g = mean_g * inv_n;
                    mean_gx = mean_gx * inv_n;
                    for j in 0..n {
                        let xh = (row[j] - mean) * inv;
                        dx_total[i * n + j] = (gv[j] * dr[j] - mean_g - xh * mean_gx) * inv;
                    }
                }
                if parents[x.0].needs_grad {
                    let g = grad_slot(&mut parents[x.0]);
                    for (gi, di) in g.iter_mut().zip(&dx_total) {
                        *gi += *di;
                    }
                }
                if parents[gamma.0].needs_grad {
                    let g = grad_slot(&mut parents[gamma.0]);
                    for (gi, di) in g.iter_mut().zip(&dgamma) {
                        *gi += *di;
                    }
                }
                if parents[beta.0].needs_grad {
                    let g = grad_slot(&mut parents[beta.0]);
                    for (gi, di) in g.iter_mut().zip(&dbeta) {
                        *gi += *di;
                    }
                }
            }
            Op::Gelu(a) => {
                let xv = parents[a.0].value.data().to_vec();
                let c = E::from_f64(GELU_C);
                let k = E::from_f64(GELU_A);
                let half = E::from_f64(0.5);
                let three = E::from_f64(3.0);
                accum(parents, *a, dy, |d, i| {
                    let x = xv[i];
                    let inner = c * (x + k * x * x * x);
                    let t = inner.tanh();
                    let sech2 = E::ONE - t * t;
                    let dinner = c * (E::ONE + three * k * x * x);
                    d[i] * (half * (E::ONE + t) + half * x * sech2 * dinner)
                });
            }
            Op::MeanAll(a) => {
                let inv = E::from_f64(1.0 / parents[a.0].value.numel() as f64);
                let d0 = dy[0];
                accum(parents, *a, dy, |_, _| d0 * inv);
            }
            Op::SumAll(a) => {
                let d0 = dy[0];
                accum(parents, *a, dy, |_, _| d0);
            }
            Op::MeanRows(a) => {
                let (m, n) = parents[a.0].value.dims2();
                let inv = E::from_f64(1.0 / m as f64);
                accum(parents, *a, dy, |d, i| d[i % n] * inv);
            }
            Op::DotRows(a, b) => {
                let n = parents[a.0].value.dims2().1;
                let av = parents[a.0].value.data().to_vec();
                let bv = parents[b.0].value.data().to_vec();
                accum(parents, *a, dy, |d, i| d[i / n] * bv[i]);
                accum(parents, *b, dy, |d, i| d[i / n] * av[i]);
            }
            Op::L2NormalizeRows(a) => {
                let (m, n) = parents[a.0].value.dims2();
                let xv = parents[a.0].value.data().to_vec();
                if parents[a.0].needs_grad {
                    let mut dx = vec![E::ZERO; m * n];
                    for i in 0..m {
                        let row = &xv[i * n..(i + 1) * n];
                        let dr = &dy[i * n..(i + 1) * n];
                        let r = row_norm(row);
                        let inv = E::ONE / r;
                        let mut udot = E::ZERO;
                        for j in 0..n {
                            udot += row[j] * inv * dr[j];
                        }
                        for j in 0..n {
                            let u = row[j] * inv;
                            dx[i * n + j] = (dr[j] - u * udot) * inv;
                        }
                    }
                    let g = grad_slot(&mut parents[a.0]);
                    for (gi, di) in g.iter_mut().zip(&dx) {
                        *gi += *di;
                    }
                }
            }
            Op::CrossEntropyRows(logits, targets) => {
                let (m, n) = parents[logits.0].value.dims2();
                let src = parents[logits.0].value.data().to_vec();
                let scale = dy[0] / E::from_f64(m as f64);
                if parents[logits.0].needs_grad {
                    let targets = targets.clone();
                    let g = grad_slot(&mut parents[logits.0]);
                    let mut p = vec![E::ZERO; n];
                    for (i, &t) in targets.iter().enumerate() {
                        softmax_row(&src[i * n..(i + 1) * n], &mut p);
                        for j in 0..n {
                            let ind = if j == t { E::ONE } else { E::ZERO };
                            g[i * n + j] += (p[j] - ind) * scale;
                        }
                    }
                }
            }
            Op::SoftCrossEntropyRows { logits, target_probs } => {
                let (m, n) = parents[logits.0].value.dims2();
                let src = parents[logits.0].value.data().to_vec();
                let scale = dy[0] / E::from_f64(m as f64);
                if parents[logits.0].needs_grad {
                    let q = target_probs.clone();
                    let g = grad_slot(&mut parents[logits.0]);
                    let mut p = vec![E::ZERO; n];
                    for i in 0..m {
                        softmax_row(&src[i * n..(i + 1) * n], &mut p);
                        for j in 0..n {
                            g[i * n + j] += (p[j] - q[i * n + j]) * scale;
                        }
                    }
                }
            }
            Op::BceWithLogit { logit, label } => {
                let x = parents[logit.0].value.data()[0];
                let y = *label;
                let sig = E::ONE / (E::ONE + (-x).exp());
                let d0 = dy[0];
                accum(parents, *logit, dy, |_, _| (sig - y) * d0);
            }
        }
    }
}

fn grad_slot<E: Scalar>(node: &mut Node<E>) -> &mut [E] {
    if node.grad.is_none() {
        node.grad = Some(vec![E::ZERO; node.value.numel()]);
    }
    node.grad.as_deref_mut().unwrap()
}

/// Accumulates `f(dy, i)` into the gradient of `target`, elementwise over
/// the target's buffer. Skipped entirely for non-trainable ancestors.
fn accum<E: Scalar>(
    parents: &mut [Node<E>],
    target: NodeId,
    dy: &[E],
    f: impl Fn(&[E], usize) -> E,
) {
    if !parents[target.0].needs_grad {
        return;
    }
    let g = grad_slot(&mut parents[target.0]);
    for (i, gi) in g.iter_mut().enumerate() {
        *gi += f(dy, i);
    }
}

// ----- kernels -----

fn zip_map<E: Scalar>(a: &[E], b: &[E], f: impl Fn(E, E) -> E) -> Vec<E> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn sum_slice<E: Scalar>(a: &[E]) -> E {
    let mut s = E::ZERO;
    for &x in a {
        s += x;
    }
    s
}

fn dot<E: Scalar>(a: &[E], b: &[E]) -> E {
    let mut s = E::ZERO;
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

fn mean_var<E: Scalar>(row: &[E]) -> (E, E) {
    let inv = E::from_f64(1.0 / row.len() as f64);
    let mean = sum_slice(row) * inv;
    let mut var = E::ZERO;
    for &x in row {
        let d = x - mean;
        var += d * d;
    }
    (mean, var * inv)
}

fn row_norm<E: Scalar>(row: &[E]) -> E {
    let mut s = E::from_f64(1.0e-24);
    for &x in row {
        s += x * x;
    }
    s.sqrt()
}

fn softmax_row<E: Scalar>(row: &[E], out: &mut [E]) {
    let mut max = row[0];
    for &x in &row[1..] {
        max = max.maximum(x);
    }
    let mut sum = E::ZERO;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    let inv = E::ONE / sum;
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

fn log_sum_exp<E: Scalar>(row: &[E]) -> E {
    let mut max = row[0];
    for &x in &row[1..] {
        max = max.maximum(x);
    }
    let mut sum = E::ZERO;
    for &x in row {
        sum += (x - max).exp();
    }
    sum.ln() + max
}

/// `out += a @ b` for row-major `a [m x k]`, `b [k x n]`.
fn matmul_acc<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a @ b^T` for `a [m x n]`, `b [k x n]` -> `[m x k]`.
fn matmul_abt_acc<E: Scalar>(a: &[E], b: &[E], m: usize, n: usize, k: usize, out: &mut [E]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            out[i * k + kk] += dot(arow, brow);
        }
    }
}

/// `out += a^T @ b` for `a [m x k]`, `b [m x n]` -> `[k x n]`.
fn matmul_atb_acc<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g.constant(t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let x = g.constant(t2(&[vec![3.0, 4.0], vec![5.0, 6.0]]));
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,2]] . [[3],[4]] = [[11]]
        let mut g = Graph::new();
        let a = g.constant(t2(&[vec![1.0, 2.0]]));
        let b = g.constant(t2(&[vec![3.0], vec![4.0]]));
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g: Graph<f32> = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_grad_of_sum_is_transpose_broadcast() {
        // d sum(a.b) / da == rowwise sums of b's rows, i.e. (b.1)^T broadcast
        let mut g = Graph::new();
        let a = g.param(t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = g.constant(t2(&[vec![5.0, 6.0], vec![7.0, 8.0]]));
        let c = g.matmul(a, b).unwrap();
        let s = g.sum_all(c);
        g.backward(s).unwrap();
        // dA[i][k] = sum_j b[k][j]
        assert_eq!(g.grad(a).unwrap(), &[11.0, 15.0, 11.0, 15.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t2(&[vec![0.0, 0.0]]));
        let y = g.softmax_rows(x);
        let d = g.value(y).data();
        assert!((d[0] - 0.5).abs() < 1e-12);
        assert!((d[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_closed_form() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t2(&[vec![2.0_f64.ln(), 0.0]]));
        let y = g.softmax_rows(x);
        let d = g.value(y).data();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((d[1] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_no_overflow() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1000.0_f32, 0.0]]).unwrap());
        let y = g.softmax_rows(x);
        let d = g.value(y).data();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 1.0).abs() < 1e-6);
        assert!(d[1].abs() < 1e-6);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t2(&[vec![0.3, -1.2, 2.5]]));
        let xc = g.constant(t2(&[vec![0.3 + 7.0, -1.2 + 7.0, 2.5 + 7.0]]));
        let y = g.softmax_rows(x);
        let yc = g.softmax_rows(xc);
        for (a, b) in g.value(y).data().iter().zip(g.value(yc).data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rows_are_probability_vectors() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.5, -2.0, 3.0], vec![-1.0, -1.0, 4.0]]).unwrap());
        let y = g.softmax_rows(x);
        let d = g.value(y).data();
        for row in d.chunks(3) {
            assert!(row.iter().all(|&v| v >= 0.0));
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        // zero variance exercises the eps guard
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t2(&[vec![3.0, 3.0, 3.0]]));
        let gamma = g.constant(Tensor::filled(vec![3], 1.0));
        let beta = g.constant(Tensor::zeros(vec![3]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for &v in g.value(y).data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_two_point_closed_form() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t2(&[vec![1.0, 3.0]]));
        let gamma = g.constant(Tensor::filled(vec![2], 1.0));
        let beta = g.constant(Tensor::zeros(vec![2]));
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        let d = g.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-5);
        assert!((d[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_moments() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t2(&[vec![0.3, -1.0, 2.0, 0.7, -0.4, 1.1, 0.0, 5.0]]));
        let gamma = g.constant(Tensor::filled(vec![8], 1.0));
        let beta = g.constant(Tensor::zeros(vec![8]));
        let y = g.layer_norm(x, gamma, beta, 1e-9).unwrap();
        let d = g.value(y).data();
        let mean: f64 = d.iter().sum::<f64>() / 8.0;
        let var: f64 = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn gather_and_overwrite_roundtrip_grads() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.param(t2(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]));
        let picked = g.gather_rows(a, &[2, 0]).unwrap();
        assert_eq!(g.value(picked).data(), &[5.0, 6.0, 1.0, 2.0]);
        let s = g.sum_all(picked);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn overwrite_rows_blocks_base_grad_on_replaced_rows() {
        let mut g: Graph<f64> = Graph::new();
        let base = g.param(t2(&[vec![1.0, 1.0], vec![2.0, 2.0]]));
        let repl = g.param(t2(&[vec![9.0, 9.0]]));
        let y = g.overwrite_rows(base, &[1], repl).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 1.0, 9.0, 9.0]);
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(base).unwrap(), &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(g.grad(repl).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_v() {
        let mut g: Graph<f64> = Graph::new();
        let z = g.constant(Tensor::zeros(vec![2, 5]));
        let l = g.cross_entropy_rows(z, &[0, 3]).unwrap();
        assert!((g.scalar_value(l) - 5.0_f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn bce_logit_zero_is_ln2() {
        for label in [false, true] {
            let mut g: Graph<f64> = Graph::new();
            let x = g.constant(Tensor::scalar(0.0));
            let l = g.bce_with_logit(x, label).unwrap();
            assert!((g.scalar_value(l) - 2.0_f64.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn constants_get_no_grad() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(t2(&[vec![1.0, 2.0]]));
        let b = g.param(t2(&[vec![3.0, 4.0]]));
        let c = g.mul(a, b).unwrap();
        let s = g.sum_all(c);
        g.backward(s).unwrap();
        assert!(g.grad(a).is_none());
        assert_eq!(g.grad(b).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn square_accumulates_both_sides() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.param(t2(&[vec![3.0]]));
        let sq = g.square(a).unwrap();
        let s = g.sum_all(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[6.0]);
    }
}
