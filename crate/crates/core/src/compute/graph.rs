//! Tape-based reverse-mode differentiation over dense f64 tensors.
//!
//! A `Graph` records every executed operation in order. `backward` replays
//! the record in exact reverse, accumulating adjoints additively. The op set
//! is deliberately minimal: exactly what a BERT-style encoder and its
//! distillation losses require.

use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use rand::Rng;

/// Handle to a tensor stored in a [`Graph`]. Only valid for the graph that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Attention-mask bias added to masked score entries instead of true -inf,
/// keeping gradients finite through softmax.
pub const MASK_BIAS: f64 = -1e9;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: TensorId,
        b: TensorId,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        x: TensorId,
        factor: f64,
    },
    AddBias {
        x: TensorId,
        bias: TensorId,
    },
    SoftmaxRows {
        x: TensorId,
    },
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    },
    Gelu {
        x: TensorId,
    },
    Tanh {
        x: TensorId,
    },
    EmbeddingLookup {
        table: TensorId,
        ids: Vec<usize>,
    },
    Mse {
        x: TensorId,
        y: TensorId,
    },
    CrossEntropy {
        logits: TensorId,
        labels: Vec<i64>,
        probs: Vec<f64>,
        valid: usize,
    },
    Dropout {
        x: TensorId,
        keep_scale: Vec<f64>,
    },
    Gather {
        x: TensorId,
        index: Vec<usize>,
    },
    Reshape {
        x: TensorId,
    },
    Sum {
        x: TensorId,
    },
}

struct Node {
    tensor: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed operations, replayed in reverse by `backward`.
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

// ── dense kernels ──────────────────────────────────────────────────────

/// c += a[m,k] · b[k,n]
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// c += a[m,k] · b[n,k]ᵀ
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            crow[j] += s;
        }
    }
}

/// c += a[q,m]ᵀ · b[q,n]
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], q: usize, m: usize, n: usize) {
    for p in 0..q {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor as a leaf node. Its `requires_grad` flag decides
    /// whether `backward` populates a gradient for it.
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    /// Insert a constant (never differentiated) leaf.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<TensorId> {
        Ok(self.leaf(Tensor::new(shape, values)?))
    }

    fn push(&mut self, tensor: Tensor, op: Op, needs_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            tensor,
            op,
            needs_grad,
        });
        id
    }

    fn node(&self, id: TensorId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.node(id).tensor
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        self.node(id).tensor.values()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.node(id).tensor.shape()
    }

    pub fn item(&self, id: TensorId) -> Result<f64> {
        self.node(id).tensor.item()
    }

    /// Gradient of a leaf after `backward`, if one was populated.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.node(id).tensor.grad()
    }

    fn needs(&self, id: TensorId) -> bool {
        self.node(id).needs_grad
    }

    // ── operations ─────────────────────────────────────────────────────

    /// Matrix product over the last two dimensions. Leading dimensions are
    /// batch dimensions and must match, or `b` may be 2-D and is then shared
    /// across the batch.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.matmul_impl(a, b, false)
    }

    /// Like [`Graph::matmul`] with the right operand transposed:
    /// `a[..,m,k] · b[..,n,k]ᵀ -> [..,m,n]`.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: TensorId, b: TensorId, trans_b: bool) -> Result<TensorId> {
        let a_shape = self.shape(a).to_vec();
        let b_shape = self.shape(b).to_vec();
        let mismatch = |ctx: &str| Error::Shape {
            context: format!("matmul{}: {ctx}", if trans_b { "_nt" } else { "" }),
            lhs: a_shape.clone(),
            rhs: b_shape.clone(),
        };
        if a_shape.len() < 2 || b_shape.len() < 2 {
            return Err(mismatch("operands must have at least 2 dimensions"));
        }
        let (m, ka) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
        let (b_rows, b_cols) = (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1]);
        let (kb, n) = if trans_b {
            (b_cols, b_rows)
        } else {
            (b_rows, b_cols)
        };
        if ka != kb {
            return Err(mismatch("inner dimensions disagree"));
        }
        let shared_rhs = b_shape.len() == 2 && a_shape.len() > 2;
        if !shared_rhs && a_shape[..a_shape.len() - 2] != b_shape[..b_shape.len() - 2] {
            return Err(mismatch("batch dimensions disagree"));
        }
        let batch: usize = a_shape[..a_shape.len() - 2].iter().product();
        let k = ka;

        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.values(a);
            let bv = self.values(b);
            for s in 0..batch {
                let a_s = &av[s * m * k..(s + 1) * m * k];
                let b_off = if shared_rhs { 0 } else { s * k * n };
                let b_s = &bv[b_off..b_off + k * n];
                let c_s = &mut out[s * m * n..(s + 1) * m * n];
                if trans_b {
                    gemm_nt(a_s, b_s, c_s, m, k, n);
                } else {
                    gemm_nn(a_s, b_s, c_s, m, k, n);
                }
            }
        }
        let mut out_shape = a_shape[..a_shape.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            needs,
        ))
    }

    fn same_shape(&self, a: TensorId, b: TensorId, ctx: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                context: ctx.to_string(),
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "add: operands must have identical shapes")?;
        let values: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, values)?, Op::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "sub: operands must have identical shapes")?;
        let values: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, values)?, Op::Sub { a, b }, needs))
    }

    /// Elementwise product. Passing the same id twice squares the tensor
    /// with the correct (doubled) adjoint.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "mul: operands must have identical shapes")?;
        let values: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, values)?, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, x: TensorId, factor: f64) -> TensorId {
        let values: Vec<f64> = self.values(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(
            Tensor::new(shape, values).expect("scale preserves shape"),
            Op::Scale { x, factor },
            needs,
        )
    }

    /// Broadcast-add a 1-D bias over the last dimension.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let d = self.tensor(x).last_dim();
        if self.shape(bias) != [d] {
            return Err(Error::Shape {
                context: "add_bias: bias must be 1-D matching the last dimension".to_string(),
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let bv = self.values(bias).to_vec();
        let values: Vec<f64> = self
            .values(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i % d])
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Tensor::new(shape, values)?, Op::AddBias { x, bias }, needs))
    }

    /// Row softmax over the last dimension, max-subtracted for stability.
    /// Entries at exactly -inf map to exactly 0; a row of only -inf entries
    /// is an error.
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let d = self.tensor(x).last_dim();
        let xv = self.values(x);
        let rows = xv.len() / d;
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow { row: r });
            }
            let orow = &mut out[r * d..(r + 1) * d];
            let mut sum = 0.0;
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::SoftmaxRows { x }, needs))
    }

    /// Per-row standardization over the last dimension (population variance
    /// plus `eps`), then elementwise affine with `gain` and `bias`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        if eps <= 0.0 {
            return Err(Error::Config(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let d = self.tensor(x).last_dim();
        for (name, t) in [("gain", gain), ("bias", bias)] {
            if self.shape(t) != [d] {
                return Err(Error::Shape {
                    context: format!("layer_norm: {name} must be 1-D of the last dimension"),
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(t).to_vec(),
                });
            }
        }
        let xv = self.values(x);
        let rows = xv.len() / d;
        let gv = self.values(gain).to_vec();
        let bv = self.values(bias).to_vec();
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            let orow = &mut out[r * d..(r + 1) * d];
            for j in 0..d {
                orow[j] = (row[j] - mean) * inv_std * gv[j] + bv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm { x, gain, bias, eps },
            needs,
        ))
    }

    /// GELU activation, tanh approximation.
    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let values: Vec<f64> = self.values(x).iter().map(|&v| gelu_value(v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(
            Tensor::new(shape, values).expect("gelu preserves shape"),
            Op::Gelu { x },
            needs,
        )
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let values: Vec<f64> = self.values(x).iter().map(|v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(
            Tensor::new(shape, values).expect("tanh preserves shape"),
            Op::Tanh { x },
            needs,
        )
    }

    /// Row gather from a 2-D table; the backward pass scatter-adds into the
    /// table gradient, so repeated ids accumulate.
    pub fn embedding_lookup(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let tshape = self.shape(table).to_vec();
        if tshape.len() != 2 {
            return Err(Error::Shape {
                context: "embedding_lookup: table must be 2-D".to_string(),
                lhs: tshape,
                rhs: vec![],
            });
        }
        let (vocab, d) = (tshape[0], tshape[1]);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    context: "embedding_lookup: id outside table".to_string(),
                    id,
                    limit: vocab,
                });
            }
        }
        let tv = self.values(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::EmbeddingLookup {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Mean over all elements of the squared difference.
    pub fn mse(&mut self, x: TensorId, y: TensorId) -> Result<TensorId> {
        self.same_shape(x, y, "mse: operands must have identical shapes")?;
        let n = self.tensor(x).numel() as f64;
        let sum: f64 = self
            .values(x)
            .iter()
            .zip(self.values(y))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let needs = self.needs(x) || self.needs(y);
        Ok(self.push(Tensor::scalar(sum / n), Op::Mse { x, y }, needs))
    }

    /// Mean negative log-softmax of the true class over non-ignored rows.
    /// A label of [`IGNORE_LABEL`] excludes its row from the mean.
    pub fn cross_entropy(&mut self, logits: TensorId, labels: &[i64]) -> Result<TensorId> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape {
                context: "cross_entropy: logits must be 2-D".to_string(),
                lhs: shape,
                rhs: vec![],
            });
        }
        let (rows, classes) = (shape[0], shape[1]);
        if labels.len() != rows {
            return Err(Error::Shape {
                context: "cross_entropy: one label per logits row".to_string(),
                lhs: vec![rows],
                rhs: vec![labels.len()],
            });
        }
        let lv = self.values(logits);
        let mut probs = vec![0.0; rows * classes];
        let mut total = 0.0;
        let mut valid = 0usize;
        for r in 0..rows {
            let label = labels[r];
            if label == IGNORE_LABEL {
                continue;
            }
            if label < 0 || label as usize >= classes {
                return Err(Error::Index {
                    context: "cross_entropy: label outside class range".to_string(),
                    id: label.max(0) as usize,
                    limit: classes,
                });
            }
            let row = &lv[r * classes..(r + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let prow = &mut probs[r * classes..(r + 1) * classes];
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (v - max).exp();
                sum += *p;
            }
            for p in prow.iter_mut() {
                *p /= sum;
            }
            total -= (row[label as usize] - max - sum.ln()).min(0.0);
            valid += 1;
        }
        if valid == 0 {
            return Err(Error::Data(
                "cross_entropy: empty batch, all rows ignored".to_string(),
            ));
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total / valid as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                valid,
            },
            needs,
        ))
    }

    /// Inverted dropout: in training, zero each element with probability
    /// `rate` and scale survivors by 1/(1-rate); in inference, identity
    /// (returns the input id unchanged).
    pub fn dropout(
        &mut self,
        x: TensorId,
        rate: f64,
        rng: &mut ChaCha8Rng,
        training: bool,
    ) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let keep_scale: Vec<f64> = (0..self.tensor(x).numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let values: Vec<f64> = self
            .values(x)
            .iter()
            .zip(&keep_scale)
            .map(|(v, s)| v * s)
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(shape, values)?,
            Op::Dropout { x, keep_scale },
            needs,
        ))
    }

    /// Pure index relocation: `out[i] = x[index[i]]`. Covers head
    /// splitting/merging, transposes, and row selection; the backward pass
    /// scatter-adds through the same index.
    pub fn gather(&mut self, x: TensorId, index: Vec<usize>, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != index.len() {
            return Err(Error::Shape {
                context: "gather: index length must match output shape".to_string(),
                lhs: shape,
                rhs: vec![index.len()],
            });
        }
        let xv = self.values(x);
        let limit = xv.len();
        let mut out = Vec::with_capacity(index.len());
        for &i in &index {
            if i >= limit {
                return Err(Error::Index {
                    context: "gather: index outside input".to_string(),
                    id: i,
                    limit,
                });
            }
            out.push(xv[i]);
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Gather { x, index }, needs))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.tensor(x).numel() {
            return Err(Error::Shape {
                context: "reshape: element count must be preserved".to_string(),
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let values = self.values(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, values)?, Op::Reshape { x }, needs))
    }

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let total: f64 = self.values(x).iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(total), Op::Sum { x }, needs)
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse replay from a scalar loss. Populates the gradient buffer of
    /// every leaf inserted with `requires_grad`. Calling twice without
    /// [`Graph::reset_gradients`] is an error.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.tensor(loss).is_scalar() {
            return Err(Error::Shape {
                context: "backward: loss must be a scalar".to_string(),
                lhs: self.shape(loss).to_vec(),
                rhs: vec![1],
            });
        }
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this graph; call reset_gradients first".to_string(),
            ));
        }
        self.backward_done = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0; self.tensor(loss).numel()]);

        for i in (0..n).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.accumulate(i, &g, &mut grads);
            if self.nodes[i].tensor.requires_grad() {
                self.nodes[i].tensor.set_grad(g);
            }
        }
        Ok(())
    }

    /// Clear all gradients and allow another backward pass.
    pub fn reset_gradients(&mut self) {
        for node in &mut self.nodes {
            node.tensor.clear_grad();
        }
        self.backward_done = false;
    }

    fn ensure<'a>(
        grads: &'a mut [Option<Vec<f64>>],
        id: TensorId,
        numel: usize,
    ) -> &'a mut Vec<f64> {
        grads[id.0].get_or_insert_with(|| vec![0.0; numel])
    }

    fn accumulate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                let av = self.values(a);
                let bv = self.values(b);
                if self.needs(a) {
                    let ga = Self::ensure(grads, a, av.len());
                    for s in 0..batch {
                        let g_s = &g[s * m * n..(s + 1) * m * n];
                        let b_off = if shared_rhs { 0 } else { s * k * n };
                        let b_s = &bv[b_off..b_off + k * n];
                        let ga_s = &mut ga[s * m * k..(s + 1) * m * k];
                        if trans_b {
                            // C = A·Bᵀ with B stored [n,k]: dA = G·B
                            gemm_nn(g_s, b_s, ga_s, m, n, k);
                        } else {
                            // dA = G·Bᵀ with B stored [k,n]
                            gemm_nt(g_s, b_s, ga_s, m, n, k);
                        }
                    }
                }
                if self.needs(b) {
                    let gb = Self::ensure(grads, b, bv.len());
                    for s in 0..batch {
                        let g_s = &g[s * m * n..(s + 1) * m * n];
                        let a_s = &av[s * m * k..(s + 1) * m * k];
                        let b_off = if shared_rhs { 0 } else { s * k * n };
                        let gb_s = &mut gb[b_off..b_off + k * n];
                        if trans_b {
                            // dB = Gᵀ·A, shapes [n,m]·[m,k]
                            gemm_tn(g_s, a_s, gb_s, m, n, k);
                        } else {
                            // dB = Aᵀ·G, shapes [k,m]·[m,n]
                            gemm_tn(a_s, g_s, gb_s, m, k, n);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for t in [a, b] {
                    if self.needs(t) {
                        let gt = Self::ensure(grads, t, g.len());
                        for (o, v) in gt.iter_mut().zip(g) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.needs(a) {
                    let ga = Self::ensure(grads, a, g.len());
                    for (o, v) in ga.iter_mut().zip(g) {
                        *o += v;
                    }
                }
                if self.needs(b) {
                    let gb = Self::ensure(grads, b, g.len());
                    for (o, v) in gb.iter_mut().zip(g) {
                        *o -= v;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.needs(a) {
                    let bv = self.values(b).to_vec();
                    let ga = Self::ensure(grads, a, g.len());
                    for ((o, v), b_) in ga.iter_mut().zip(g).zip(&bv) {
                        *o += v * b_;
                    }
                }
                if self.needs(b) {
                    let av = self.values(a).to_vec();
                    let gb = Self::ensure(grads, b, g.len());
                    for ((o, v), a_) in gb.iter_mut().zip(g).zip(&av) {
                        *o += v * a_;
                    }
                }
            }
            Op::Scale { x, factor } => {
                if self.needs(x) {
                    let gx = Self::ensure(grads, x, g.len());
                    for (o, v) in gx.iter_mut().zip(g) {
                        *o += v * factor;
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if self.needs(x) {
                    let gx = Self::ensure(grads, x, g.len());
                    for (o, v) in gx.iter_mut().zip(g) {
                        *o += v;
                    }
                }
                if self.needs(bias) {
                    let d = self.tensor(bias).numel();
                    let gb = Self::ensure(grads, bias, d);
                    for (i, v) in g.iter().enumerate() {
                        gb[i % d] += v;
                    }
                }
            }
            Op::SoftmaxRows { x } => {
                if self.needs(x) {
                    let p = self.values(TensorId(i)).to_vec();
                    let d = self.nodes[i].tensor.last_dim();
                    let gx = Self::ensure(grads, x, g.len());
                    for r in 0..g.len() / d {
                        let prow = &p[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        let dot: f64 = prow.iter().zip(grow).map(|(p_, g_)| p_ * g_).sum();
                        let orow = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            orow[j] += prow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = self.values(x).to_vec();
                let gv = self.values(gain).to_vec();
                let d = gv.len();
                let rows = xv.len() / d;
                // Recompute row statistics; cheaper than storing them.
                let mut xhat = vec![0.0; xv.len()];
                let mut inv_std = vec![0.0; rows];
                for r in 0..rows {
                    let row = &xv[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let is = 1.0 / (var + eps).sqrt();
                    inv_std[r] = is;
                    for j in 0..d {
                        xhat[r * d + j] = (row[j] - mean) * is;
                    }
                }
                if self.needs(bias) {
                    let gb = Self::ensure(grads, bias, d);
                    for (idx, v) in g.iter().enumerate() {
                        gb[idx % d] += v;
                    }
                }
                if self.needs(gain) {
                    let gg = Self::ensure(grads, gain, d);
                    for (idx, v) in g.iter().enumerate() {
                        gg[idx % d] += v * xhat[idx];
                    }
                }
                if self.needs(x) {
                    let gx = Self::ensure(grads, x, xv.len());
                    for r in 0..rows {
                        let grow = &g[r * d..(r + 1) * d];
                        let hrow = &xhat[r * d..(r + 1) * d];
                        let mut mean_gh = 0.0;
                        let mut mean_ghh = 0.0;
                        for j in 0..d {
                            let gh = grow[j] * gv[j];
                            mean_gh += gh;
                            mean_ghh += gh * hrow[j];
                        }
                        mean_gh /= d as f64;
                        mean_ghh /= d as f64;
                        let orow = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            let gh = grow[j] * gv[j];
                            orow[j] += inv_std[r] * (gh - mean_gh - hrow[j] * mean_ghh);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                if self.needs(x) {
                    let xv = self.values(x).to_vec();
                    let gx = Self::ensure(grads, x, g.len());
                    for ((o, v), &xi) in gx.iter_mut().zip(g).zip(&xv) {
                        *o += v * gelu_derivative(xi);
                    }
                }
            }
            Op::Tanh { x } => {
                if self.needs(x) {
                    let yv = self.values(TensorId(i)).to_vec();
                    let gx = Self::ensure(grads, x, g.len());
                    for ((o, v), &y) in gx.iter_mut().zip(g).zip(&yv) {
                        *o += v * (1.0 - y * y);
                    }
                }
            }
            Op::EmbeddingLookup { table, ids } => {
                if self.needs(table) {
                    let numel = self.tensor(table).numel();
                    let d = self.tensor(table).last_dim();
                    let gt = Self::ensure(grads, table, numel);
                    for (row, &id) in ids.iter().enumerate() {
                        let grow = &g[row * d..(row + 1) * d];
                        let trow = &mut gt[id * d..(id + 1) * d];
                        for j in 0..d {
                            trow[j] += grow[j];
                        }
                    }
                }
            }
            Op::Mse { x, y } => {
                let scale = 2.0 / self.tensor(x).numel() as f64;
                let diffs: Vec<f64> = self
                    .values(x)
                    .iter()
                    .zip(self.values(y))
                    .map(|(a, b)| a - b)
                    .collect();
                let g0 = g[0];
                if self.needs(x) {
                    let gx = Self::ensure(grads, x, diffs.len());
                    for (o, d_) in gx.iter_mut().zip(&diffs) {
                        *o += g0 * scale * d_;
                    }
                }
                if self.needs(y) {
                    let gy = Self::ensure(grads, y, diffs.len());
                    for (o, d_) in gy.iter_mut().zip(&diffs) {
                        *o -= g0 * scale * d_;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                valid,
            } => {
                if self.needs(logits) {
                    let classes = self.tensor(logits).last_dim();
                    let g0 = g[0] / valid as f64;
                    let gl = Self::ensure(grads, logits, probs.len());
                    for (r, &label) in labels.iter().enumerate() {
                        if label == IGNORE_LABEL {
                            continue;
                        }
                        let prow = &probs[r * classes..(r + 1) * classes];
                        let orow = &mut gl[r * classes..(r + 1) * classes];
                        for c in 0..classes {
                            let delta = if c == label as usize { 1.0 } else { 0.0 };
                            orow[c] += g0 * (prow[c] - delta);
                        }
                    }
                }
            }
            Op::Dropout { x, keep_scale } => {
                if self.needs(x) {
                    let gx = Self::ensure(grads, x, g.len());
                    for ((o, v), s) in gx.iter_mut().zip(g).zip(&keep_scale) {
                        *o += v * s;
                    }
                }
            }
            Op::Gather { x, index } => {
                if self.needs(x) {
                    let numel = self.tensor(x).numel();
                    let gx = Self::ensure(grads, x, numel);
                    for (out_i, &src) in index.iter().enumerate() {
                        gx[src] += g[out_i];
                    }
                }
            }
            Op::Reshape { x } => {
                if self.needs(x) {
                    let gx = Self::ensure(grads, x, g.len());
                    for (o, v) in gx.iter_mut().zip(g) {
                        *o += v;
                    }
                }
            }
            Op::Sum { x } => {
                if self.needs(x) {
                    let numel = self.tensor(x).numel();
                    let gx = Self::ensure(grads, x, numel);
                    let g0 = g[0];
                    for o in gx.iter_mut() {
                        *o += g0;
                    }
                }
            }
        }
    }
}

/// Label value that excludes a row from the cross-entropy mean.
pub const IGNORE_LABEL: i64 = -1;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
