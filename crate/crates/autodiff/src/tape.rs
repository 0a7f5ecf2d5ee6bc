//! The recording tape and every differentiable operation.

use crate::error::{Result, TensorError};
use crate::kernels::{self, axis_extents};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape
/// that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddBias {
        a: usize,
        bias: usize,
    },
    Sum {
        a: usize,
        axis: Option<usize>,
    },
    Mean {
        a: usize,
        axis: Option<usize>,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    LogSoftmax {
        a: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(usize),
    Reshape(usize),
    Permute {
        a: usize,
        source: Vec<usize>,
    },
    Take {
        a: usize,
        indices: Vec<usize>,
    },
    Concat(Vec<usize>),
    L2Normalize {
        a: usize,
        norms: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddBias { .. } => "add_bias",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Take { .. } => "take",
            Op::Concat(..) => "concat",
            Op::L2Normalize { .. } => "l2_normalize",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::BatchMatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::AddScalar(a) | Op::Gelu(a) | Op::Reshape(a) => vec![*a],
            Op::AddBias { a, bias } => vec![*a, *bias],
            Op::Sum { a, .. }
            | Op::Mean { a, .. }
            | Op::Softmax { a, .. }
            | Op::LogSoftmax { a, .. }
            | Op::Permute { a, .. }
            | Op::Take { a, .. }
            | Op::L2Normalize { a, .. } => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    /// True when some trainable leaf is reachable through this node.
    needs_grad: bool,
    /// Accumulated gradient; only used by trainable leaves.
    grad: Option<Vec<f64>>,
}

/// Append-only record of a forward computation.
///
/// The tape is meant to live for one training step. Parameters are copied in
/// as leaves, so clearing or dropping the tape never touches them.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Drops every recorded node.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Zeroes the gradient accumulators of all leaves; values are untouched.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Records `tensor` as a leaf. It is trainable iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: tensor.values().to_vec(),
            op: Op::Leaf,
            needs_grad: tensor.requires_grad(),
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a non-trainable value.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.leaf(&t))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> Result<f64> {
        let node = &self.nodes[v.0];
        if node.value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "item() on node of shape {:?}",
                node.shape
            )));
        }
        Ok(node.value[0])
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.clone()).expect("node shape is consistent")
    }

    /// Accumulated gradient of a trainable leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let needs_grad = op.inputs().iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::Shape {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(TensorError::Axis {
                op,
                axis,
                shape: self.shape(a).to_vec(),
            });
        }
        Ok(())
    }

    // ---- linear algebra -------------------------------------------------

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, 0.0);
        self.push(vec![m, n], out, Op::MatMul { a: a.0, b: b.0, m, k, n })
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]`, or with `[B, n, k]`
    /// transposed when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bad = || TensorError::Shape {
            op: "batch_matmul",
            left: sa.to_vec(),
            right: sb.to_vec(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            if sb[2] != k {
                return Err(bad());
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(bad());
            }
            sb[2]
        };
        let mut out = vec![0.0; batch * m * n];
        let (va, vb) = (self.value(a), self.value(b));
        for bi in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                &va[bi * m * k..(bi + 1) * m * k],
                false,
                &vb[bi * k * n..(bi + 1) * k * n],
                trans_b,
                &mut out[bi * m * n..(bi + 1) * m * n],
                0.0,
            );
        }
        self.push(
            vec![batch, m, n],
            out,
            Op::BatchMatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                trans_b,
            },
        )
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(TensorError::Contract(format!(
                "transpose expects rank 2, got {:?}",
                self.shape(a)
            )));
        }
        self.permute(a, &[1, 0])
    }

    // ---- element-wise ---------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(self.shape(a).to_vec(), out, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(self.shape(a).to_vec(), out, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(self.shape(a).to_vec(), out, Op::Mul(a.0, b.0))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x * s).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a.0, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x + s).collect();
        self.push(self.shape(a).to_vec(), out, Op::AddScalar(a.0))
    }

    /// Adds a vector along the last axis (`[.., n] + [n]`).
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb.len() != 1 || sa.last() != Some(&sb[0]) {
            return Err(TensorError::Shape {
                op: "add_bias",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let n = sb[0];
        let vb = self.value(bias);
        let out = self
            .value(a)
            .chunks(n.max(1))
            .flat_map(|row| row.iter().zip(vb).map(|(x, b)| x + b))
            .collect();
        self.push(sa.to_vec(), out, Op::AddBias { a: a.0, bias: bias.0 })
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| kernels::gelu(x)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Gelu(a.0))
    }

    // ---- reductions -----------------------------------------------------

    /// Sum over `axis`, or over everything when `axis` is `None` (rank-0
    /// result). The reduced axis is dropped from the shape.
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let (shape, out) = self.reduce("sum", a, axis)?;
        self.push(shape, out, Op::Sum { a: a.0, axis })
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let count = match axis {
            Some(ax) => {
                self.check_axis("mean", a, ax)?;
                self.shape(a)[ax]
            }
            None => self.value(a).len(),
        };
        if count == 0 {
            return Err(TensorError::Contract("mean over an empty extent".into()));
        }
        let (shape, mut out) = self.reduce("mean", a, axis)?;
        let inv = 1.0 / count as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        self.push(shape, out, Op::Mean { a: a.0, axis })
    }

    fn reduce(&self, op: &'static str, a: Var, axis: Option<usize>) -> Result<(Vec<usize>, Vec<f64>)> {
        let values = self.value(a);
        match axis {
            None => Ok((Vec::new(), vec![values.iter().sum()])),
            Some(ax) => {
                self.check_axis(op, a, ax)?;
                let shape = self.shape(a);
                let (outer, len, inner) = axis_extents(shape, ax);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let src = &values[(o * len + l) * inner..(o * len + l + 1) * inner];
                        let dst = &mut out[o * inner..(o + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                let mut out_shape = shape.to_vec();
                out_shape.remove(ax);
                Ok((out_shape, out))
            }
        }
    }

    // ---- normalisation --------------------------------------------------

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let out = softmax_along(self.value(a), self.shape(a), axis, false);
        self.push(self.shape(a).to_vec(), out, Op::Softmax { a: a.0, axis })
    }

    /// Log-softmax along `axis` via log-sum-exp.
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", a, axis)?;
        let out = softmax_along(self.value(a), self.shape(a), axis, true);
        self.push(self.shape(a).to_vec(), out, Op::LogSoftmax { a: a.0, axis })
    }

    /// Normalises each row over the last axis, then applies `gain` and
    /// `bias` (both `[n]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TensorError::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let sx = self.shape(x).to_vec();
        let n = *sx.last().ok_or_else(|| TensorError::Contract("layer_norm on rank-0 tensor".into()))?;
        for p in [gain, bias] {
            if self.shape(p) != [n] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    left: sx.clone(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let rows = vx.len() / n.max(1);
        let mut xhat = vec![0.0; vx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = &vx[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            rstd[r] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[r * n + j] = h;
                out[r * n + j] = h * vg[j] + vb[j];
            }
        }
        self.push(
            sx,
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
        )
    }

    /// Scales each row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| TensorError::Contract("l2_normalize on rank-0 tensor".into()))?;
        let values = self.value(a);
        let rows = values.len() / n.max(1);
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(values.len());
        for r in 0..rows {
            let row = &values[r * n..(r + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(TensorError::Numeric(format!("row {r} has zero norm")));
            }
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        self.push(shape, out, Op::L2Normalize { a: a.0, norms })
    }

    // ---- layout ---------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(TensorError::Shape {
                op: "reshape",
                left: self.shape(a).to_vec(),
                right: shape.to_vec(),
            });
        }
        let out = self.value(a).to_vec();
        self.push(shape.to_vec(), out, Op::Reshape(a.0))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = axes.len() == shape.len()
            && axes.iter().all(|&ax| ax < shape.len() && !std::mem::replace(&mut seen[ax], true));
        if !valid {
            return Err(TensorError::Contract(format!(
                "permute axes {axes:?} invalid for shape {shape:?}"
            )));
        }
        let source = kernels::permute_index(&shape, axes);
        let values = self.value(a);
        let out = source.iter().map(|&s| values[s]).collect();
        let out_shape = axes.iter().map(|&ax| shape[ax]).collect();
        self.push(out_shape, out, Op::Permute { a: a.0, source })
    }

    /// Gathers elements by flat index into a tensor of `shape`. Indices may
    /// repeat; the backward pass scatter-adds.
    pub fn take(&mut self, a: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != indices.len() {
            return Err(TensorError::Shape {
                op: "take",
                left: vec![indices.len()],
                right: shape.to_vec(),
            });
        }
        let values = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= values.len()) {
            return Err(TensorError::Contract(format!(
                "take index {bad} out of range for {} elements",
                values.len()
            )));
        }
        let out = indices.iter().map(|&i| values[i]).collect();
        self.push(shape.to_vec(), out, Op::Take { a: a.0, indices })
    }

    /// Stacks tensors along axis 0. Trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let trailing = self.shape(*first).get(1..).unwrap_or(&[]).to_vec();
        if self.shape(*first).is_empty() {
            return Err(TensorError::Contract("concat of rank-0 tensors".into()));
        }
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let sp = self.shape(p);
            if sp.is_empty() || sp[1..] != trailing[..] {
                return Err(TensorError::Shape {
                    op: "concat",
                    left: self.shape(*first).to_vec(),
                    right: sp.to_vec(),
                });
            }
            rows += sp[0];
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![rows];
        shape.extend(trailing);
        self.push(shape, out, Op::Concat(parts.iter().map(|p| p.0).collect()))
    }

    // ---- backward -------------------------------------------------------

    /// Accumulates d`loss`/d`leaf` into every trainable leaf reachable from
    /// the scalar `loss`. Calling it twice doubles the accumulated gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(TensorError::Contract("backward on an empty tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                adj[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }

        for (i, g) in adj.into_iter().enumerate() {
            let node = &mut self.nodes[i];
            if let (Op::Leaf, true, Some(g)) = (&node.op, node.needs_grad, g) {
                let acc = node.grad.get_or_insert_with(|| vec![0.0; g.len()]);
                for (a, d) in acc.iter_mut().zip(&g) {
                    *a += d;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        // Adds into the adjoint of input `j` if it needs a gradient.
        let mut with = |j: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[j].needs_grad {
                return;
            }
            let buf = adj[j].get_or_insert_with(|| vec![0.0; nodes[j].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                // da += g · bᵀ ; db += aᵀ · g
                with(a, &mut |da| kernels::gemm(m, n, k, g, false, &nodes[b].value, true, da, 1.0));
                with(b, &mut |db| kernels::gemm(k, m, n, &nodes[a].value, true, g, false, db, 1.0));
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (va, vb) = (&nodes[a].value, &nodes[b].value);
                with(a, &mut |da| {
                    for bi in 0..batch {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let bb = &vb[bi * k * n..(bi + 1) * k * n];
                        let dab = &mut da[bi * m * k..(bi + 1) * m * k];
                        // trans_b: B stored [n,k], op(B)=Bᵀ so dA = g·B
                        kernels::gemm(m, n, k, gb, false, bb, !trans_b, dab, 1.0);
                    }
                });
                with(b, &mut |db| {
                    for bi in 0..batch {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let ab = &va[bi * m * k..(bi + 1) * m * k];
                        let dbb = &mut db[bi * k * n..(bi + 1) * k * n];
                        if trans_b {
                            // dB [n,k] = gᵀ · A
                            kernels::gemm(n, m, k, gb, true, ab, false, dbb, 1.0);
                        } else {
                            kernels::gemm(k, m, n, ab, true, gb, false, dbb, 1.0);
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                with(a, &mut |da| add_into(da, g));
                with(b, &mut |db| add_into(db, g));
            }
            &Op::Sub(a, b) => {
                with(a, &mut |da| add_into(da, g));
                with(b, &mut |db| db.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a].value, &nodes[b].value);
                with(a, &mut |da| {
                    for ((d, g), y) in da.iter_mut().zip(g).zip(vb) {
                        *d += g * y;
                    }
                });
                with(b, &mut |db| {
                    for ((d, g), x) in db.iter_mut().zip(g).zip(va) {
                        *d += g * x;
                    }
                });
            }
            &Op::Scale(a, s) => with(a, &mut |da| da.iter_mut().zip(g).for_each(|(d, g)| *d += g * s)),
            &Op::AddScalar(a) | &Op::Reshape(a) => with(a, &mut |da| add_into(da, g)),
            &Op::AddBias { a, bias } => {
                with(a, &mut |da| add_into(da, g));
                let n = nodes[bias].value.len();
                with(bias, &mut |db| {
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                });
            }
            &Op::Sum { a, axis } | &Op::Mean { a, axis } => {
                let shape = &nodes[a].shape;
                let scale = match (&node.op, axis) {
                    (Op::Mean { .. }, Some(ax)) => 1.0 / shape[ax] as f64,
                    (Op::Mean { .. }, None) => 1.0 / nodes[a].value.len() as f64,
                    _ => 1.0,
                };
                with(a, &mut |da| match axis {
                    None => da.iter_mut().for_each(|d| *d += g[0] * scale),
                    Some(ax) => {
                        let (outer, len, inner) = axis_extents(shape, ax);
                        for o in 0..outer {
                            let src = &g[o * inner..(o + 1) * inner];
                            for l in 0..len {
                                let dst = &mut da[(o * len + l) * inner..(o * len + l + 1) * inner];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += s * scale;
                                }
                            }
                        }
                    }
                });
            }
            &Op::Softmax { a, axis } => {
                let y = &node.value;
                let (outer, len, inner) = axis_extents(&node.shape, axis);
                with(a, &mut |da| {
                    for o in 0..outer {
                        for q in 0..inner {
                            let idx = |l: usize| (o * len + l) * inner + q;
                            let dot: f64 = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                            for l in 0..len {
                                da[idx(l)] += y[idx(l)] * (g[idx(l)] - dot);
                            }
                        }
                    }
                });
            }
            &Op::LogSoftmax { a, axis } => {
                let y = &node.value;
                let (outer, len, inner) = axis_extents(&node.shape, axis);
                with(a, &mut |da| {
                    for o in 0..outer {
                        for q in 0..inner {
                            let idx = |l: usize| (o * len + l) * inner + q;
                            let total: f64 = (0..len).map(|l| g[idx(l)]).sum();
                            for l in 0..len {
                                da[idx(l)] += g[idx(l)] - y[idx(l)].exp() * total;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = nodes[*gain].value.len();
                let vg = &nodes[*gain].value;
                with(*x, &mut |dx| {
                    for (r, &inv) in rstd.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..n {
                            let dh = gr[j] * vg[j];
                            mean_d += dh;
                            mean_dh += dh * hr[j];
                        }
                        mean_d /= n as f64;
                        mean_dh /= n as f64;
                        for j in 0..n {
                            let dh = gr[j] * vg[j];
                            dx[r * n + j] += inv * (dh - mean_d - hr[j] * mean_dh);
                        }
                    }
                });
                with(*gain, &mut |dg| {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                });
                with(*bias, &mut |db| {
                    for gr in g.chunks(n) {
                        add_into(db, gr);
                    }
                });
            }
            &Op::Gelu(a) => {
                let x = &nodes[a].value;
                with(a, &mut |da| {
                    for ((d, g), &x) in da.iter_mut().zip(g).zip(x) {
                        *d += g * kernels::gelu_derivative(x);
                    }
                });
            }
            Op::Permute { a, source } | Op::Take { a, indices: source } => {
                with(*a, &mut |da| {
                    for (gi, &s) in g.iter().zip(source) {
                        da[s] += gi;
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p].value.len();
                    with(p, &mut |dp| add_into(dp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::L2Normalize { a, norms } => {
                let y = &node.value;
                let n = y.len() / norms.len().max(1);
                with(*a, &mut |da| {
                    for (r, &norm) in norms.iter().enumerate() {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            da[r * n + j] += (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                });
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn softmax_along(values: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
    let (outer, len, inner) = axis_extents(shape, axis);
    let mut out = vec![0.0; values.len()];
    for o in 0..outer {
        for q in 0..inner {
            let idx = |l: usize| (o * len + l) * inner + q;
            let max = (0..len).map(|l| values[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..len).map(|l| (values[idx(l)] - max).exp()).sum();
            if log {
                let lse = total.ln();
                for l in 0..len {
                    out[idx(l)] = values[idx(l)] - max - lse;
                }
            } else {
                for l in 0..len {
                    out[idx(l)] = (values[idx(l)] - max).exp() / total;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(&t(&[2, 2], &[1., 0., 0., 1.]));
        let m = tape.leaf(&t(&[2, 2], &[1., 2., 3., 4.]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p), &[1., 2., 3., 4.]);

        let r = tape.leaf(&t(&[1, 2], &[1., 2.]));
        let c = tape.leaf(&t(&[2, 1], &[3., 4.]));
        let d = tape.matmul(r, c).unwrap();
        assert_eq!(tape.value(d), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(&Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Shape {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn elementwise_identities() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1.5, -2.0, 0.25]));
        let zero = tape.constant(vec![3], vec![0.0; 3]).unwrap();
        let one = tape.constant(vec![3], vec![1.0; 3]).unwrap();
        let a = tape.add(x, zero).unwrap();
        let m = tape.mul(x, one).unwrap();
        let s = tape.sub(x, x).unwrap();
        let a2 = tape.add_scalar(x, 0.0).unwrap();
        let m2 = tape.scale(x, 1.0).unwrap();
        assert_eq!(tape.value(a), tape.value(x));
        assert_eq!(tape.value(m), tape.value(x));
        assert_eq!(tape.value(a2), tape.value(x));
        assert_eq!(tape.value(m2), tape.value(x));
        assert_eq!(tape.value(s), &[0.0; 3]);
        let bad = tape.constant(vec![2], vec![0.0; 2]).unwrap();
        assert!(matches!(tape.add(x, bad), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1., 2., 3.]));
        let s = tape.sum(x, None).unwrap();
        assert_eq!(tape.item(s).unwrap(), 6.0);
        let y = tape.leaf(&t(&[2], &[2., 4.]));
        let m = tape.mean(y, None).unwrap();
        assert_eq!(tape.item(m).unwrap(), 3.0);
        assert!(matches!(tape.sum(x, Some(1)), Err(TensorError::Axis { .. })));
    }

    #[test]
    fn softmax_uniform_and_shifted() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[0., 0., 0.]));
        let s = tape.softmax(x, 0).unwrap();
        for v in tape.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = tape.leaf(&t(&[2], &[1000., 1000.]));
        let s = tape.softmax(big, 0).unwrap();
        assert_eq!(tape.value(s), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_degenerate_rows() {
        let mut tape = Tape::new();
        let g = tape.leaf(&t(&[2], &[1., 1.]));
        let b = tape.leaf(&t(&[2], &[0., 0.]));
        let c = tape.leaf(&t(&[1, 2], &[3., 3.]));
        let y = tape.layer_norm(c, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0]);
        let u = tape.leaf(&t(&[1, 2], &[1., -1.]));
        let y = tape.layer_norm(u, g, b, 1e-5).unwrap();
        assert!((tape.value(y)[0] - 1.0).abs() < 1e-5);
        assert!((tape.value(y)[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn backward_square_and_constant() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[3., -1.]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq, None).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6., -2.]);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[12., -4.]);

        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[3., -1.]).with_grad());
        let c = tape.constant(vec![], vec![5.0]).unwrap();
        tape.backward(c).unwrap();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_and_empty() {
        let mut tape = Tape::new();
        assert!(matches!(tape.backward(Var(0)), Err(TensorError::Contract(_))));
        let x = tape.leaf(&t(&[2], &[1., 2.]).with_grad());
        assert!(matches!(tape.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[1e308]));
        assert!(matches!(tape.scale(x, 10.0), Err(TensorError::NonFinite { op: "scale" })));
    }

    #[test]
    fn zero_norm_row_is_numeric_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 2], &[1., 0., 0., 0.]));
        assert!(matches!(tape.l2_normalize(x), Err(TensorError::Numeric(_))));
    }

    #[test]
    fn take_and_concat_layout() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[1, 2], &[1., 2.]));
        let b = tape.leaf(&t(&[2, 2], &[3., 4., 5., 6.]));
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), &[3, 2]);
        let picked = tape.take(c, vec![5, 0, 0], &[3]).unwrap();
        assert_eq!(tape.value(picked), &[6., 1., 1.]);
        assert!(tape.take(c, vec![6], &[1]).is_err());
    }

    #[test]
    fn clear_keeps_nothing_and_zero_grads_resets() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[2.0]).with_grad());
        let y = tape.mul(x, x).unwrap();
        let l = tape.sum(y, None).unwrap();
        tape.backward(l).unwrap();
        tape.zero_grads();
        assert_eq!(tape.grad(x).unwrap(), &[0.0]);
        assert_eq!(tape.value(x), &[2.0]);
        tape.clear();
        assert!(tape.is_empty());
    }
}
