//! Reverse-mode automatic differentiation over a flat arena tape.
//!
//! A [`Tape`] records every operation of one forward pass as an append-only
//! list of nodes; node indices ([`Var`]) double as topological order, so the
//! backward pass is a single reverse sweep. Parameters live outside the tape
//! as plain [`Tensor`]s and are bound per pass with [`Tape::leaf`]; after
//! [`Tape::backward`] their gradients are read back with [`Tape::grad`].

use crate::error::{Error, Result};
use crate::tensor::{dgemm, dgemm_nt, dgemm_tn, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Elementwise product with a constant buffer (len n) or a constant
    /// scalar (len 1, broadcast). No gradient flows into the constant.
    MulConst(Var, Vec<f64>),
    /// Tensor scaled by a scalar variable: out = a * s.
    Scale(Var, Var),
    MatMul(Var, Var),
    /// out = a · bᵀ, with b stored row-major un-transposed.
    MatMulNT(Var, Var),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    /// Row-wise softmax. `limits[r]`, when present, restricts row r to its
    /// first `limits[r]` columns; entries beyond the limit are exactly zero.
    SoftmaxRows(Var, Option<Vec<usize>>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    CrossEntropy(Var, Vec<usize>),
    Sum(Var),
    MeanRows(Var),
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Vec<f64>,
    // Backward-pass intermediates (layer norm caches x̂ and inv_std,
    // cross-entropy caches the softmax probabilities).
    saved: Vec<Vec<f64>>,
}

/// Append-only record of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node {
            op,
            value,
            grad,
            saved: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    fn push_saved(&mut self, op: Op, value: Tensor, saved: Vec<Vec<f64>>) -> Var {
        let v = self.push(op, value);
        self.nodes[v.0].saved = saved;
        v
    }

    /// Forward value of a recorded variable.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient buffer of a recorded variable (zeros until `backward` runs).
    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    /// Bind an external tensor as a tape input, copying its values.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.clone())
    }

    fn binary_shape_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape_check("add", a, b)?;
        let vals: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Op::Add(a, b), Tensor::new(shape, vals)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape_check("sub", a, b)?;
        let vals: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Op::Sub(a, b), Tensor::new(shape, vals)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape_check("mul", a, b)?;
        let vals: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Op::Mul(a, b), Tensor::new(shape, vals)))
    }

    /// Elementwise product with a constant mask; `mask` is either one scalar
    /// (broadcast) or one entry per element. Used for dropout masks and loss
    /// averaging, where the constant must not receive gradient.
    pub fn mul_const(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let av = self.value(a);
        if mask.len() != 1 && mask.len() != av.len() {
            return Err(Error::Shape {
                op: "mul_const",
                lhs: av.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let vals: Vec<f64> = if mask.len() == 1 {
            av.values().iter().map(|x| x * mask[0]).collect()
        } else {
            av.values().iter().zip(&mask).map(|(x, m)| x * m).collect()
        };
        let shape = av.shape().to_vec();
        Ok(self.push(Op::MulConst(a, mask), Tensor::new(shape, vals)))
    }

    /// out = a * s where `s` is a scalar variable on the tape.
    pub fn scale(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::contract("scale: scaling variable must be a scalar"));
        }
        let sv = self.value(s).values()[0];
        let vals: Vec<f64> = self.value(a).values().iter().map(|x| x * sv).collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Op::Scale(a, s), Tensor::new(shape, vals)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = (bv.rows(), bv.cols());
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        dgemm(m, k, n, 1.0, av.values(), bv.values(), 0.0, &mut out);
        Ok(self.push(Op::MatMul(a, b), Tensor::new(vec![m, n], out)))
    }

    /// out[m×r] = a[m×k] · b[r×k]ᵀ. Used for attention scores Q·Kᵀ.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (r, k2) = (bv.rows(), bv.cols());
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_nt",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * r];
        dgemm_nt(m, k, r, 1.0, av.values(), bv.values(), 0.0, &mut out);
        Ok(self.push(Op::MatMulNT(a, b), Tensor::new(vec![m, r], out)))
    }

    /// Row lookup: out[i] = table[idx[i]]. Gradient scatter-adds rows back.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, cols) = (tv.rows(), tv.cols());
        for &i in idx {
            if i >= rows {
                return Err(Error::Index {
                    what: "gather row",
                    index: i,
                    bound: rows,
                });
            }
        }
        let mut vals = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            vals.extend_from_slice(&tv.values()[i * cols..(i + 1) * cols]);
        }
        Ok(self.push(
            Op::GatherRows(table, idx.to_vec()),
            Tensor::new(vec![idx.len(), cols], vals),
        ))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols: empty input list"));
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            cols += self.value(p).cols();
        }
        let mut vals = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let pv = self.value(p);
                let c = pv.cols();
                vals.extend_from_slice(&pv.values()[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(
            Op::ConcatCols(parts.to_vec()),
            Tensor::new(vec![rows, cols], vals),
        ))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_rows_impl(x, None)
    }

    /// Causal softmax: row r is a distribution over its first `limits[r]`
    /// columns and exactly zero beyond. `limits[r]` must be in [1, cols].
    pub fn softmax_rows_limited(&mut self, x: Var, limits: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if limits.len() != xv.rows() {
            return Err(Error::Shape {
                op: "softmax_rows_limited",
                lhs: xv.shape().to_vec(),
                rhs: vec![limits.len()],
            });
        }
        let cols = xv.cols();
        for (r, &l) in limits.iter().enumerate() {
            if l == 0 || l > cols {
                return Err(Error::Index {
                    what: "softmax row limit",
                    index: l,
                    bound: cols + 1,
                });
            }
            let _ = r;
        }
        self.softmax_rows_impl(x, Some(limits.to_vec()))
    }

    fn softmax_rows_impl(&mut self, x: Var, limits: Option<Vec<usize>>) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut vals = vec![0.0; rows * cols];
        for r in 0..rows {
            let lim = limits.as_ref().map_or(cols, |l| l[r]);
            let row = &xv.values()[r * cols..r * cols + lim];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (c, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                vals[r * cols + c] = e;
                z += e;
            }
            for c in 0..lim {
                vals[r * cols + c] /= z;
            }
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(Op::SoftmaxRows(x, limits), Tensor::new(shape, vals)))
    }

    /// Per-row layer normalization with affine (gamma, beta of length cols).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: self.value(gamma).shape().to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm: eps must be positive"));
        }
        let gv = self.value(gamma).values().to_vec();
        let bv = self.value(beta).values().to_vec();
        let mut vals = vec![0.0; rows * cols];
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv.values()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let xh = (row[c] - mean) * is;
                xhat[r * cols + c] = xh;
                vals[r * cols + c] = gv[c] * xh + bv[c];
            }
        }
        let shape = xv.shape().to_vec();
        Ok(self.push_saved(
            Op::LayerNorm { x, gamma, beta },
            Tensor::new(shape, vals),
            vec![xhat, inv_std],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let vals: Vec<f64> = self.value(x).values().iter().map(|v| v.max(0.0)).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Relu(x), Tensor::new(shape, vals))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let vals: Vec<f64> = self.value(x).values().iter().map(|v| v.tanh()).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Tanh(x), Tensor::new(shape, vals))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        // 1/(1+e^-v) overflows for very negative v; branch keeps exp bounded.
        let vals: Vec<f64> = self
            .value(x)
            .values()
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Sigmoid(x), Tensor::new(shape, vals))
    }

    /// Mean over rows of −log softmax(logits)[target], fused via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, cols) = (lv.rows(), lv.cols());
        if targets.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        for &t in targets {
            if t >= cols {
                return Err(Error::Index {
                    what: "cross-entropy target",
                    index: t,
                    bound: cols,
                });
            }
        }
        let mut probs = vec![0.0; rows * cols];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &lv.values()[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (c, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                probs[r * cols + c] = e;
                z += e;
            }
            for c in 0..cols {
                probs[r * cols + c] /= z;
            }
            // -log p[target] = log z - (logit - m) = (m + ln z) - logit
            loss += m + z.ln() - row[targets[r]];
        }
        loss /= rows as f64;
        Ok(self.push_saved(
            Op::CrossEntropy(logits, targets.to_vec()),
            Tensor::scalar(loss),
            vec![probs],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).values().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    /// Column means over rows: [m×d] → [1×d].
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut vals = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                vals[c] += xv.values()[r * cols + c];
            }
        }
        for v in vals.iter_mut() {
            *v /= rows as f64;
        }
        self.push(Op::MeanRows(x), Tensor::new(vec![1, cols], vals))
    }

    /// Propagate d(loss)/d(node) to every node below `loss`. Leaf gradients
    /// accumulate across repeated calls; intermediate gradients are per-call
    /// scratch and reset here.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in self.nodes.iter_mut() {
            if !matches!(node.op, Op::Leaf) {
                node.grad.fill(0.0);
            }
        }
        self.nodes[loss.0].grad[0] += 1.0;
        for i in (0..=loss.0).rev() {
            self.backprop_node(i);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize) {
        // Take the node's grad out to appease the borrow checker; ops never
        // read their own output grad except through this local copy.
        let g = std::mem::take(&mut self.nodes[i].grad);
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                for (ga, &gi) in self.nodes[a.0].grad.iter_mut().zip(&g) {
                    *ga += gi;
                }
                for (gb, &gi) in self.nodes[b.0].grad.iter_mut().zip(&g) {
                    *gb += gi;
                }
            }
            &Op::Sub(a, b) => {
                for (ga, &gi) in self.nodes[a.0].grad.iter_mut().zip(&g) {
                    *ga += gi;
                }
                for (gb, &gi) in self.nodes[b.0].grad.iter_mut().zip(&g) {
                    *gb -= gi;
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (
                    self.nodes[a.0].value.values().to_vec(),
                    self.nodes[b.0].value.values().to_vec(),
                );
                for ((ga, &bvi), &gi) in self.nodes[a.0].grad.iter_mut().zip(&bv).zip(&g) {
                    *ga += gi * bvi;
                }
                for ((gb, &avi), &gi) in self.nodes[b.0].grad.iter_mut().zip(&av).zip(&g) {
                    *gb += gi * avi;
                }
            }
            Op::MulConst(a, mask) => {
                let a = *a;
                if mask.len() == 1 {
                    let m = mask[0];
                    for (ga, &gi) in self.nodes[a.0].grad.iter_mut().zip(&g) {
                        *ga += gi * m;
                    }
                } else {
                    let mask = mask.clone();
                    for ((ga, &m), &gi) in self.nodes[a.0].grad.iter_mut().zip(&mask).zip(&g) {
                        *ga += gi * m;
                    }
                }
            }
            &Op::Scale(a, s) => {
                let sv = self.nodes[s.0].value.values()[0];
                let av = self.nodes[a.0].value.values().to_vec();
                for (ga, &gi) in self.nodes[a.0].grad.iter_mut().zip(&g) {
                    *ga += gi * sv;
                }
                let ds: f64 = av.iter().zip(&g).map(|(x, gi)| x * gi).sum();
                self.nodes[s.0].grad[0] += ds;
            }
            &Op::MatMul(a, b) => {
                // C = A·B  ⇒  dA += dC·Bᵀ, dB += Aᵀ·dC
                let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let n = self.nodes[b.0].value.cols();
                let bv = self.nodes[b.0].value.values().to_vec();
                let av = self.nodes[a.0].value.values().to_vec();
                dgemm_nt(m, n, k, 1.0, &g, &bv, 1.0, &mut self.nodes[a.0].grad);
                dgemm_tn(k, m, n, 1.0, &av, &g, 1.0, &mut self.nodes[b.0].grad);
            }
            &Op::MatMulNT(a, b) => {
                // C = A·Bᵀ  ⇒  dA += dC·B, dB += dCᵀ·A
                let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let r = self.nodes[b.0].value.rows();
                let bv = self.nodes[b.0].value.values().to_vec();
                let av = self.nodes[a.0].value.values().to_vec();
                dgemm(m, r, k, 1.0, &g, &bv, 1.0, &mut self.nodes[a.0].grad);
                dgemm_tn(r, m, k, 1.0, &g, &av, 1.0, &mut self.nodes[b.0].grad);
            }
            Op::GatherRows(table, idx) => {
                let table = *table;
                let idx = idx.clone();
                let cols = self.nodes[table.0].value.cols();
                for (out_r, &src_r) in idx.iter().enumerate() {
                    let dst = &mut self.nodes[table.0].grad[src_r * cols..(src_r + 1) * cols];
                    for (d, &gi) in dst.iter_mut().zip(&g[out_r * cols..(out_r + 1) * cols]) {
                        *d += gi;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let rows = self.nodes[parts[0].0].value.rows();
                let total: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
                let mut off = 0;
                for &p in &parts {
                    let c = self.nodes[p.0].value.cols();
                    for r in 0..rows {
                        let src = &g[r * total + off..r * total + off + c];
                        let dst = &mut self.nodes[p.0].grad[r * c..(r + 1) * c];
                        for (d, &gi) in dst.iter_mut().zip(src) {
                            *d += gi;
                        }
                    }
                    off += c;
                }
            }
            Op::SoftmaxRows(x, limits) => {
                let x = *x;
                let limits = limits.clone();
                let (rows, cols) = (self.nodes[i].value.rows(), self.nodes[i].value.cols());
                let y = self.nodes[i].value.values().to_vec();
                for r in 0..rows {
                    let lim = limits.as_ref().map_or(cols, |l| l[r]);
                    let yr = &y[r * cols..r * cols + lim];
                    let gr = &g[r * cols..r * cols + lim];
                    let dot: f64 = yr.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                    let dst = &mut self.nodes[x.0].grad[r * cols..r * cols + lim];
                    for ((d, &yi), &gi) in dst.iter_mut().zip(yr).zip(gr) {
                        *d += yi * (gi - dot);
                    }
                }
            }
            &Op::LayerNorm { x, gamma, beta } => {
                let (rows, cols) = (self.nodes[i].value.rows(), self.nodes[i].value.cols());
                let xhat = self.nodes[i].saved[0].clone();
                let inv_std = self.nodes[i].saved[1].clone();
                let gv = self.nodes[gamma.0].value.values().to_vec();
                for r in 0..rows {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let xh = &xhat[r * cols..(r + 1) * cols];
                    // d gamma, d beta accumulate per row
                    for c in 0..cols {
                        self.nodes[gamma.0].grad[c] += gr[c] * xh[c];
                        self.nodes[beta.0].grad[c] += gr[c];
                    }
                    // dx via the standard normalized-input rule
                    let dxhat: Vec<f64> = (0..cols).map(|c| gr[c] * gv[c]).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / cols as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(xh).map(|(d, x)| d * x).sum::<f64>() / cols as f64;
                    let dst = &mut self.nodes[x.0].grad[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        dst[c] += inv_std[r] * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
                    }
                }
            }
            &Op::Relu(x) => {
                let xv = self.nodes[x.0].value.values().to_vec();
                for ((d, &xi), &gi) in self.nodes[x.0].grad.iter_mut().zip(&xv).zip(&g) {
                    if xi > 0.0 {
                        *d += gi;
                    }
                }
            }
            &Op::Tanh(x) => {
                let y = self.nodes[i].value.values().to_vec();
                for ((d, &yi), &gi) in self.nodes[x.0].grad.iter_mut().zip(&y).zip(&g) {
                    *d += gi * (1.0 - yi * yi);
                }
            }
            &Op::Sigmoid(x) => {
                let y = self.nodes[i].value.values().to_vec();
                for ((d, &yi), &gi) in self.nodes[x.0].grad.iter_mut().zip(&y).zip(&g) {
                    *d += gi * yi * (1.0 - yi);
                }
            }
            Op::CrossEntropy(logits, targets) => {
                let logits = *logits;
                let targets = targets.clone();
                let rows = targets.len();
                let cols = self.nodes[logits.0].value.cols();
                let probs = self.nodes[i].saved[0].clone();
                let scale = g[0] / rows as f64;
                let dst = &mut self.nodes[logits.0].grad;
                for r in 0..rows {
                    for c in 0..cols {
                        let ind = if c == targets[r] { 1.0 } else { 0.0 };
                        dst[r * cols + c] += scale * (probs[r * cols + c] - ind);
                    }
                }
            }
            &Op::Sum(x) => {
                for d in self.nodes[x.0].grad.iter_mut() {
                    *d += g[0];
                }
            }
            &Op::MeanRows(x) => {
                let (rows, cols) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                for r in 0..rows {
                    for c in 0..cols {
                        self.nodes[x.0].grad[r * cols + c] += g[c] / rows as f64;
                    }
                }
            }
        }
        self.nodes[i].grad = g;
    }
}
