//! Reverse-mode differentiation over a linear tape.
//!
//! A forward pass records one node per op into the tape arena; `backward`
//! replays the nodes in reverse accumulating vector-Jacobian products.
//! The op set is exactly what the ViT forward pass and the trainer need,
//! nothing more. Forward matmuls bump a MAC counter (m*k*n each) whether
//! or not gradients are being recorded.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// out = a @ b
    Matmul { a: ValId, b: ValId, out: ValId },
    /// out = a @ b^T
    MatmulNT { a: ValId, b: ValId, out: ValId },
    Add { a: ValId, b: ValId, out: ValId },
    /// out = a + bias per row
    AddRowBroadcast { a: ValId, bias: ValId, out: ValId },
    Scale { a: ValId, s: f32, out: ValId },
    Gelu { a: ValId, out: ValId },
    SoftmaxRows { a: ValId, out: ValId },
    LayerNorm {
        x: ValId,
        gamma: ValId,
        beta: ValId,
        out: ValId,
        means: Vec<f32>,
        rstds: Vec<f32>,
    },
    /// out[i] = a[idx[i]] (rows); backward scatter-adds
    GatherRows { a: ValId, idx: Vec<usize>, out: ValId },
    /// out[:, idx[j]] = a[:, j] into a zero matrix of `width` columns
    ScatterCols {
        a: ValId,
        idx: Vec<usize>,
        out: ValId,
    },
    ConcatRows { parts: Vec<ValId>, out: ValId },
    ConcatCols { parts: Vec<ValId>, out: ValId },
    SliceRows { a: ValId, start: usize, out: ValId },
    Reshape { a: ValId, out: ValId },
    MeanRows { a: ValId, out: ValId },
    L2Norm { a: ValId, out: ValId },
    /// Fused softmax + negative log-likelihood of a single logit row.
    CrossEntropy { logits: ValId, target: usize, out: ValId },
}

pub struct Tape {
    ops: Vec<Op>,
    vals: Vec<Tensor>,
    grads: Vec<Option<Tensor>>,
    params: Vec<bool>,
    grad_enabled: bool,
    backward_done: bool,
    macs: u64,
}

impl Tape {
    pub fn new(grad_enabled: bool) -> Self {
        Tape {
            ops: Vec::new(),
            vals: Vec::new(),
            grads: Vec::new(),
            params: Vec::new(),
            grad_enabled,
            backward_done: false,
            macs: 0,
        }
    }

    pub fn value(&self, id: ValId) -> &Tensor {
        &self.vals[id.0]
    }

    /// Forward matmul MACs recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    fn push(&mut self, t: Tensor) -> ValId {
        self.vals.push(t);
        self.grads.push(None);
        self.params.push(false);
        ValId(self.vals.len() - 1)
    }

    fn record(&mut self, op: Op) {
        if self.grad_enabled {
            self.ops.push(op);
        }
    }

    /// Leaf value not tracked as a parameter.
    pub fn constant(&mut self, t: Tensor) -> ValId {
        self.push(t)
    }

    /// Leaf value whose gradient the caller will read back. The data is
    /// snapshotted; later mutation of the source does not affect the tape.
    pub fn param(&mut self, t: &Tensor) -> ValId {
        let id = self.push(t.clone());
        self.params[id.0] = true;
        id
    }

    pub fn matmul(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        let (t, macs) = tensor::matmul(&self.vals[a.0], &self.vals[b.0])?;
        self.macs += macs;
        let out = self.push(t);
        self.record(Op::Matmul { a, b, out });
        Ok(out)
    }

    pub fn matmul_nt(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        let (t, macs) = tensor::matmul_nt(&self.vals[a.0], &self.vals[b.0])?;
        self.macs += macs;
        let out = self.push(t);
        self.record(Op::MatmulNT { a, b, out });
        Ok(out)
    }

    pub fn add(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        let t = tensor::add(&self.vals[a.0], &self.vals[b.0])?;
        let out = self.push(t);
        self.record(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn add_row_broadcast(&mut self, a: ValId, bias: ValId) -> Result<ValId> {
        let t = tensor::add_row_broadcast(&self.vals[a.0], &self.vals[bias.0])?;
        let out = self.push(t);
        self.record(Op::AddRowBroadcast { a, bias, out });
        Ok(out)
    }

    pub fn scale(&mut self, a: ValId, s: f32) -> ValId {
        let t = tensor::scale(&self.vals[a.0], s);
        let out = self.push(t);
        self.record(Op::Scale { a, s, out });
        out
    }

    pub fn gelu(&mut self, a: ValId) -> ValId {
        let t = tensor::gelu(&self.vals[a.0]);
        let out = self.push(t);
        self.record(Op::Gelu { a, out });
        out
    }

    pub fn softmax_rows(&mut self, a: ValId) -> Result<ValId> {
        let t = tensor::softmax_rows(&self.vals[a.0])?;
        let out = self.push(t);
        self.record(Op::SoftmaxRows { a, out });
        Ok(out)
    }

    pub fn layer_norm(&mut self, x: ValId, gamma: ValId, beta: ValId, eps: f32) -> Result<ValId> {
        let (means, rstds) = tensor::row_moments(&self.vals[x.0], eps)?;
        let t = tensor::layer_norm(&self.vals[x.0], &self.vals[gamma.0], &self.vals[beta.0], eps)?;
        let out = self.push(t);
        self.record(Op::LayerNorm {
            x,
            gamma,
            beta,
            out,
            means,
            rstds,
        });
        Ok(out)
    }

    pub fn gather_rows(&mut self, a: ValId, idx: Vec<usize>) -> Result<ValId> {
        let src = &self.vals[a.0];
        if src.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "gather_rows",
                lhs: src.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (src.rows(), src.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Dimension {
                op: "gather_rows",
                lhs: vec![m, n],
                rhs: vec![bad],
            });
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in &idx {
            data.extend_from_slice(&src.data()[i * n..(i + 1) * n]);
        }
        let t = Tensor::new(vec![idx.len(), n], data)?;
        let out = self.push(t);
        self.record(Op::GatherRows { a, idx, out });
        Ok(out)
    }

    /// Spread the columns of `a` into a wider zero matrix at `idx` positions.
    pub fn scatter_cols(&mut self, a: ValId, idx: Vec<usize>, width: usize) -> Result<ValId> {
        let src = &self.vals[a.0];
        let (m, n) = (src.rows(), src.cols());
        if idx.len() != n || idx.iter().any(|&j| j >= width) {
            return Err(Error::Dimension {
                op: "scatter_cols",
                lhs: vec![m, n],
                rhs: vec![idx.len(), width],
            });
        }
        let mut data = vec![0.0f32; m * width];
        for i in 0..m {
            let srow = &src.data()[i * n..(i + 1) * n];
            let drow = &mut data[i * width..(i + 1) * width];
            for (j, &col) in idx.iter().enumerate() {
                drow[col] = srow[j];
            }
        }
        let t = Tensor::new(vec![m, width], data)?;
        let out = self.push(t);
        self.record(Op::ScatterCols { a, idx, out });
        Ok(out)
    }

    pub fn concat_rows(&mut self, parts: &[ValId]) -> Result<ValId> {
        let n = self.vals[parts[0].0].cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = &self.vals[p.0];
            if t.cols() != n {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.vals[parts[0].0].shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let t = Tensor::new(vec![rows, n], data)?;
        let out = self.push(t);
        self.record(Op::ConcatRows {
            parts: parts.to_vec(),
            out,
        });
        Ok(out)
    }

    pub fn concat_cols(&mut self, parts: &[ValId]) -> Result<ValId> {
        let m = self.vals[parts[0].0].rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.vals[p.0].cols()).collect();
        for &p in parts {
            if self.vals[p.0].rows() != m {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.vals[parts[0].0].shape().to_vec(),
                    rhs: self.vals[p.0].shape().to_vec(),
                });
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(widths.iter()) {
                let src = self.vals[p.0].data();
                data.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(vec![m, total], data)?;
        let out = self.push(t);
        self.record(Op::ConcatCols {
            parts: parts.to_vec(),
            out,
        });
        Ok(out)
    }

    pub fn slice_rows(&mut self, a: ValId, start: usize, len: usize) -> Result<ValId> {
        let src = &self.vals[a.0];
        let (m, n) = (src.rows(), src.cols());
        if start + len > m {
            return Err(Error::Dimension {
                op: "slice_rows",
                lhs: vec![m, n],
                rhs: vec![start, len],
            });
        }
        let data = src.data()[start * n..(start + len) * n].to_vec();
        let t = Tensor::new(vec![len, n], data)?;
        let out = self.push(t);
        self.record(Op::SliceRows { a, start, out });
        Ok(out)
    }

    pub fn reshape(&mut self, a: ValId, shape: Vec<usize>) -> Result<ValId> {
        let t = self.vals[a.0].reshaped(shape)?;
        let out = self.push(t);
        self.record(Op::Reshape { a, out });
        Ok(out)
    }

    pub fn mean_rows(&mut self, a: ValId) -> Result<ValId> {
        let src = &self.vals[a.0];
        let (m, n) = (src.rows(), src.cols());
        let mut acc = vec![0.0f64; n];
        for row in src.data().chunks_exact(n) {
            for (a, &x) in acc.iter_mut().zip(row.iter()) {
                *a += x as f64;
            }
        }
        let data = acc.iter().map(|&v| (v / m as f64) as f32).collect();
        let t = Tensor::new(vec![1, n], data)?;
        let out = self.push(t);
        self.record(Op::MeanRows { a, out });
        Ok(out)
    }

    pub fn l2_norm(&mut self, a: ValId) -> ValId {
        let v = self.vals[a.0].l2_norm() as f32;
        let out = self.push(Tensor::new(vec![1], vec![v]).expect("scalar"));
        self.record(Op::L2Norm { a, out });
        out
    }

    /// Cross-entropy of one logit row against a class index.
    pub fn cross_entropy(&mut self, logits: ValId, target: usize) -> Result<ValId> {
        let t = &self.vals[logits.0];
        let k = t.numel();
        if target >= k {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![target],
            });
        }
        let row = t.data();
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let denom: f64 = row.iter().map(|&x| ((x - max) as f64).exp()).sum();
        let loss = (denom.ln() - (row[target] - max) as f64) as f32;
        let out = self.push(Tensor::new(vec![1], vec![loss])?);
        self.record(Op::CrossEntropy {
            logits,
            target,
            out,
        });
        Ok(out)
    }

    /// Gradient of `loss` with respect to every recorded value. `loss` must
    /// be scalar. Call once per tape.
    pub fn backward(&mut self, loss: ValId) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::Config(
                "backward on a tape built with gradients disabled".into(),
            ));
        }
        if self.backward_done {
            return Err(Error::Config("backward already ran on this tape".into()));
        }
        if !self.vals[loss.0].is_scalar() {
            return Err(Error::Dimension {
                op: "backward",
                lhs: self.vals[loss.0].shape().to_vec(),
                rhs: vec![1],
            });
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(Tensor::new(
            self.vals[loss.0].shape().to_vec(),
            vec![1.0],
        )?);
        for i in (0..self.ops.len()).rev() {
            let op = self.ops[i].clone();
            self.backward_op(&op)?;
        }
        Ok(())
    }

    /// Accumulated gradient for a value, if any flowed to it.
    pub fn grad(&self, id: ValId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of a registered parameter; zeros when nothing flowed.
    /// Errors if the value was not registered via `param`.
    pub fn param_grad(&self, id: ValId) -> Result<Tensor> {
        if !self.params[id.0] {
            return Err(Error::UnknownParam(format!(
                "value #{} was not registered as a parameter",
                id.0
            )));
        }
        Ok(match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.vals[id.0].shape().to_vec()),
        })
    }

    fn accum(&mut self, id: ValId, g: Tensor) {
        match &mut self.grads[id.0] {
            Some(existing) => {
                for (e, v) in existing.data_mut().iter_mut().zip(g.data().iter()) {
                    *e += v;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_op(&mut self, op: &Op) -> Result<()> {
        match op {
            Op::Matmul { a, b, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let (da, _) = tensor::matmul_nt(&d, &self.vals[b.0])?;
                    self.accum(*a, da);
                    let (db, _) = tensor::matmul_tn(&self.vals[a.0], &d)?;
                    self.accum(*b, db);
                }
            }
            Op::MatmulNT { a, b, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let (da, _) = tensor::matmul(&d, &self.vals[b.0])?;
                    self.accum(*a, da);
                    let (db, _) = tensor::matmul_tn(&d, &self.vals[a.0])?;
                    self.accum(*b, db);
                }
            }
            Op::Add { a, b, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    self.accum(*a, d.clone());
                    self.accum(*b, d);
                }
            }
            Op::AddRowBroadcast { a, bias, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let n = d.cols();
                    let mut col = vec![0.0f64; n];
                    for row in d.data().chunks_exact(n) {
                        for (c, &v) in col.iter_mut().zip(row.iter()) {
                            *c += v as f64;
                        }
                    }
                    let db = Tensor::new(vec![n], col.iter().map(|&v| v as f32).collect())?;
                    self.accum(*bias, db);
                    self.accum(*a, d);
                }
            }
            Op::Scale { a, s, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    self.accum(*a, tensor::scale(&d, *s));
                }
            }
            Op::Gelu { a, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let x = &self.vals[a.0];
                    let data = d
                        .data()
                        .iter()
                        .zip(x.data().iter())
                        .map(|(&dv, &xv)| dv * tensor::gelu_grad_scalar(xv))
                        .collect();
                    self.accum(*a, Tensor::new(x.shape().to_vec(), data)?);
                }
            }
            Op::SoftmaxRows { a, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let y = &self.vals[out.0];
                    let n = y.cols();
                    let mut dx = vec![0.0f32; y.numel()];
                    for ((dxrow, yrow), drow) in dx
                        .chunks_exact_mut(n)
                        .zip(y.data().chunks_exact(n))
                        .zip(d.data().chunks_exact(n))
                    {
                        let dot: f64 = drow
                            .iter()
                            .zip(yrow.iter())
                            .map(|(&dv, &yv)| dv as f64 * yv as f64)
                            .sum();
                        for ((o, &yv), &dv) in dxrow.iter_mut().zip(yrow.iter()).zip(drow.iter()) {
                            *o = yv * (dv - dot as f32);
                        }
                    }
                    self.accum(*a, Tensor::new(y.shape().to_vec(), dx)?);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                out,
                means,
                rstds,
            } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let xv = self.vals[x.0].clone();
                    let gv = self.vals[gamma.0].clone();
                    let n = xv.cols();
                    let mut dx = vec![0.0f32; xv.numel()];
                    let mut dgamma = vec![0.0f64; n];
                    let mut dbeta = vec![0.0f64; n];
                    for (r, (xrow, drow)) in xv
                        .data()
                        .chunks_exact(n)
                        .zip(d.data().chunks_exact(n))
                        .enumerate()
                    {
                        let mean = means[r];
                        let rstd = rstds[r];
                        let mut sum_dyg = 0.0f64;
                        let mut sum_dyg_xhat = 0.0f64;
                        for j in 0..n {
                            let xhat = (xrow[j] - mean) * rstd;
                            let dyg = drow[j] * gv.data()[j];
                            sum_dyg += dyg as f64;
                            sum_dyg_xhat += dyg as f64 * xhat as f64;
                            dgamma[j] += drow[j] as f64 * xhat as f64;
                            dbeta[j] += drow[j] as f64;
                        }
                        let m1 = (sum_dyg / n as f64) as f32;
                        let m2 = (sum_dyg_xhat / n as f64) as f32;
                        let dxrow = &mut dx[r * n..(r + 1) * n];
                        for j in 0..n {
                            let xhat = (xrow[j] - mean) * rstd;
                            let dyg = drow[j] * gv.data()[j];
                            dxrow[j] = rstd * (dyg - m1 - xhat * m2);
                        }
                    }
                    self.accum(*x, Tensor::new(xv.shape().to_vec(), dx)?);
                    self.accum(
                        *gamma,
                        Tensor::new(vec![n], dgamma.iter().map(|&v| v as f32).collect())?,
                    );
                    self.accum(
                        *beta,
                        Tensor::new(vec![n], dbeta.iter().map(|&v| v as f32).collect())?,
                    );
                }
            }
            Op::GatherRows { a, idx, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let src = &self.vals[a.0];
                    let n = src.cols();
                    let mut da = vec![0.0f32; src.numel()];
                    for (pos, &i) in idx.iter().enumerate() {
                        let drow = &d.data()[pos * n..(pos + 1) * n];
                        let target = &mut da[i * n..(i + 1) * n];
                        for (t, &v) in target.iter_mut().zip(drow.iter()) {
                            *t += v;
                        }
                    }
                    self.accum(*a, Tensor::new(src.shape().to_vec(), da)?);
                }
            }
            Op::ScatterCols { a, idx, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let src = &self.vals[a.0];
                    let (m, n) = (src.rows(), src.cols());
                    let width = d.cols();
                    let mut da = vec![0.0f32; m * n];
                    for i in 0..m {
                        let drow = &d.data()[i * width..(i + 1) * width];
                        let arow = &mut da[i * n..(i + 1) * n];
                        for (j, &col) in idx.iter().enumerate() {
                            arow[j] = drow[col];
                        }
                    }
                    self.accum(*a, Tensor::new(vec![m, n], da)?);
                }
            }
            Op::ConcatRows { parts, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let n = d.cols();
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.vals[p.0].rows();
                        let dslice =
                            d.data()[start * n..(start + rows) * n].to_vec();
                        self.accum(
                            p,
                            Tensor::new(self.vals[p.0].shape().to_vec(), dslice)?,
                        );
                        start += rows;
                    }
                }
            }
            Op::ConcatCols { parts, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let m = d.rows();
                    let total = d.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.vals[p.0].cols();
                        let mut dp = vec![0.0f32; m * w];
                        for i in 0..m {
                            dp[i * w..(i + 1) * w].copy_from_slice(
                                &d.data()[i * total + offset..i * total + offset + w],
                            );
                        }
                        self.accum(p, Tensor::new(self.vals[p.0].shape().to_vec(), dp)?);
                        offset += w;
                    }
                }
            }
            Op::SliceRows { a, start, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let src = &self.vals[a.0];
                    let n = src.cols();
                    let mut da = vec![0.0f32; src.numel()];
                    da[start * n..start * n + d.numel()].copy_from_slice(d.data());
                    self.accum(*a, Tensor::new(src.shape().to_vec(), da)?);
                }
            }
            Op::Reshape { a, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let shape = self.vals[a.0].shape().to_vec();
                    self.accum(*a, d.reshaped(shape)?);
                }
            }
            Op::MeanRows { a, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let src = &self.vals[a.0];
                    let (m, n) = (src.rows(), src.cols());
                    let inv = 1.0 / m as f32;
                    let mut da = vec![0.0f32; src.numel()];
                    for row in da.chunks_exact_mut(n) {
                        for (t, &v) in row.iter_mut().zip(d.data().iter()) {
                            *t = v * inv;
                        }
                    }
                    self.accum(*a, Tensor::new(src.shape().to_vec(), da)?);
                }
            }
            Op::L2Norm { a, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let x = &self.vals[a.0];
                    let norm = x.l2_norm();
                    let g = if norm < 1e-12 {
                        Tensor::zeros(x.shape().to_vec())
                    } else {
                        let s = d.data()[0] as f64 / norm;
                        Tensor::new(
                            x.shape().to_vec(),
                            x.data().iter().map(|&v| (v as f64 * s) as f32).collect(),
                        )?
                    };
                    self.accum(*a, g);
                }
            }
            Op::CrossEntropy {
                logits,
                target,
                out,
            } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let row = self.vals[logits.0].data();
                    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let denom: f64 = row.iter().map(|&x| ((x - max) as f64).exp()).sum();
                    let s = d.data()[0];
                    let mut g: Vec<f32> = row
                        .iter()
                        .map(|&x| (((x - max) as f64).exp() / denom) as f32 * s)
                        .collect();
                    g[*target] -= s;
                    self.accum(
                        *logits,
                        Tensor::new(self.vals[logits.0].shape().to_vec(), g)?,
                    );
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_grad<F: FnMut(&[f32]) -> f32>(x: &[f32], mut f: F, h: f32) -> Vec<f32> {
        let mut g = Vec::with_capacity(x.len());
        let mut buf = x.to_vec();
        for i in 0..x.len() {
            let orig = buf[i];
            buf[i] = orig + h;
            let fp = f(&buf);
            buf[i] = orig - h;
            let fm = f(&buf);
            buf[i] = orig;
            g.push((fp - fm) / (2.0 * h));
        }
        g
    }

    /// Central differences of an f32 loss near 1.0 with h=1e-3 carry an
    /// absolute noise floor around 1e-4, so the check is rtol + atol.
    fn grads_close(ad: f32, fd: f32) -> bool {
        (ad - fd).abs() <= 1e-2 * ad.abs().max(fd.abs()) + 1e-4
    }

    #[test]
    fn grad_of_linear_sum_is_input_broadcast() {
        // loss = sum(W @ x) => dW[i][j] = x[j]
        let w = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.0, -0.5])
            .unwrap()
            .trained();
        let x = Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let mut tape = Tape::new(true);
        let wid = tape.param(&w);
        let xid = tape.constant(x);
        let y = tape.matmul(wid, xid).unwrap();
        let ones = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let loss = tape.matmul(ones, y).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.param_grad(wid).unwrap();
        assert_eq!(g.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn grad_of_l2_norm_is_unit_direction() {
        let c = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap().trained();
        let mut tape = Tape::new(true);
        let cid = tape.param(&c);
        let loss = tape.l2_norm(cid);
        tape.backward(loss).unwrap();
        let g = tape.param_grad(cid).unwrap();
        assert!((g.data()[0] - 0.6).abs() < 1e-6);
        assert!((g.data()[1] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn unknown_param_is_an_error() {
        let mut tape = Tape::new(true);
        let c = tape.constant(Tensor::from_vec(vec![1.0]));
        assert!(matches!(
            tape.param_grad(c),
            Err(crate::error::Error::UnknownParam(_))
        ));
    }

    #[test]
    fn backward_twice_rejected() {
        let mut tape = Tape::new(true);
        let p = tape.param(&Tensor::from_vec(vec![2.0]).trained());
        let loss = tape.l2_norm(p);
        tape.backward(loss).unwrap();
        assert!(tape.backward(loss).is_err());
    }

    #[test]
    fn every_op_passes_finite_difference() {
        // One composite expression touching each differentiable op.
        let mut rng = crate::rng::seeded(11);
        let x0 = crate::rng::uniform_tensor(&mut rng, vec![4, 6], 0.8);
        let w = crate::rng::uniform_tensor(&mut rng, vec![6, 6], 0.8);
        let bias = crate::rng::uniform_tensor(&mut rng, vec![6], 0.5);
        let gamma = crate::rng::uniform_tensor(&mut rng, vec![6], 0.5);
        let beta = crate::rng::uniform_tensor(&mut rng, vec![6], 0.5);

        let run = |xv: &[f32], wv: &[f32], gv: &[f32], bv: &[f32], biasv: &[f32]| -> f32 {
            let mut tape = Tape::new(false);
            let x = tape.constant(Tensor::new(vec![4, 6], xv.to_vec()).unwrap());
            let w = tape.constant(Tensor::new(vec![6, 6], wv.to_vec()).unwrap());
            let g = tape.constant(Tensor::new(vec![6], gv.to_vec()).unwrap());
            let b = tape.constant(Tensor::new(vec![6], bv.to_vec()).unwrap());
            let bias = tape.constant(Tensor::new(vec![6], biasv.to_vec()).unwrap());
            graph(&mut tape, x, w, g, b, bias)
        };

        fn graph(
            tape: &mut Tape,
            x: ValId,
            w: ValId,
            gamma: ValId,
            beta: ValId,
            bias: ValId,
        ) -> f32 {
            let ln = tape.layer_norm(x, gamma, beta, 1e-5).unwrap();
            let h = tape.matmul(ln, w).unwrap();
            let h = tape.add_row_broadcast(h, bias).unwrap();
            let h = tape.gelu(h);
            let att = tape.matmul_nt(h, h).unwrap();
            let att = tape.scale(att, 0.25);
            let att = tape.softmax_rows(att).unwrap();
            let mix = tape.matmul(att, h).unwrap();
            let res = tape.add(mix, x).unwrap();
            let top = tape.slice_rows(res, 0, 2).unwrap();
            let bottom = tape.slice_rows(res, 2, 2).unwrap();
            let gathered = tape.gather_rows(bottom, vec![1, 0]).unwrap();
            let rows = tape.concat_rows(&[top, gathered]).unwrap();
            let wide = tape.concat_cols(&[rows, rows]).unwrap();
            let slim = tape.reshape(wide, vec![8, 6]).unwrap();
            let pooled = tape.mean_rows(slim).unwrap();
            let logits = tape.reshape(pooled, vec![6]).unwrap();
            let loss = tape.cross_entropy(logits, 2).unwrap();
            tape.value(loss).data()[0]
        }

        let mut tape = Tape::new(true);
        let xid = tape.param(&x0);
        let wid = tape.param(&w);
        let gid = tape.param(&gamma);
        let bid = tape.param(&beta);
        let biasid = tape.param(&bias);
        let _ = graph(&mut tape, xid, wid, gid, bid, biasid);
        // last value is the loss scalar
        let loss = ValId(tape.vals.len() - 1);
        tape.backward(loss).unwrap();

        let checks: Vec<(ValId, &Tensor)> = vec![
            (xid, &x0),
            (wid, &w),
            (gid, &gamma),
            (bid, &beta),
            (biasid, &bias),
        ];
        for (id, t) in checks {
            let ad = tape.param_grad(id).unwrap();
            let fd = fd_grad(
                t.data(),
                |v| match id {
                    i if i == xid => run(v, w.data(), gamma.data(), beta.data(), bias.data()),
                    i if i == wid => run(x0.data(), v, gamma.data(), beta.data(), bias.data()),
                    i if i == gid => run(x0.data(), w.data(), v, beta.data(), bias.data()),
                    i if i == bid => run(x0.data(), w.data(), gamma.data(), v, bias.data()),
                    _ => run(x0.data(), w.data(), gamma.data(), beta.data(), v),
                },
                1e-3,
            );
            for (j, (&a, &f)) in ad.data().iter().zip(fd.iter()).enumerate() {
                assert!(grads_close(a, f), "param {:?} elem {j}: ad {a} fd {f}", id);
            }
        }
    }

    #[test]
    fn scatter_cols_roundtrips_gradient() {
        let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])
            .unwrap()
            .trained();
        let mut tape = Tape::new(true);
        let xid = tape.param(&x);
        let wide = tape.scatter_cols(xid, vec![3, 1], 4).unwrap();
        assert_eq!(
            tape.value(wide).data(),
            &[0.0, 2.0, 0.0, 1.0, 0.0, 4.0, 0.0, 3.0]
        );
        let ones = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let sel = tape.constant(Tensor::new(vec![4, 1], vec![0.0, 1.0, 0.0, 2.0]).unwrap());
        let s = tape.matmul(wide, sel).unwrap();
        let loss = tape.matmul(ones, s).unwrap();
        tape.backward(loss).unwrap();
        // d wide[:,1] = 1, d wide[:,3] = 2 -> d x = [[2,1],[2,1]]
        assert_eq!(tape.param_grad(xid).unwrap().data(), &[2.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn mac_counter_reproducible_and_exact() {
        let mut rng = crate::rng::seeded(5);
        let a = crate::rng::uniform_tensor(&mut rng, vec![3, 4], 1.0);
        let b = crate::rng::uniform_tensor(&mut rng, vec![4, 5], 1.0);
        let count = |grad: bool| {
            let mut tape = Tape::new(grad);
            let aid = tape.constant(a.clone());
            let bid = tape.constant(b.clone());
            tape.matmul(aid, bid).unwrap();
            tape.matmul_nt(aid, aid).unwrap();
            tape.macs()
        };
        assert_eq!(count(true), (3 * 4 * 5 + 3 * 4 * 3) as u64);
        assert_eq!(count(true), count(false));
    }
}
