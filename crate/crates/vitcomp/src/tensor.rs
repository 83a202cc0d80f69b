//! Dense row-major f32 tensors and the scalar kernels behind every layer.
//!
//! Values are immutable once built except for in-place optimizer updates
//! owned by the trainer thread. Reductions accumulate in f64 with a fixed
//! element order, so results are bit-stable run to run.

use crate::error::{Error, Result};

/// Dense n-dimensional array, row-major, f32 storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != data.len() {
            return Err(Error::Dimension {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
        }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            requires_grad: false,
        }
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        let n = data.len();
        Tensor {
            shape: vec![n],
            data,
            requires_grad: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Mark as a trainable parameter.
    pub fn trained(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all dims but the first; the row width of a 2-d view.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
            requires_grad: false,
        })
    }

    /// Euclidean norm, accumulated in f64.
    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt()
    }
}

fn check_2d(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(Error::Dimension {
            op,
            lhs: t.shape.clone(),
            rhs: vec![],
        });
    }
    Ok((t.shape[0], t.shape[1]))
}

/// C = A @ B with A [m,k], B [k,n]. Inner products accumulate in f64 over a
/// per-row buffer in fixed k order. Returns the MAC count alongside.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<(Tensor, u64)> {
    let (m, k) = check_2d(a, "matmul")?;
    let (kb, n) = check_2d(b, "matmul")?;
    if k != kb {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a.data[i * k..(i + 1) * k];
        for (t, &av) in arow.iter().enumerate() {
            let av = av as f64;
            let brow = &b.data[t * n..(t + 1) * n];
            for (accv, &bv) in acc.iter_mut().zip(brow.iter()) {
                *accv += av * bv as f64;
            }
        }
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(acc.iter()) {
            *o = v as f32;
        }
    }
    Ok((
        Tensor {
            shape: vec![m, n],
            data: out,
            requires_grad: false,
        },
        (m * k * n) as u64,
    ))
}

/// C = A @ B^T with A [m,k], B [n,k]. Runs as transpose + matmul so the
/// inner loop keeps the same vectorizable fixed-order f64 accumulation.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<(Tensor, u64)> {
    let (_, k) = check_2d(a, "matmul_nt")?;
    let (_, kb) = check_2d(b, "matmul_nt")?;
    if k != kb {
        return Err(Error::Dimension {
            op: "matmul_nt",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let bt = transpose2d(b)?;
    matmul(a, &bt)
}

/// C = A^T @ B with A [k,m], B [k,n]. Backward helper for matmul.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<(Tensor, u64)> {
    let (k, m) = check_2d(a, "matmul_tn")?;
    let (kb, n) = check_2d(b, "matmul_tn")?;
    if k != kb {
        return Err(Error::Dimension {
            op: "matmul_tn",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0f64; m * n];
    for t in 0..k {
        let arow = &a.data[t * m..(t + 1) * m];
        let brow = &b.data[t * n..(t + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let av = av as f64;
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv as f64;
            }
        }
    }
    Ok((
        Tensor {
            shape: vec![m, n],
            data: out.into_iter().map(|v| v as f32).collect(),
            requires_grad: false,
        },
        (m * k * n) as u64,
    ))
}

pub fn transpose2d(a: &Tensor) -> Result<Tensor> {
    let (m, n) = check_2d(a, "transpose")?;
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::Dimension {
            op: "add",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let data = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(&x, &y)| x + y)
        .collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
        requires_grad: false,
    })
}

/// Broadcast add of a [n]-vector onto every row of an [m,n] matrix.
pub fn add_row_broadcast(a: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, n) = check_2d(a, "add_row_broadcast")?;
    if bias.shape != [n] {
        return Err(Error::Dimension {
            op: "add_row_broadcast",
            lhs: a.shape.clone(),
            rhs: bias.shape.clone(),
        });
    }
    let mut data = a.data.clone();
    for row in data.chunks_exact_mut(n) {
        for (x, &b) in row.iter_mut().zip(bias.data.iter()) {
            *x += b;
        }
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
        requires_grad: false,
    })
}

pub fn scale(a: &Tensor, s: f32) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|&x| x * s).collect(),
        requires_grad: false,
    }
}

/// tanh-form GELU, the DeiT activation.
/// gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
pub const GELU_SQRT_2_OVER_PI: f32 = 0.797_884_56;
pub const GELU_CUBIC: f32 = 0.044_715;

pub fn gelu_scalar(x: f32) -> f32 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad_scalar(x: f32) -> f32 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu(a: &Tensor) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|&x| gelu_scalar(x)).collect(),
        requires_grad: false,
    }
}

/// Row-wise softmax over the last axis of a 2-d tensor. Max-shifted,
/// f64 accumulation for the normalizer.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (_, n) = check_2d(a, "softmax")?;
    let mut data = vec![0.0f32; a.data.len()];
    for (orow, irow) in data.chunks_exact_mut(n).zip(a.data.chunks_exact(n)) {
        let max = irow.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f64;
        for (o, &x) in orow.iter_mut().zip(irow.iter()) {
            let e = (x - max).exp();
            *o = e;
            denom += e as f64;
        }
        let inv = (1.0 / denom) as f32;
        orow.iter_mut().for_each(|o| *o *= inv);
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
        requires_grad: false,
    })
}

/// Per-row standardization stats: (mean, 1/sqrt(var + eps)) per row.
/// Variance is the biased (population) estimate, both moments in f64.
pub fn row_moments(a: &Tensor, eps: f32) -> Result<(Vec<f32>, Vec<f32>)> {
    let (m, n) = check_2d(a, "layer_norm")?;
    let mut means = Vec::with_capacity(m);
    let mut rstds = Vec::with_capacity(m);
    for row in a.data.chunks_exact(n) {
        let mean = row.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
        let var = row
            .iter()
            .map(|&x| {
                let d = x as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n as f64;
        means.push(mean as f32);
        rstds.push((1.0 / (var + eps as f64).sqrt()) as f32);
    }
    Ok((means, rstds))
}

/// y = (x - mean) * rstd * gamma + beta per row.
pub fn layer_norm(a: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let (_, n) = check_2d(a, "layer_norm")?;
    if gamma.shape != [n] || beta.shape != [n] {
        return Err(Error::Dimension {
            op: "layer_norm",
            lhs: a.shape.clone(),
            rhs: gamma.shape.clone(),
        });
    }
    let (means, rstds) = row_moments(a, eps)?;
    let mut data = vec![0.0f32; a.data.len()];
    for (r, (orow, irow)) in data
        .chunks_exact_mut(n)
        .zip(a.data.chunks_exact(n))
        .enumerate()
    {
        let (mean, rstd) = (means[r], rstds[r]);
        for (j, (o, &x)) in orow.iter_mut().zip(irow.iter()).enumerate() {
            *o = (x - mean) * rstd * gamma.data[j] + beta.data[j];
        }
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
        requires_grad: false,
    })
}
