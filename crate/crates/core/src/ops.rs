//! Forward kernels shared by the autodiff tape and by plain inference.
//!
//! Every kernel processes rows independently and in a fixed order, so a row's
//! result does not depend on which other rows share the batch (batch-norm in
//! train mode excepted, which is inherently a batch statistic).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

fn dim_err(op: &'static str, detail: String) -> Error {
    Error::Dimension { op, detail }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.shape().len() == 2 {
        Ok(())
    } else {
        Err(dim_err(op, format!("expected a matrix, got shape {:?}", t.shape())))
    }
}

/// `x W` with `x: n×p`, `W: p×q`.
pub fn matmul(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    require_matrix("matmul", x)?;
    require_matrix("matmul", w)?;
    let (n, p) = (x.rows(), x.cols());
    let (p2, q) = (w.rows(), w.cols());
    if p != p2 {
        return Err(dim_err("matmul", format!("{n}x{p} times {p2}x{q}")));
    }
    let out = gemm(n, p, q, x.data(), (p, 1), w.data(), (q, 1));
    Tensor::new(vec![n, q], out)
}

/// Row-major `m×n` product of an `m×k` and a `k×n` operand given as
/// `(row stride, column stride)` views.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    assert!(a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    assert!(b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    // SAFETY: the asserts keep every strided read inside `a` and `b`, and
    // `out` is a dense m×n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

/// `y[i,j] = Σ_k x[i,k] W[k,j] + b[j]`.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut y = matmul(x, w)?;
    let q = y.cols();
    if b.len() != q {
        return Err(dim_err(
            "affine",
            format!("bias has {} entries, output has {q} columns", b.len()),
        ));
    }
    let bd = b.data();
    for row in y.data_mut().chunks_mut(q) {
        for (v, &bv) in row.iter_mut().zip(bd) {
            *v += bv;
        }
    }
    Ok(y)
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Row-wise `z - logsumexp(z)` with max subtraction.
pub fn log_softmax(z: &Tensor) -> Result<Tensor> {
    let c = z.cols();
    if c < 2 {
        return Err(dim_err("log_softmax", format!("needs at least 2 columns, got {c}")));
    }
    if !z.is_finite() {
        return Err(Error::Numeric("log_softmax input".into()));
    }
    let mut out = z.data().to_vec();
    for row in out.chunks_mut(c) {
        let lse = log_sum_exp(row);
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Tensor::new(z.shape().to_vec(), out)
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Stable softmax of a single vector.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(values);
    values.iter().map(|&v| (v - lse).exp()).collect()
}

/// Picks `x[i, labels[i]]` into an `n×1` column.
pub fn gather(x: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, c) = (x.rows(), x.cols());
    if labels.len() != n {
        return Err(dim_err("gather", format!("{} labels for {n} rows", labels.len())));
    }
    let mut out = Vec::with_capacity(n);
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Input(format!("label {y} at row {i} with {c} classes")));
        }
        out.push(x.get(i, y));
    }
    Tensor::new(vec![n, 1], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    /// Folds one batch into the running estimates, using the unbiased batch variance.
    pub fn update(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        let n = stats.count as f64;
        let correction = n / (n - 1.0);
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b * correction;
        }
    }
}

/// Per-channel batch mean and biased variance from a train-mode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// Normalized activations plus what the backward pass needs.
#[derive(Debug, Clone)]
pub struct BatchNormOutput {
    pub y: Tensor,
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub stats: Option<BatchStats>,
}

pub fn batch_norm(
    x: &Tensor,
    scale: &Tensor,
    shift: &Tensor,
    state: &BatchNormState,
    mode: Mode,
) -> Result<BatchNormOutput> {
    require_matrix("batch_norm", x)?;
    let (n, q) = (x.rows(), x.cols());
    for (name, t) in [
        ("scale", scale),
        ("shift", shift),
        ("running mean", &state.running_mean),
        ("running var", &state.running_var),
    ] {
        if t.len() != q {
            return Err(dim_err(
                "batch_norm",
                format!("{name} has {} entries for {q} channels", t.len()),
            ));
        }
    }
    let xd = x.data();
    let (mean, var, stats) = match mode {
        Mode::Train => {
            if n < 2 {
                return Err(Error::DegenerateBatch(n));
            }
            let mut mean = vec![0.0; q];
            for row in xd.chunks(q) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut var = vec![0.0; q];
            for row in xd.chunks(q) {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= n as f64);
            let stats = BatchStats {
                mean: mean.clone(),
                var: var.clone(),
                count: n,
            };
            (mean, var, Some(stats))
        }
        Mode::Eval => (
            state.running_mean.data().to_vec(),
            state.running_var.data().to_vec(),
            None,
        ),
    };
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + state.eps).sqrt()).collect();
    let mut xhat = vec![0.0; n * q];
    let mut y = vec![0.0; n * q];
    let (sd, hd) = (scale.data(), shift.data());
    for i in 0..n {
        for j in 0..q {
            let k = i * q + j;
            let h = (xd[k] - mean[j]) * inv_std[j];
            xhat[k] = h;
            y[k] = sd[j] * h + hd[j];
        }
    }
    Ok(BatchNormOutput {
        y: Tensor::new(vec![n, q], y)?,
        xhat: Tensor::new(vec![n, q], xhat)?,
        inv_std,
        stats,
    })
}
