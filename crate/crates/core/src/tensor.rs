// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major `f32` tensors and the deterministic kernels behind every
//! recorded op.
//!
//! All reductions accumulate in ascending index order so that a kernel
//! evaluated twice on the same inputs yields bit-identical output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NodeId;

/// Dense numeric array with an optional reference to the tape node that
/// produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    #[serde(skip)]
    node: Option<NodeId>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` matches `shape`.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Invalid(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            node: None,
        })
    }

    /// All-zero tensor.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
            node: None,
        }
    }

    /// 2-D tensor from rows × cols data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// 1-D tensor.
    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Graph node that produced this tensor, if it was recorded.
    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub(crate) fn with_node(mut self, node: NodeId) -> Self {
        self.node = Some(node);
        self
    }

    /// Row count when viewed as a matrix (`1` for vectors).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Row `r` of the matrix view.
    pub fn row(&self, r: usize) -> &[f32] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Whether every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_strides: (isize, isize), b: &[f32], b_strides: (isize, isize)) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    // SAFETY: the strides address exactly the `m×k`, `k×n` and `m×n`
    // row-major buffers checked by the callers' debug assertions.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

/// `a (m×k) · b (k×n)`.
pub fn matmul(a: &[f32], m: usize, k: usize, b: &[f32], n: usize) -> Vec<f32> {
    assert_eq!(a.len(), m * k, "matmul lhs");
    assert_eq!(b.len(), k * n, "matmul rhs");
    gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1))
}

/// `a (m×k) · bᵀ` where `b` is `n×k`.
pub fn matmul_bt(a: &[f32], m: usize, k: usize, b: &[f32], n: usize) -> Vec<f32> {
    assert_eq!(a.len(), m * k, "matmul_bt lhs");
    assert_eq!(b.len(), n * k, "matmul_bt rhs");
    gemm(m, k, n, a, (k as isize, 1), b, (1, k as isize))
}

/// `aᵀ · b` where `a` is `k×m` and `b` is `k×n`.
pub fn matmul_at(a: &[f32], k: usize, m: usize, b: &[f32], n: usize) -> Vec<f32> {
    assert_eq!(a.len(), k * m, "matmul_at lhs");
    assert_eq!(b.len(), k * n, "matmul_at rhs");
    gemm(m, k, n, a, (1, m as isize), b, (n as isize, 1))
}

/// Per-row mean and standard deviation (with `eps` under the square root).
pub fn row_stats(x: &[f32], cols: usize, eps: f32) -> (Vec<f32>, Vec<f32>) {
    let rows = x.len() / cols;
    let mut mean = Vec::with_capacity(rows);
    let mut std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut s = 0.0f32;
        for &v in row {
            s += v;
        }
        let mu = s / cols as f32;
        let mut var = 0.0f32;
        for &v in row {
            let d = v - mu;
            var += d * d;
        }
        var /= cols as f32;
        mean.push(mu);
        std.push((var + eps).sqrt());
    }
    (mean, std)
}

/// Per-row mean and `sqrt(var + eps)`, kept in f64.
pub fn row_stats_f64(x: &[f32], cols: usize, eps: f32) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / cols;
    let mut mean = Vec::with_capacity(rows);
    let mut std = Vec::with_capacity(rows);
    for row in x.chunks(cols).take(rows) {
        let mu = row.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
        let var = row.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / cols as f64;
        mean.push(mu);
        std.push((var + eps as f64).sqrt());
    }
    (mean, std)
}

/// LayerNorm evaluated with the given per-row statistics.
pub fn layer_norm_with(
    x: &[f32],
    cols: usize,
    mean: &[f32],
    std: &[f32],
    gamma: &[f32],
    beta: &[f32],
) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for (r, (mu, sd)) in mean.iter().zip(std).enumerate() {
        for c in 0..cols {
            let i = r * cols + c;
            out[i] = (x[i] - mu) / sd * gamma[c] + beta[c];
        }
    }
    out
}

const SQRT_2_OVER_PI: f32 = 0.797_884_6;

/// Tanh-approximated GELU.
pub fn gelu(x: f32) -> f32 {
    let inner = SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_grad(x: f32) -> f32 {
    let inner = SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x);
    let t = inner.tanh();
    let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044_715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Row-wise softmax. Entries where `mask` is false get probability zero.
pub fn softmax_rows(x: &[f32], cols: usize, mask: Option<&[bool]>) -> Vec<f32> {
    let rows = x.len() / cols;
    let mut out = vec![0.0f32; x.len()];
    for r in 0..rows {
        let allowed = |c: usize| mask.is_none_or(|m| m[r * cols + c]);
        let mut mx = f32::NEG_INFINITY;
        for c in 0..cols {
            if allowed(c) {
                mx = mx.max(x[r * cols + c]);
            }
        }
        let mut sum = 0.0f32;
        for c in 0..cols {
            if allowed(c) {
                let e = (x[r * cols + c] - mx).exp();
                out[r * cols + c] = e;
                sum += e;
            }
        }
        for c in 0..cols {
            out[r * cols + c] /= sum;
        }
    }
    out
}

/// Relative L2 distance `‖a − b‖ / ‖b‖`, accumulated in `f64`.
pub fn rel_l2(a: &[f32], b: &[f32]) -> f64 {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x as f64 - y as f64;
        num += d * d;
        den += (y as f64) * (y as f64);
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}
