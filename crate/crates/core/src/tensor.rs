//! Dense row-major `f64` tensors and the raw kernels shared by the
//! value-level and tape-level execution paths.
//!
//! Keeping one kernel per operation (matrix product, temperature softmax,
//! and so on) guarantees that a value-only forward pass and a taped forward
//! pass produce bit-identical numbers: both call the same code in the same
//! reduction order.

use crate::error::{Error, Result};

/// Dense tensor of `f64` values in row-major order.
///
/// Invariant: `data.len() == shape.iter().product()`. Rank 0 is not used;
/// scalars are rank-1 tensors of length 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, validating that `data` fills `shape` exactly.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "tensor shape {:?} wants {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if shape.is_empty() {
            return Err(Error::invalid("tensor rank must be at least 1"));
        }
        Ok(Tensor { shape, data })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        assert!(!shape.is_empty(), "tensor rank must be at least 1");
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    /// Rank-1 tensor of length 1 holding `v`.
    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Rank-1 tensor from a vector.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Rank-2 tensor from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// True when the tensor holds exactly one element.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a one-element tensor.
    ///
    /// Panics when the tensor holds more than one element.
    pub fn scalar_value(&self) -> f64 {
        assert!(self.is_scalar(), "scalar_value on shape {:?}", self.shape);
        self.data[0]
    }

    /// Row `r` of a rank-2 tensor as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        assert_eq!(self.rank(), 2, "row() on shape {:?}", self.shape);
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Errors unless every element is finite.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::non_finite(context))
        }
    }
}

/// Index of the largest value; ties resolve to the lowest index.
///
/// Panics on an empty slice.
pub fn argmax(values: &[f64]) -> usize {
    assert!(!values.is_empty(), "argmax of empty slice");
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Index of the largest value among `c != exclude`; ties resolve to the
/// lowest index. Panics unless the slice has at least 2 entries.
pub fn argmax_excluding(values: &[f64], exclude: usize) -> usize {
    assert!(values.len() >= 2, "argmax_excluding needs >= 2 entries");
    let mut best = usize::MAX;
    for (i, &v) in values.iter().enumerate() {
        if i == exclude {
            continue;
        }
        if best == usize::MAX || v > values[best] {
            best = i;
        }
    }
    best
}

// ── shared kernels ──────────────────────────────────────────────────────

/// `out = a + b` elementwise. Caller guarantees equal lengths.
pub(crate) fn add_kernel(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// `out = a * b` elementwise. Caller guarantees equal lengths.
pub(crate) fn mul_kernel(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

/// Matrix product of row-major `a` (m x k) and `b` (k x n).
///
/// Accumulation runs over `k` in index order for every output element, so
/// the result is reproducible bit for bit.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Temperature softmax over each row of `x` (rows x cols, row-major).
///
/// The temperature divides the logits first; max subtraction for stability
/// happens on the scaled values. `tau` must be positive and `cols >= 1`.
pub(crate) fn softmax_rows_kernel(x: &[f64], rows: usize, cols: usize, tau: f64) -> Vec<f64> {
    debug_assert!(tau > 0.0);
    debug_assert_eq!(x.len(), rows * cols);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let scaled: Vec<f64> = row.iter().map(|v| v / tau).collect();
        let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &s) in scaled.iter().enumerate() {
            let e = (s - m).exp();
            out[r * cols + j] = e;
            sum += e;
        }
        for j in 0..cols {
            out[r * cols + j] /= sum;
        }
    }
    out
}

/// Temperature log-softmax over each row of `x`; same conventions as
/// [`softmax_rows_kernel`].
pub(crate) fn log_softmax_rows_kernel(x: &[f64], rows: usize, cols: usize, tau: f64) -> Vec<f64> {
    debug_assert!(tau > 0.0);
    debug_assert_eq!(x.len(), rows * cols);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let scaled: Vec<f64> = row.iter().map(|v| v / tau).collect();
        let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &s in &scaled {
            sum += (s - m).exp();
        }
        // Max-subtracted form: rows that are translates of each other get
        // bit-identical outputs, so KL between them cancels exactly.
        let ln_sum = sum.ln();
        for (j, &s) in scaled.iter().enumerate() {
            out[r * cols + j] = (s - m) - ln_sum;
        }
    }
    out
}

/// Dot product accumulated in index order.
pub(crate) fn dot_kernel(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// Euclidean norm accumulated in index order.
pub(crate) fn norm2_kernel(a: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &v in a {
        acc += v * v;
    }
    acc.sqrt()
}

/// Sum of all elements in index order.
pub(crate) fn sum_kernel(a: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &v in a {
        acc += v;
    }
    acc
}

/// Cosine similarity with a zero fallback: either norm below `1e-12`
/// yields exactly 0.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let na = norm2_kernel(a);
    let nb = norm2_kernel(b);
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    dot_kernel(a, b) / (na * nb)
}

/// Temperature softmax of a single vector; see [`softmax_rows_kernel`].
pub fn softmax(values: &[f64], tau: f64) -> Vec<f64> {
    softmax_rows_kernel(values, 1, values.len(), tau)
}

/// Temperature log-softmax of a single vector.
pub fn log_softmax(values: &[f64], tau: f64) -> Vec<f64> {
    log_softmax_rows_kernel(values, 1, values.len(), tau)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let p = softmax(&[0.0, 0.0, 0.0], 1.0);
        for &v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_under_any_temperature() {
        let x = [3.0, -1.0, 0.5, 10.0, 10.0, -10.0];
        for &tau in &[0.25, 1.0, 4.0] {
            let p = softmax_rows_kernel(&x, 2, 3, tau);
            for r in 0..2 {
                let s: f64 = p[r * 3..(r + 1) * 3].iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "tau {tau} row {r} sum {s}");
            }
        }
    }

    #[test]
    fn temperature_divides_before_stabilization() {
        // With tau = 2 the distribution must equal softmax(z / 2) exactly.
        let z = [4.0, 2.0, 0.0];
        let direct = softmax(&[2.0, 1.0, 0.0], 1.0);
        let tempered = softmax(&z, 2.0);
        assert_eq!(direct, tempered);
    }

    #[test]
    fn softmax_survives_extreme_logits() {
        let p = softmax(&[1000.0, 0.0, -1000.0], 1.0);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let z = [0.3, -1.2, 2.0, 0.0];
        let p = softmax(&z, 3.0);
        let lp = log_softmax(&z, 3.0);
        for (a, b) in p.iter().zip(&lp) {
            assert!((a.ln() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_identity_passthrough() {
        let out = matmul_kernel(&[1.0, 0.0, 0.0, 1.0], &[3.0, 4.0], 2, 2, 1);
        assert_eq!(out, vec![3.0, 4.0]);
    }

    #[test]
    fn argmax_ties_go_to_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax_excluding(&[5.0, 3.0, 3.0], 0), 1);
    }

    #[test]
    fn cosine_zero_fallback() {
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
        let c = cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]);
        assert!((c - 1.0).abs() < 1e-15);
    }
}
