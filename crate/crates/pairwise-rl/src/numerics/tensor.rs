//! Dense f64 tensors, rank 1 and 2, row-major.
//!
//! Shape conventions:
//! - matrices are `[rows, cols]`, data row-major;
//! - vectors are `[n]`;
//! - scalars are `[1]`.
//!
//! Shape mismatches are programmer errors and panic with the offending
//! shapes in the message; fallible constructors return `Result` instead.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                context: "Tensor::from_vec".into(),
                expected: format!("{numel} elements for shape {shape:?}"),
                actual: format!("{} elements", data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::from_vec(&[rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row count for rank 2, length for rank 1.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count; rank-1 tensors count as a single column.
    pub fn cols(&self) -> usize {
        match self.rank() {
            1 => 1,
            2 => self.shape[1],
            r => panic!("cols() on rank-{r} tensor"),
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn item(&self) -> f64 {
        assert!(
            self.numel() == 1,
            "item() on tensor with {} elements",
            self.numel()
        );
        self.data[0]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        debug_assert!(self.rank() == 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, x: f64) {
        debug_assert!(self.rank() == 2);
        self.data[r * self.shape[1] + c] = x;
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Tensor::from_vec(shape, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn assert_same_shape(&self, other: &Tensor, context: &str) {
        assert!(
            self.shape == other.shape,
            "{context}: shape {:?} vs {:?}",
            self.shape,
            other.shape
        );
    }
}

/// `[m,k] @ [k,n] -> [m,n]`, naive triple loop with a fixed accumulation
/// order so plain and tape forward passes agree bitwise.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert!(
        a.rank() == 2 && b.rank() == 2,
        "matmul: rank {} @ rank {}",
        a.rank(),
        b.rank()
    );
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    assert!(k == k2, "matmul: inner dims {k} vs {k2}");
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// `[m,k] @ [n,k]^T -> [m,n]`.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Tensor {
    assert!(a.rank() == 2 && b.rank() == 2, "matmul_bt: rank mismatch");
    let (m, k) = (a.shape[0], a.shape[1]);
    let (n, k2) = (b.shape[0], b.shape[1]);
    assert!(k == k2, "matmul_bt: inner dims {k} vs {k2}");
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.data[i * k + p] * b.data[j * k + p];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// `[m,k]^T @ [m,n] -> [k,n]`.
pub fn matmul_at(a: &Tensor, b: &Tensor) -> Tensor {
    assert!(a.rank() == 2 && b.rank() == 2, "matmul_at: rank mismatch");
    let (m, k) = (a.shape[0], a.shape[1]);
    let (m2, n) = (b.shape[0], b.shape[1]);
    assert!(m == m2, "matmul_at: outer dims {m} vs {m2}");
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[i * n..(i + 1) * n];
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor {
        shape: vec![k, n],
        data: out,
    }
}

/// Add a length-`c` row vector to every row of an `[r,c]` matrix.
pub fn add_row_broadcast(m: &Tensor, row: &Tensor) -> Tensor {
    assert!(m.rank() == 2 && row.rank() == 1, "add_row: rank mismatch");
    assert!(
        m.shape[1] == row.shape[0],
        "add_row: {} cols vs row of {}",
        m.shape[1],
        row.shape[0]
    );
    let c = m.shape[1];
    let mut out = m.clone();
    for r in 0..m.shape[0] {
        for j in 0..c {
            out.data[r * c + j] += row.data[j];
        }
    }
    out
}

pub fn ew_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64, ctx: &str) -> Tensor {
    a.assert_same_shape(b, ctx);
    Tensor {
        shape: a.shape.clone(),
        data: a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    }
}

/// Numerically stable sigmoid; exact complement symmetry is provided by
/// [`binary_softmax`], which this underpins.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let t = x.exp();
        t / (1.0 + t)
    }
}

/// Two-class softmax over `(logit_a, logit_b)` returning `(p_a, p_b)`.
///
/// Computed as a stable sigmoid of the logit difference, so:
/// - `p_a + p_b == 1.0` exactly (the smaller probability is computed and the
///   larger is its complement);
/// - swapping the logits swaps the outputs exactly;
/// - extreme logits (|difference| in the hundreds) saturate to 0/1 without
///   overflow.
pub fn binary_softmax(logit_a: f64, logit_b: f64) -> Result<(f64, f64)> {
    if !logit_a.is_finite() || !logit_b.is_finite() {
        return Err(Error::Numeric(format!(
            "binary_softmax: non-finite logits ({logit_a}, {logit_b})"
        )));
    }
    let d = logit_a - logit_b;
    let t = (-d.abs()).exp();
    let p_small = t / (1.0 + t);
    let p_big = 1.0 - p_small;
    Ok(if d >= 0.0 {
        (p_big, p_small)
    } else {
        (p_small, p_big)
    })
}

/// Row-wise softmax probabilities of a rank-2 logits matrix, stabilised by
/// max subtraction.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    assert!(logits.rank() == 2, "softmax_rows: rank {}", logits.rank());
    let (r, c) = (logits.shape[0], logits.shape[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &logits.data[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..c {
            let e = (row[j] - m).exp();
            out[i * c + j] = e;
            z += e;
        }
        for j in 0..c {
            out[i * c + j] /= z;
        }
    }
    Tensor {
        shape: vec![r, c],
        data: out,
    }
}

/// Row-wise log-softmax, stabilised by max subtraction.
pub fn log_softmax_rows(logits: &Tensor) -> Tensor {
    assert!(logits.rank() == 2, "log_softmax_rows: rank {}", logits.rank());
    let (r, c) = (logits.shape[0], logits.shape[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &logits.data[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        for j in 0..c {
            out[i * c + j] = row[j] - lse;
        }
    }
    Tensor {
        shape: vec![r, c],
        data: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_known_product() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = matmul(&a, &b);
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_transposed_variants_agree_with_explicit_transpose() {
        let a = Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0]).unwrap();
        let b = Tensor::matrix(2, 3, vec![2.0, 1.0, 0.0, -1.0, 0.5, 2.0]).unwrap();
        let bt = Tensor::matrix(3, 2, vec![2.0, -1.0, 1.0, 0.5, 0.0, 2.0]).unwrap();
        assert_eq!(matmul_bt(&a, &b).data(), matmul(&a, &bt).data());

        let c = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let at = Tensor::matrix(3, 2, vec![1.0, 3.0, -2.0, 4.0, 0.5, -1.0]).unwrap();
        assert_eq!(matmul_at(&a, &c).data(), matmul(&at, &c).data());
    }

    #[test]
    fn binary_softmax_matches_precomputed_sigmoid() {
        let (p, q) = binary_softmax(2.0, 0.0).unwrap();
        assert!((p - 0.8807970779778823).abs() < 1e-15);
        assert!((q - (1.0 - 0.8807970779778823)).abs() < 1e-15);
    }

    #[test]
    fn binary_softmax_equal_logits_give_half() {
        let (p, q) = binary_softmax(0.0, 0.0).unwrap();
        assert_eq!(p, 0.5);
        assert_eq!(q, 0.5);
        let (p, q) = binary_softmax(13.25, 13.25).unwrap();
        assert_eq!(p, 0.5);
        assert_eq!(q, 0.5);
    }

    #[test]
    fn binary_softmax_saturates_without_overflow() {
        let (p, q) = binary_softmax(500.0, -500.0).unwrap();
        assert_eq!(p, 1.0);
        assert_eq!(q, 0.0);
    }

    #[test]
    fn binary_softmax_rejects_non_finite() {
        assert!(binary_softmax(f64::NAN, 0.0).is_err());
        assert!(binary_softmax(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn log_softmax_rows_is_stable_at_extreme_logits() {
        let logits = Tensor::matrix(1, 3, vec![1000.0, 999.0, -1000.0]).unwrap();
        let ls = log_softmax_rows(&logits);
        assert!(ls.is_finite() || ls.data().iter().all(|x| !x.is_nan()));
        let probs: f64 = ls.data().iter().map(|&x| x.exp()).sum();
        assert!((probs - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = Tensor::matrix(2, 4, vec![0.1, -0.2, 0.3, 0.0, 5.0, 5.0, 5.0, 5.0]).unwrap();
        let p = softmax_rows(&logits);
        for i in 0..2 {
            let s: f64 = (0..4).map(|j| p.get2(i, j)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
