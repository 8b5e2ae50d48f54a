//! Dense row-major f64 matrices.
//!
//! Everything in this crate computes on these: token batches are matrices
//! with one row per token, vectors are 1xN or Nx1 matrices.

use crate::error::{Error, Result};

/// Dense row-major matrix of f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Build from raw row-major data. Errors if the length does not match.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// A 1xN row vector.
    pub fn row_vec(data: Vec<f64>) -> Self {
        let cols = data.len();
        Matrix { rows: 1, cols, data }
    }

    /// An Nx1 column vector.
    pub fn col_vec(data: Vec<f64>) -> Self {
        let rows = data.len();
        Matrix { rows, cols: 1, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise combine with another matrix of identical shape.
    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::dim("zip_map", self.shape(), other.shape()));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Standard matrix product.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dim("matmul", self.shape(), other.shape()));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for j in 0..other.cols {
                    out_row[j] += a * orow[j];
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim("add_assign", self.shape(), other.shape()));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(())
    }

    /// Errors if any element is NaN or infinite.
    pub fn validate_finite(&self, context: &str) -> Result<()> {
        for (idx, &v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite value {} at flat index {} in {}",
                    v, idx, context
                )));
            }
        }
        Ok(())
    }

    /// Largest absolute elementwise difference; errors on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::dim("max_abs_diff", self.shape(), other.shape()));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// LayerNorm over a single row: `(x - mean) / sqrt(var + eps) * gain + bias`,
/// variance with 1/d normalization. Scalar reference used both by the tape op
/// and by recomputation oracles in tests.
pub fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    let d = x.len();
    if d == 0 {
        return Err(Error::Contract("layer_norm on empty input".to_string()));
    }
    if gain.len() != d || bias.len() != d {
        return Err(Error::dim("layer_norm", (1, d), (1, gain.len())));
    }
    if eps < 0.0 {
        return Err(Error::Config(format!("layer_norm eps must be >= 0, got {eps}")));
    }
    let mean = x.iter().sum::<f64>() / d as f64;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
    let istd = 1.0 / (var + eps).sqrt();
    Ok(x.iter()
        .enumerate()
        .map(|(j, &v)| (v - mean) * istd * gain[j] + bias[j])
        .collect())
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let i = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&i).unwrap(), a);
    }

    #[test]
    fn matmul_dot() {
        let a = Matrix::new(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Matrix::new(2, 1, vec![3.0, 4.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "error should carry both shapes: {msg}");
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        // random 3x4 by 4x2 against a scalar triple loop
        let mut rng = crate::numerics::Rng::new(3);
        let a = Matrix::from_fn(3, 4, |_, _| rng.range_f64(-1.0, 1.0));
        let b = Matrix::from_fn(4, 2, |_, _| rng.range_f64(-1.0, 1.0));
        let c = a.matmul(&b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a.get(i, k) * b.get(k, j);
                }
                assert!((c.get(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero_centered() {
        let out = layer_norm_row(&[1.0, 1.0, 1.0], &[1.0; 3], &[0.0; 3], 1e-5).unwrap();
        for v in out {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_unit_variance_case() {
        let out = layer_norm_row(&[-1.0, 1.0], &[1.0; 2], &[0.0; 2], 0.0).unwrap();
        assert!((out[0] + 1.0).abs() < 1e-12);
        assert!((out[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_seeded_oracle() {
        let mut rng = crate::numerics::Rng::new(7);
        let gain: Vec<f64> = (0..3).map(|_| rng.range_f64(-1.0, 1.0)).collect();
        let bias: Vec<f64> = (0..3).map(|_| rng.range_f64(-1.0, 1.0)).collect();
        let x = [0.0, 2.0, 4.0];
        let out = layer_norm_row(&x, &gain, &bias, 1e-5).unwrap();
        // direct scalar recomputation
        let mean = 2.0;
        let var = (4.0 + 0.0 + 4.0) / 3.0;
        let istd = 1.0 / (var + 1e-5_f64).sqrt();
        for j in 0..3 {
            let expect = (x[j] - mean) * istd * gain[j] + bias[j];
            assert!((out[j] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn layer_norm_empty_errors() {
        assert!(layer_norm_row(&[], &[], &[], 1e-5).is_err());
    }

    #[test]
    fn sigmoid_symmetry() {
        assert_eq!(sigmoid(0.0), 0.5);
        // high-precision reference for sigmoid(3.0) = 1/(1+e^-3)
        assert!((sigmoid(3.0) - 0.952_574_126_822_433_1).abs() < 1e-15);
    }
}
