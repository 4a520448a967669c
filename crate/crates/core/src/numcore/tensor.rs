//! Dense row-major real tensor.
//!
//! Values are held as `f64` regardless of the declared element type; the
//! `F32` dtype rounds values through `f32` on construction and selects the
//! 32-bit encoding in binary formats. All reductions accumulate in 64-bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element precision tag. Arithmetic always runs in 64-bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum DType {
    #[default]
    F64,
    F32,
}

/// Dense tensor with row-major storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    dtype: DType,
}

impl Tensor {
    /// Builds a tensor, checking that the shape matches the payload length.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, dtype: DType::F64 })
    }

    pub fn with_dtype(shape: Vec<usize>, data: Vec<f64>, dtype: DType) -> Result<Self> {
        let mut t = Tensor::new(shape, data)?;
        t.dtype = dtype;
        if dtype == DType::F32 {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n], dtype: DType::F64 }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v], dtype: DType::F64 }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn cast(&self, dtype: DType) -> Self {
        let mut t = self.clone();
        t.dtype = dtype;
        if dtype == DType::F32 {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
        t
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The two dimensions of a matrix, or an error for other ranks.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::ShapeMismatch(format!("expected a matrix, got shape {:?}", other))),
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        let cols = self.shape[1];
        self.data[r * cols + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    /// Row `r` of a matrix as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[r * cols..(r + 1) * cols]
    }

    /// Column `c` of a matrix, copied out.
    pub fn column(&self, c: usize) -> Vec<f64> {
        let (rows, cols) = (self.shape[0], self.shape[1]);
        (0..rows).map(|r| self.data[r * cols + c]).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            dtype: self.dtype,
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    fn check_same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{op}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor { shape: self.shape.clone(), data, dtype: self.dtype })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Tensor { shape: self.shape.clone(), data, dtype: self.dtype })
    }

    pub fn mul_elem(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "mul")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Ok(Tensor { shape: self.shape.clone(), data, dtype: self.dtype })
    }

    /// `self += s * other`, in place.
    pub fn axpy(&mut self, s: f64, other: &Self) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul: {}x{} . {}x{}",
                m, k, k2, n
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    pub fn trace(&self) -> Result<f64> {
        let (r, c) = self.dims2()?;
        if r != c {
            return Err(Error::NotSquare { rows: r, cols: c });
        }
        Ok((0..r).map(|i| self.data[i * c + i]).sum())
    }

    pub fn diagonal(&self) -> Result<Vec<f64>> {
        let (r, c) = self.dims2()?;
        if r != c {
            return Err(Error::NotSquare { rows: r, cols: c });
        }
        Ok((0..r).map(|i| self.data[i * c + i]).collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `(A + Aᵀ)/2` for a square matrix.
    pub fn symmetrized(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if r != c {
            return Err(Error::NotSquare { rows: r, cols: c });
        }
        let mut out = self.clone();
        for i in 0..r {
            for j in (i + 1)..r {
                let v = 0.5 * (self.data[i * c + j] + self.data[j * c + i]);
                out.data[i * c + j] = v;
                out.data[j * c + i] = v;
            }
        }
        Ok(out)
    }

    /// Largest absolute asymmetry `max |a_ij - a_ji|` of a square matrix.
    pub fn asymmetry(&self) -> Result<f64> {
        let (r, c) = self.dims2()?;
        if r != c {
            return Err(Error::NotSquare { rows: r, cols: c });
        }
        let mut worst: f64 = 0.0;
        for i in 0..r {
            for j in (i + 1)..r {
                worst = worst.max((self.data[i * c + j] - self.data[j * c + i]).abs());
            }
        }
        Ok(worst)
    }

    /// `self += s * v vᵀ` for a square matrix and a vector of matching size.
    pub fn add_scaled_outer(&mut self, s: f64, v: &[f64]) -> Result<()> {
        let (r, c) = self.dims2()?;
        if r != c || v.len() != r {
            return Err(Error::ShapeMismatch(format!(
                "outer update: matrix {}x{}, vector {}",
                r,
                c,
                v.len()
            )));
        }
        for i in 0..r {
            let vi = s * v[i];
            let row = &mut self.data[i * c..(i + 1) * c];
            for (dst, &vj) in row.iter_mut().zip(v) {
                *dst += vi * vj;
            }
        }
        Ok(())
    }
}

/// `out = A (m x k) . B (k x n)`, row-major, accumulating into `out`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}
