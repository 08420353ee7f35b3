//! Dense row-major `f64` tensors.
//!
//! Rank is dynamic; the network code mostly moves rank-2 `[rows, cols]` and
//! rank-4 `[batch, channels, height, width]` values and validates rank at
//! module boundaries.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        if data.len() != numel {
            return Err(Error::contract(format!(
                "shape {shape:?} wants {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::contract("from_rows needs at least one row"));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("from_rows needs equal-length rows"));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar(), "scalar_value on shape {:?}", self.shape);
        self.data[0]
    }

    /// Interprets the tensor as `[batch, channels, height, width]`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::contract(format!(
                "expected rank-4 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Interprets the tensor as `[rows, cols]`.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match *self.shape {
            [r, c] => Ok((r, c)),
            _ => Err(Error::contract(format!(
                "expected rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (rows, cols) = (self.shape[0], self.data.len() / self.shape[0]);
        debug_assert!(self.rank() == 2 && r < rows);
        &self.data[r * cols..(r + 1) * cols]
    }

    /// Row-major offset of `[b, c, y, x]` in a rank-4 tensor.
    pub fn idx4(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        let (_, ch, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        ((b * ch + c) * h + y) * w + x
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self += scale * other`, shapes must match.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::contract(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Euclidean norm of the flattened data.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Stacks equal-shape records along a new leading batch axis.
    pub fn stack(records: &[&Tensor]) -> Result<Tensor> {
        let first = records
            .first()
            .ok_or_else(|| Error::contract("stack needs at least one record"))?;
        if records.iter().any(|t| t.shape != first.shape) {
            return Err(Error::contract("stack needs equal-shape records"));
        }
        let mut shape = Vec::with_capacity(first.rank() + 1);
        shape.push(records.len());
        shape.extend_from_slice(&first.shape);
        let data = records.iter().flat_map(|t| t.data.iter().copied()).collect();
        Tensor::new(shape, data)
    }

    /// One record of a batched tensor, with the leading axis dropped.
    pub fn record(&self, i: usize) -> Result<Tensor> {
        if self.rank() < 2 || i >= self.shape[0] {
            return Err(Error::contract(format!(
                "record {i} out of batch shape {:?}",
                self.shape
            )));
        }
        let stride = self.data.len() / self.shape[0];
        Tensor::new(
            self.shape[1..].to_vec(),
            self.data[i * stride..(i + 1) * stride].to_vec(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_sizes() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn idx4_is_row_major() {
        let t = Tensor::zeros(vec![2, 3, 4, 5]);
        assert_eq!(t.idx4(0, 0, 0, 0), 0);
        assert_eq!(t.idx4(0, 0, 0, 1), 1);
        assert_eq!(t.idx4(0, 0, 1, 0), 5);
        assert_eq!(t.idx4(0, 1, 0, 0), 20);
        assert_eq!(t.idx4(1, 0, 0, 0), 60);
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        let r = t.reshaped(vec![3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(vec![4, 2]).is_err());
    }

    #[test]
    fn stack_and_record_round_trip() {
        let a = Tensor::new(vec![2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        let b = Tensor::full(vec![2, 3], 9.0);
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 3]);
        assert_eq!(s.record(0).unwrap(), a);
        assert_eq!(s.record(1).unwrap(), b);
        assert!(s.record(2).is_err());
        let c = Tensor::zeros(vec![3, 2]);
        assert!(Tensor::stack(&[&a, &c]).is_err());
    }
}
