use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("shape {shape:?} needs {expected} elements, got {got}")]
    LengthMismatch { shape: Vec<usize>, expected: usize, got: usize },
    #[error("shape {0:?} has a zero extent")]
    ZeroExtent(Vec<usize>),
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(TensorError::ZeroExtent(shape));
        }
        let expected = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::LengthMismatch { shape, expected, got: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1, 1], data: vec![v] }
    }

    /// Builds a `[rows.len(), width]` matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<T> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading extent (1 for scalars).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of the trailing extents.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on a tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows selected by `indices`, in that order.
    pub fn gather_rows(&self, indices: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor { shape, data }
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[&Tensor<T>]) -> Self {
        let rows = parts[0].rows();
        let cols: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Tensor { shape: vec![rows, cols], data }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Tensor { shape: self.shape.clone(), data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// `[n,k] × [k,m] → [n,m]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Self {
        let (n, k, m) = (self.rows(), self.cols(), other.cols());
        assert_eq!(k, other.rows(), "matmul inner dimensions differ");
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for (p, &a) in self.row(i).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                for (o, &b) in orow.iter_mut().zip(other.row(p)) {
                    *o += a * b;
                }
            }
        }
        Tensor { shape: vec![n, m], data: out }
    }

    pub fn transpose(&self) -> Self {
        let (n, m) = (self.rows(), self.cols());
        let mut data = vec![T::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                data[j * n + i] = self.data[i * m + j];
            }
        }
        Tensor { shape: vec![m, n], data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![0, 3], vec![]).is_err());
        assert_eq!(Tensor::<f64>::zeros(&[2, 3]).len(), 6);
    }

    #[test]
    fn matmul_and_transpose() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::matrix(3, 1, vec![1.0, 0.0, -1.0]).unwrap();
        assert_eq!(a.matmul(&b).data(), &[-2.0, -2.0]);
        assert_eq!(a.transpose().transpose(), a);
        assert_eq!(a.transpose().row(2), &[3.0, 6.0]);
    }

    #[test]
    fn concat_and_gather() {
        let a = Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = Tensor::concat_cols(&[&a, &b]);
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        assert_eq!(c.gather_rows(&[1]).data(), &[2.0, 5.0, 6.0]);
    }
}
