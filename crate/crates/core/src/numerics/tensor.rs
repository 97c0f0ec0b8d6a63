use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{Error, Result};

/// Dense row-major tensor.
///
/// Operations treat the last dimension as columns and fold every leading
/// dimension into rows, so a `[b, n, d]` tensor behaves as `(b*n) x d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, F::zero())
    }

    pub fn filled(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a matrix from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<F>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Self {
            shape: vec![r, c],
            data: rows.concat(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn rows(&self) -> usize {
        self.len() / self.cols().max(1)
    }

    pub fn row(&self, r: usize) -> &[F] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols() + c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| G::lit(x.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Plain (non-recorded) matrix product of two 2-D tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(Error::shape("matmul expects 2-D operands"));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dims {m}x{k} * {k2}x{n}"
            )));
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(m, k, n, F::one(), &self.data, false, &other.data, false, F::zero(), &mut out);
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut data = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data,
        }
    }

    /// Numerically stable softmax along `axis` (any axis of any rank).
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        if axis >= self.shape.len() {
            return Err(Error::shape(format!(
                "softmax axis {axis} out of range for {:?}",
                self.shape
            )));
        }
        let inner: usize = self.shape[axis + 1..].iter().product();
        let len = self.shape[axis];
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len)
                    .map(|j| self.data[idx(j)])
                    .fold(F::neg_infinity(), F::max);
                let mut sum = F::zero();
                for j in 0..len {
                    let e = (self.data[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[idx(j)] /= sum;
                }
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn matmul_examples() {
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(a.matmul(&Tensor::identity(2)).unwrap(), a);
        let swap = t(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(a.matmul(&swap).unwrap(), t(&[&[2.0, 1.0], &[4.0, 3.0]]));
        let z = Tensor::<f64>::zeros(&[3, 2]);
        assert!(z.matmul(&a).unwrap().data().iter().all(|&x| x == 0.0));
        assert!(a.matmul(&z).is_err());
    }

    #[test]
    fn softmax_any_axis() {
        let x = t(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let rows = x.softmax(1).unwrap();
        assert!((rows.at(0, 0) - 0.731_058_578_6).abs() < 1e-9);
        assert_eq!(rows.at(1, 0), 0.5);
        let cols = x.softmax(0).unwrap();
        assert!((cols.at(0, 0) - 0.731_058_578_6).abs() < 1e-9);
        assert_eq!(cols.at(0, 1), 0.5);
        assert!(x.softmax(2).is_err());
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![0.0f32; 3]).is_err());
        assert!(Tensor::new(vec![0], Vec::<f32>::new()).is_err());
        assert!(Tensor::new(vec![2, 2], vec![0.0f32; 4]).unwrap().reshape(&[3]).is_err());
    }
}
