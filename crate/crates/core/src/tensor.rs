//! Dense row-major tensors over any [`Scalar`].

use crate::error::{dimension, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(dimension(format!("shape {shape:?} has a zero extent")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dimension(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); n] }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: (0..n).map(&mut f).collect() }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
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

    fn dims2(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(dimension(format!("{what} must be a matrix, got shape {:?}", self.shape))),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn map<U: Scalar>(&self, mut f: impl FnMut(T) -> U) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn tanh(&self) -> Self {
        self.map(T::tanh)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    fn zip_with(&self, other: &Self, op: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(dimension(format!(
                "{op} of shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose operand")?;
        let mut data = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                data.push(self.data[i * c + j]);
            }
        }
        Ok(Tensor { shape: vec![c, r], data })
    }

    /// Standard matrix product `self[m×k] · other[k×n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.check_inner(other)?;
        let bt = other.transpose()?;
        self.matmul_t(&bt)
    }

    /// `self[m×k] · other[n×k]ᵀ`, the layout of a linear layer's weight.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2("left operand")?;
        let (n, k2) = other.dims2("right operand")?;
        if k != k2 {
            return Err(dimension(format!(
                "matmul of shapes {:?} and transposed {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor { shape: vec![m, n], data: T::matmul_nt(&self.data, &other.data, m, k, n) })
    }

    fn check_inner(&self, other: &Self) -> Result<()> {
        let (_, k) = self.dims2("left operand")?;
        let (k2, _) = other.dims2("right operand")?;
        if k != k2 {
            return Err(dimension(format!(
                "matmul of shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Adds a length-`cols` bias to every row. The only broadcast supported.
    pub fn add_row(&self, bias: &[T]) -> Result<Self> {
        let (_, c) = self.dims2("bias-add operand")?;
        if bias.len() != c {
            return Err(dimension(format!(
                "bias of length {} for matrix of shape {:?}",
                bias.len(),
                self.shape
            )));
        }
        let data = self
            .data
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(bias).map(|(&x, &b)| x + b))
            .collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn lift<U: Scalar>(&self) -> Tensor<U> {
        self.map(|x| U::constant(x.value()))
    }

    pub fn values(&self) -> Tensor<f64> {
        self.map(|x| x.value())
    }
}

impl Tensor<f64> {
    pub fn identity(n: usize) -> Self {
        Tensor::from_fn(vec![n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}
