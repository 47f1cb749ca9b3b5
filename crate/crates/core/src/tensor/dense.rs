use crate::error::{Error, Result};

use super::kernels;

/// Row-major float tensor. The leading extent is the time axis wherever a
/// time axis exists.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl DenseTensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} holds {} elements but {} were given",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data, grad: None })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self { shape, data: vec![value; n], grad: None }
    }

    pub fn scalar(value: f32) -> Self {
        Self { shape: vec![1], data: vec![value], grad: None }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f32) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(&mut f).collect();
        Self { shape, data, grad: None }
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f32]> {
        self.grad.as_deref_mut()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f32]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::dim(format!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            )));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(Error::dim(format!("cannot reshape {:?} into {:?}", self.shape, shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// True when every element is exactly 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f32 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f32
        }
    }

    /// 2-D contraction `self · rhs`.
    pub fn matmul(&self, rhs: &DenseTensor) -> Result<DenseTensor> {
        let (m, k) = as_matrix(self)?;
        let (k2, n) = as_matrix(rhs)?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner extents differ: {:?} x {:?}",
                self.shape, rhs.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, &self.data, false, &rhs.data, false, &mut out, 0.0);
        DenseTensor::new(vec![m, n], out)
    }

    pub fn transpose2d(&self) -> Result<DenseTensor> {
        let (m, n) = as_matrix(self)?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        DenseTensor::new(vec![n, m], out)
    }
}

pub(crate) fn as_matrix(t: &DenseTensor) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::dim(format!("expected a 2-D tensor, got shape {s:?}"))),
    }
}

/// Free-function form of [`DenseTensor::matmul`].
pub fn matmul_dense(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    a.matmul(b)
}
