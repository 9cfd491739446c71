//! Plain dense tensors. All computation flows through [`crate::tape::Tape`];
//! a `Tensor` is just shape + data + an optional gradient accumulator.

use crate::error::{Error, Result};
use num_traits::{Float, FromPrimitive, NumAssign};

/// Scalar element type for the engine. Training runs at f32; gradient-check
/// tests instantiate everything at f64.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn from_f64_(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).unwrap()
    }
    fn from_usize_(x: usize) -> Self {
        <Self as FromPrimitive>::from_usize(x).unwrap()
    }
    fn to_f64_(self) -> f64;
}

impl Scalar for f32 {
    fn to_f64_(self) -> f64 {
        self as f64
    }
}
impl Scalar for f64 {
    fn to_f64_(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dim(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); numel],
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient accumulator, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) {
        debug_assert_eq!(g.len(), self.data.len());
        let grad = self
            .grad
            .get_or_insert_with(|| vec![T::zero(); self.data.len()]);
        for (a, b) in grad.iter_mut().zip(g) {
            *a += *b;
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Takes the accumulated gradient, leaving the slot empty.
    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    /// Gathers rows along the leading axis into a new tensor.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        if self.shape.is_empty() {
            return Err(Error::Dim("gather_rows on rank-0 tensor".into()));
        }
        let row: usize = self.shape[1..].iter().product();
        let n = self.shape[0];
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            if i >= n {
                return Err(Error::Dim(format!("row index {i} out of {n}")));
            }
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor::new(shape, data)
    }
}

pub fn check_slice_finite<T: Scalar>(data: &[T], context: &str) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context.to_string()))
    }
}
