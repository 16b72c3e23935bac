//! Dense row-major tensors and the scalar types they can hold.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating point width of stored values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn byte_width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    /// Code stored in binary file headers.
    pub fn code(self) -> u32 {
        self.byte_width() as u32
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            4 => Some(Precision::F32),
            8 => Some(Precision::F64),
            _ => None,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision {other:?}"))),
        }
    }
}

/// Element type of a [`Tensor`].
pub trait Scalar:
    Float + FromPrimitive + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const PRECISION: Precision;

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one value; `bytes` must hold exactly `PRECISION.byte_width()` bytes.
    fn read_le(bytes: &[u8]) -> Self;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// A dense array with an optional gradient buffer.
///
/// An empty shape denotes a scalar holding one value.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let expected = numel(&shape);
        if shape.contains(&0) || expected != data.len() {
            return Err(Error::ShapeData {
                shape,
                expected,
                found: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor::new(shape, vec![T::zero(); n]).expect("positive extents")
    }

    pub fn scalar(value: T) -> Self {
        Tensor::new(Vec::new(), vec![value]).expect("scalar shape")
    }

    /// Builds a 1-D tensor from `f64` literals, converting to `T`.
    pub fn from_f64(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Tensor::new(
            shape,
            values.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        )
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::Shape {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![delta.len()],
            });
        }
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, &d)| *g = *g + d),
            None => self.grad = Some(delta.to_vec()),
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Number of rows when viewed as a matrix (leading extent, 1 for vectors).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Number of columns when viewed as a matrix (trailing extent).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(Error::ShapeData {
                expected: numel(&shape),
                shape,
                found: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Converts to another precision. Gradients are dropped.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().expect("float")))
                .collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .field("requires_grad", &self.requires_grad)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}
