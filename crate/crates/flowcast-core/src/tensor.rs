//! Dense f64 vectors and matrices, the only value kinds the tape manipulates.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

/// Shape of a [`Tensor`]. Scalars are represented as length-1 vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        matches!(*self, Shape::Vector(1))
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            Shape::Vector(n) => write!(f, "[{n}]"),
            Shape::Matrix(r, c) => write!(f, "[{r}x{c}]"),
        }
    }
}

/// Dense value: a vector or a row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub enum Tensor {
    Vector(Array1<f64>),
    Matrix(Array2<f64>),
}

impl Tensor {
    pub fn scalar(v: f64) -> Self {
        Tensor::Vector(Array1::from_vec(vec![v]))
    }

    pub fn from_vec(v: Vec<f64>) -> Self {
        Tensor::Vector(Array1::from_vec(v))
    }

    pub fn zeros(shape: Shape) -> Self {
        match shape {
            Shape::Vector(n) => Tensor::Vector(Array1::zeros(n)),
            Shape::Matrix(r, c) => Tensor::Matrix(Array2::zeros((r, c))),
        }
    }

    pub fn shape(&self) -> Shape {
        match self {
            Tensor::Vector(a) => Shape::Vector(a.len()),
            Tensor::Matrix(a) => Shape::Matrix(a.nrows(), a.ncols()),
        }
    }

    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            Tensor::Vector(a) if a.len() == 1 => Some(a[0]),
            _ => None,
        }
    }

    pub fn vector(&self) -> Option<&Array1<f64>> {
        match self {
            Tensor::Vector(a) => Some(a),
            _ => None,
        }
    }

    pub fn matrix(&self) -> Option<&Array2<f64>> {
        match self {
            Tensor::Matrix(a) => Some(a),
            _ => None,
        }
    }

    /// Flat view of the elements in storage order (row-major for matrices).
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        let slice = match self {
            Tensor::Vector(a) => a.as_slice().expect("contiguous"),
            Tensor::Matrix(a) => a.as_slice().expect("contiguous"),
        };
        slice.iter().copied()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().collect()
    }

    pub fn from_flat(shape: Shape, data: Vec<f64>) -> Option<Self> {
        if data.len() != shape.len() {
            return None;
        }
        Some(match shape {
            Shape::Vector(_) => Tensor::Vector(Array1::from_vec(data)),
            Shape::Matrix(r, c) => Tensor::Matrix(Array2::from_shape_vec((r, c), data).ok()?),
        })
    }

    /// Mutable flat access, storage order.
    pub fn flat_mut(&mut self) -> &mut [f64] {
        match self {
            Tensor::Vector(a) => a.as_slice_mut().expect("contiguous"),
            Tensor::Matrix(a) => a.as_slice_mut().expect("contiguous"),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        match self {
            Tensor::Vector(a) => Tensor::Vector(a.mapv(&f)),
            Tensor::Matrix(a) => Tensor::Matrix(a.mapv(&f)),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }

    /// Elementwise accumulate `other` into `self`; shapes must already agree.
    pub fn accumulate(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        match (self, other) {
            (Tensor::Vector(a), Tensor::Vector(b)) => *a += b,
            (Tensor::Matrix(a), Tensor::Matrix(b)) => *a += b,
            _ => unreachable!("shape agreement checked by caller"),
        }
    }
}

impl From<Array1<f64>> for Tensor {
    fn from(a: Array1<f64>) -> Self {
        Tensor::Vector(a)
    }
}

impl From<Array2<f64>> for Tensor {
    fn from(a: Array2<f64>) -> Self {
        // Ensure standard (row-major, contiguous) layout so flat access is stable.
        Tensor::Matrix(a.as_standard_layout().into_owned())
    }
}
