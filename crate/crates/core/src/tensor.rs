//! Dense row-major tensors and the floating-point abstraction shared by the
//! whole crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssign};

/// Floating-point element type. Implemented for `f32` (training default)
/// and `f64` (gradient checks).
pub trait Real: Float + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static {
    /// Short name used in diagnostics.
    const NAME: &'static str;

    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;

    fn of_f32(x: f32) -> Self {
        Self::of(x as f64)
    }

    fn as_f32(self) -> f32 {
        self.as_f64() as f32
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn of_f32(x: f32) -> Self {
        x
    }

    #[inline]
    fn as_f32(self) -> f32 {
        self
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense n-dimensional array with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
}

impl<F: Real> Tensor<F> {
    /// Builds a tensor from row-major data.
    ///
    /// Panics if any dimension is zero or `data.len()` disagrees with the shape.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<F>) -> Self {
        let shape = shape.into();
        assert!(!shape.is_empty(), "tensor shape must have at least one dimension");
        assert!(
            shape.iter().all(|&d| d > 0),
            "tensor dimensions must be positive, got {shape:?}"
        );
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "data length {} does not match shape {shape:?}",
            data.len()
        );
        Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self::new(shape, vec![F::zero(); numel])
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: F) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel])
    }

    pub fn scalar(value: F) -> Self {
        Self::new([1], vec![value])
    }

    /// Builds a `[rows × cols]` matrix from nested rows.
    pub fn from_rows(rows: &[Vec<F>]) -> Self {
        assert!(!rows.is_empty(), "matrix needs at least one row");
        let cols = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new([rows.len(), cols], data)
    }

    /// Same tensor flagged as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    /// Installs a gradient. Panics on a length mismatch.
    pub fn set_grad(&mut self, grad: Vec<F>) {
        assert_eq!(grad.len(), self.data.len(), "gradient shape mismatch");
        self.grad = Some(grad);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.rank(), 2, "expected a matrix, got shape {:?}", self.shape);
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.rank(), 2, "expected a matrix, got shape {:?}", self.shape);
        self.shape[1]
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[F] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Single element of a one-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy with every element converted to another precision.
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::of(v.as_f64())).collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }

    /// Rows `start..end` of a matrix as a new tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        let c = self.cols();
        assert!(start < end && end <= self.rows(), "bad row range {start}..{end}");
        Self::new([end - start, c], self.data[start * c..end * c].to_vec())
    }

    /// Index of the largest element in each row; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    /// Bitwise equality of shape and data.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}
