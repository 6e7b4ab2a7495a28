use super::{Result, TensorError};

/// Ordered extents of a tensor; rank 0 is a scalar.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape(pub(crate) Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(TensorError::Shape(format!(
                "extent {pos} of {dims:?} is zero"
            )));
        }
        Ok(Shape(dims.to_vec()))
    }

    pub fn scalar() -> Self {
        Shape(Vec::new())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for i in (0..self.0.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.0[i + 1];
        }
        strides
    }

    /// Unpacks a rank-4 shape as (N, C, H, W).
    pub fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        match self.0.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            other => Err(TensorError::Shape(format!(
                "expected NCHW tensor, got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.0)
    }
}
