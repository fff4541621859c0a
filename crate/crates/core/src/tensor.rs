//! Dense row-major `f32` tensors.

use crate::error::NnError;

/// A dense row-major array of `f32` with an explicit shape.
///
/// The element count always equals the product of the shape entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, NnError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(NnError::Shape(format!("invalid tensor shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NnError::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite);
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    /// Builds a tensor from a closure over flat indices.
    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f32) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(channels, height, width)` for a rank-3 tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize), NnError> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(NnError::Shape(format!(
                "expected a [C, H, W] tensor, got {:?}",
                self.shape
            ))),
        }
    }

    /// `(rows, cols)` for a rank-2 tensor.
    pub fn rows_cols(&self) -> Result<(usize, usize), NnError> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(NnError::Shape(format!(
                "expected a [rows, cols] matrix, got {:?}",
                self.shape
            ))),
        }
    }

    /// Value at a multi-dimensional index. Panics when out of bounds.
    pub fn at(&self, index: &[usize]) -> f32 {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} of size {dim}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reorders the channels of a `[C, H, W]` tensor: output channel `i` is input channel `perm[i]`.
    pub fn permute_channels(&self, perm: &[usize]) -> Result<Self, NnError> {
        let (c, h, w) = self.chw()?;
        if perm.len() != c {
            return Err(NnError::Shape(format!(
                "permutation of length {} for {c} channels",
                perm.len()
            )));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(self.data.len());
        for &src in perm {
            if src >= c {
                return Err(NnError::Shape(format!("channel {src} out of range")));
            }
            data.extend_from_slice(&self.data[src * plane..(src + 1) * plane]);
        }
        Ok(Self::from_parts_unchecked(self.shape.clone(), data))
    }

    /// Multiplies every element by `factor`.
    pub fn scaled(&self, factor: f32) -> Self {
        Self::from_parts_unchecked(
            self.shape.clone(),
            self.data.iter().map(|v| v * factor).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f32::NAN]).is_err());
    }

    #[test]
    fn row_major_indexing() {
        let t = Tensor::from_fn(vec![2, 3, 4], |i| i as f32);
        assert_eq!(t.at(&[1, 2, 3]), 23.0);
        assert_eq!(t.at(&[0, 1, 0]), 4.0);
        assert_eq!(t.chw().unwrap(), (2, 3, 4));
    }

    #[test]
    fn channel_permutation() {
        let t = Tensor::from_fn(vec![3, 1, 2], |i| i as f32);
        let p = t.permute_channels(&[2, 0, 1]).unwrap();
        assert_eq!(p.data(), &[4.0, 5.0, 0.0, 1.0, 2.0, 3.0]);
    }
}
