//! Dense 4-D filter bank of a single convolution layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weights of one conv layer, laid out row-major as `[n_out, n_in, kh, kw]`.
///
/// Filter `j` is the contiguous slice `data[j * filter_len .. (j + 1) * filter_len]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterTensor {
    layer_id: String,
    shape: [usize; 4],
    data: Vec<f32>,
}

impl FilterTensor {
    pub fn new(layer_id: impl Into<String>, shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let layer_id = layer_id.into();
        if shape.contains(&0) {
            return Err(Error::Structural(format!(
                "filter tensor for `{layer_id}` has an empty dimension: {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Dimension { expected: vec![expected], actual: vec![data.len()] });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                layer: layer_id,
                detail: format!("element {pos} is {}", data[pos]),
            });
        }
        Ok(Self { layer_id, shape, data })
    }

    pub fn zeros(layer_id: impl Into<String>, shape: [usize; 4]) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(layer_id, shape, vec![0.0; n])
    }

    /// A zero tensor with the same id and shape as `self`.
    pub fn zeros_like(&self) -> Self {
        Self { layer_id: self.layer_id.clone(), shape: self.shape, data: vec![0.0; self.data.len()] }
    }

    /// Builds a tensor with the same id and shape from an elementwise map.
    pub(crate) fn with_data(&self, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self { layer_id: self.layer_id.clone(), shape: self.shape, data }
    }

    pub fn layer_id(&self) -> &str {
        &self.layer_id
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n_filters(&self) -> usize {
        self.shape[0]
    }

    /// Number of elements in one filter (`n_in * kh * kw`).
    pub fn filter_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn filter(&self, j: usize) -> &[f32] {
        let len = self.filter_len();
        &self.data[j * len..(j + 1) * len]
    }

    pub fn filter_mut(&mut self, j: usize) -> &mut [f32] {
        let len = self.filter_len();
        &mut self.data[j * len..(j + 1) * len]
    }

    pub fn filters(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.filter_len())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &FilterTensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension { expected: self.shape.to_vec(), actual: other.shape.to_vec() });
        }
        Ok(())
    }

    /// Squared Frobenius norm, accumulated in `f64`.
    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v) * f64::from(v)).sum()
    }

    /// Squared Frobenius distance `‖self − other‖_F²`, accumulated in `f64`.
    pub fn distance_sq(&self, other: &FilterTensor) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = f64::from(a) - f64::from(b);
                d * d
            })
            .sum())
    }

    /// Number of filters with at least one nonzero element.
    pub fn nonzero_filters(&self) -> usize {
        self.filters().filter(|f| f.iter().any(|&v| v != 0.0)).count()
    }

    /// Number of nonzero elements.
    pub fn nonzero_elements(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    pub(crate) fn zip_map(
        &self,
        other: &FilterTensor,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<FilterTensor> {
        self.ensure_same_shape(other)?;
        Ok(self.with_data(self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_dims_and_nan() {
        assert!(matches!(FilterTensor::zeros("c", [0, 1, 1, 1]), Err(Error::Structural(_))));
        assert!(matches!(
            FilterTensor::new("c", [1, 1, 1, 2], vec![0.0, f32::NAN]),
            Err(Error::Numeric { .. })
        ));
        assert!(matches!(
            FilterTensor::new("c", [1, 1, 1, 2], vec![0.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn filter_slices() {
        let t = FilterTensor::new("c", [2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.filter(1), &[3.0, 4.0]);
        assert_eq!(t.filters().count(), 2);
        assert_eq!(t.frobenius_sq(), 30.0);
    }
}
