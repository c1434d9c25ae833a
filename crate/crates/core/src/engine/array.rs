//! Dense row-major f64 arrays, the value type of the expression engine.

use serde::{Deserialize, Serialize};

use super::EngineError;

/// A dense array of f64 values in row-major order.
///
/// Rank 0 (empty shape) is a scalar holding exactly one value. Zero-sized
/// dimensions are permitted so that empty batches flow through the engine.
/// Construction rejects non-finite values; every engine operation preserves
/// that invariant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, EngineError> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(EngineError::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        let arr = Array { shape, data };
        arr.check_finite("Array::new")?;
        Ok(arr)
    }

    pub fn scalar(value: f64) -> Self {
        Array { shape: vec![], data: vec![value] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Array { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Array { shape: vec![data.len()], data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, EngineError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(EngineError::ShapeMismatch(
                    "rows of unequal length".into(),
                ));
            }
            data.extend_from_slice(row);
        }
        Array::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// True for rank-0 arrays, the only shape that broadcasts.
    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Extract the value of a scalar array.
    pub fn item(&self) -> Result<f64, EngineError> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(EngineError::ShapeMismatch(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    /// Element (i, j) of a rank-2 array.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Row `i` of a rank-2 array as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub(crate) fn check_finite(&self, context: &str) -> Result<(), EngineError> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(EngineError::NonFinite(context.to_string()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Array::new(vec![2, 2], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(Array::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Array::new(vec![2], vec![f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn zero_sized_dims_are_allowed() {
        let a = Array::new(vec![0, 5], vec![]).unwrap();
        assert_eq!(a.len(), 0);
        assert_eq!(a.shape(), &[0, 5]);
    }

    #[test]
    fn scalar_roundtrip() {
        let s = Array::scalar(2.5);
        assert!(s.is_scalar());
        assert_eq!(s.item().unwrap(), 2.5);
        assert!(Array::from_vec(vec![1.0, 2.0]).item().is_err());
    }

    #[test]
    fn row_access() {
        let a = Array::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(a.row(1), &[3.0, 4.0]);
        assert_eq!(a.at2(0, 1), 2.0);
    }
}
