use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Allowed deviation of a stored vector's L2 norm from 1.0.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VectorError {
    #[error("vector has no components")]
    Empty,
    #[error("vector component {0} is not finite")]
    NonFinite(usize),
    #[error("vector has zero norm and cannot be normalized")]
    ZeroNorm,
    #[error("vector norm {0} is not 1.0 within tolerance")]
    NotUnitNorm(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// A unit-norm point in the shared text/image embedding space.
///
/// Every constructor either normalizes or checks the norm, so code holding an
/// `EmbeddingVector` can treat a dot product as a cosine similarity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    /// Scales `values` to unit length.
    pub fn normalize(mut values: Vec<f32>) -> Result<Self, VectorError> {
        check_finite(&values)?;
        let norm = l2_norm(&values);
        if norm == 0.0 {
            return Err(VectorError::ZeroNorm);
        }
        for v in &mut values {
            *v = (f64::from(*v) / norm) as f32;
        }
        Ok(Self { values })
    }

    /// Wraps values that are already unit-norm, rejecting anything else.
    pub fn from_unit(values: Vec<f32>) -> Result<Self, VectorError> {
        check_finite(&values)?;
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() >= UNIT_NORM_TOLERANCE {
            return Err(VectorError::NotUnitNorm(norm));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }
}

impl TryFrom<Vec<f32>> for EmbeddingVector {
    type Error = VectorError;

    fn try_from(values: Vec<f32>) -> Result<Self, Self::Error> {
        Self::from_unit(values)
    }
}

impl From<EmbeddingVector> for Vec<f32> {
    fn from(v: EmbeddingVector) -> Self {
        v.values
    }
}

impl AsRef<[f32]> for EmbeddingVector {
    fn as_ref(&self) -> &[f32] {
        &self.values
    }
}

fn check_finite(values: &[f32]) -> Result<(), VectorError> {
    if values.is_empty() {
        return Err(VectorError::Empty);
    }
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(VectorError::NonFinite(i)),
        None => Ok(()),
    }
}

fn l2_norm(values: &[f32]) -> f64 {
    values
        .iter()
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt()
}

/// Dot product with a fixed eight-lane accumulation order.
///
/// The summation order depends only on the slice length, so `dot(a, b)` and
/// `dot(b, a)` are bit-identical and every search path scores a pair the same way.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Cosine similarity of two unit vectors.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f32, VectorError> {
    if a.dim() != b.dim() {
        return Err(VectorError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(dot(a.as_slice(), b.as_slice()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(values: &[f32]) -> EmbeddingVector {
        EmbeddingVector::from_unit(values.to_vec()).unwrap()
    }

    #[test]
    fn orthogonal_is_zero() {
        let s = cosine_similarity(&unit(&[1.0, 0.0]), &unit(&[0.0, 1.0])).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn diagonal() {
        let s = cosine_similarity(&unit(&[1.0, 0.0]), &unit(&[0.70710678, 0.70710678])).unwrap();
        assert!((s - 0.70710678).abs() < 1e-6);
    }

    #[test]
    fn mismatched_dims() {
        let err = cosine_similarity(&unit(&[1.0, 0.0]), &unit(&[0.0, 0.0, 1.0])).unwrap_err();
        assert_eq!(err, VectorError::DimensionMismatch { expected: 2, got: 3 });
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(EmbeddingVector::normalize(vec![]), Err(VectorError::Empty));
        assert_eq!(EmbeddingVector::normalize(vec![0.0, 0.0]), Err(VectorError::ZeroNorm));
        assert_eq!(
            EmbeddingVector::normalize(vec![1.0, f32::NAN]),
            Err(VectorError::NonFinite(1))
        );
        assert!(matches!(
            EmbeddingVector::from_unit(vec![2.0, 0.0]),
            Err(VectorError::NotUnitNorm(_))
        ));
    }

    #[test]
    fn serde_rejects_non_unit() {
        assert!(serde_json::from_str::<EmbeddingVector>("[0.6,0.8]").is_ok());
        assert!(serde_json::from_str::<EmbeddingVector>("[3.0,4.0]").is_err());
    }

    proptest! {
        #[test]
        fn normalized_vectors_are_unit_and_symmetric(
            a in prop::collection::vec(-10.0f32..10.0, 1..70),
            b_seed in prop::collection::vec(-10.0f32..10.0, 70),
        ) {
            prop_assume!(a.iter().any(|v| v.abs() > 1e-3));
            let b: Vec<f32> = b_seed[..a.len()].to_vec();
            prop_assume!(b.iter().any(|v| v.abs() > 1e-3));
            let va = EmbeddingVector::normalize(a).unwrap();
            let vb = EmbeddingVector::normalize(b).unwrap();
            prop_assert!((va.norm() - 1.0).abs() < UNIT_NORM_TOLERANCE);
            let ab = cosine_similarity(&va, &vb).unwrap();
            let ba = cosine_similarity(&vb, &va).unwrap();
            prop_assert_eq!(ab.to_bits(), ba.to_bits());
            prop_assert!(cosine_similarity(&va, &va).unwrap() >= 1.0 - 1e-6);
        }
    }
}
