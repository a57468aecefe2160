//! Dense embeddings and the similarity kernel.
//!
//! Every similarity in the crate goes through [`dot`]. It accumulates `f32`
//! products into eight `f64` lanes in a fixed order, so the result is
//! bit-identical whichever instruction set executes it. That is what lets the
//! cached-norm propagation engine and the from-scratch oracle agree exactly.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LANES: usize = 8;

/// A validated, non-empty embedding with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyEmbedding);
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteEmbedding { index });
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }
}

impl Deref for EmbeddingVector {
    type Target = [f32];

    fn deref(&self) -> &[f32] {
        &self.0
    }
}

impl TryFrom<Vec<f32>> for EmbeddingVector {
    type Error = Error;

    fn try_from(values: Vec<f32>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f32> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

#[inline(always)]
fn dot_lanes(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0.0f64; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..LANES {
            acc[i] += f64::from(x[i]) * f64::from(y[i]);
        }
    }
    for (i, (x, y)) in ca.remainder().iter().zip(cb.remainder()).enumerate() {
        acc[i] += f64::from(*x) * f64::from(*y);
    }
    ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]))
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn dot_avx2(a: &[f32], b: &[f32]) -> f64 {
    dot_lanes(a, b)
}

/// Inner product of two equal-length slices.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { dot_avx2(a, b) };
        }
    }
    dot_lanes(a, b)
}

/// Euclidean norm. The zero vector has norm 0.
pub fn l2_norm(v: &[f32]) -> f64 {
    dot(v, v).sqrt()
}

/// Squared Euclidean norm.
pub fn sq_norm(v: &[f32]) -> f64 {
    dot(v, v)
}

/// Cosine from a precomputed inner product and squared norms, clamped to
/// [-1, 1]. Taking one square root of the product makes `cos(v, v)` exactly 1.
#[inline]
pub fn cosine_from_parts(dot: f64, sq_norm_a: f64, sq_norm_b: f64) -> f64 {
    (dot / (sq_norm_a * sq_norm_b).sqrt()).clamp(-1.0, 1.0)
}

/// Cosine similarity of two embeddings. Symmetric and scale-invariant.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (na, nb) = (sq_norm(a), sq_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNormEmbedding);
    }
    Ok(cosine_from_parts(dot(a, b), na, nb))
}

/// Row-major embedding storage with squared norms cached at insertion.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f32>,
    sq_norms: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
            sq_norms: Vec::new(),
        }
    }

    pub fn with_capacity(dim: usize, rows: usize) -> Self {
        Self {
            dim,
            data: Vec::with_capacity(dim * rows),
            sq_norms: Vec::with_capacity(rows),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.sq_norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sq_norms.is_empty()
    }

    /// Appends a row and returns its index. Zero-norm rows are rejected.
    pub fn push(&mut self, row: &[f32]) -> Result<usize> {
        if row.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: row.len(),
            });
        }
        if let Some(index) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteEmbedding { index });
        }
        let sq = sq_norm(row);
        if sq == 0.0 {
            return Err(Error::ZeroNormEmbedding);
        }
        self.data.extend_from_slice(row);
        self.sq_norms.push(sq);
        Ok(self.sq_norms.len() - 1)
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn sq_norm(&self, i: usize) -> f64 {
        self.sq_norms[i]
    }

    pub fn norm(&self, i: usize) -> f64 {
        self.sq_norms[i].sqrt()
    }

    /// Cosine between two stored rows using cached norms.
    #[inline]
    pub fn cosine(&self, i: usize, j: usize) -> f64 {
        cosine_from_parts(
            dot(self.row(i), self.row(j)),
            self.sq_norms[i],
            self.sq_norms[j],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_dot(a: &[f32], b: &[f32]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| f64::from(*x) * f64::from(*y))
            .sum()
    }

    #[test]
    fn norm_examples() {
        assert_eq!(l2_norm(&[3.0, 4.0]), 5.0);
        assert_eq!(l2_norm(&[0.0, 0.0, 0.0]), 0.0);
        assert_eq!(l2_norm(&[0.0, 1.0, 0.0, 0.0]), 1.0);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&[2.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        let v = [0.3f32, 0.4, -1.7];
        assert_eq!(cosine_similarity(&v, &v).unwrap(), 1.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-7);
        assert!((c - 0.70710678).abs() < 1e-7);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroNormEmbedding)
        ));
        assert!(matches!(
            cosine_similarity(&[1.0, 0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn vector_validation() {
        assert!(matches!(
            EmbeddingVector::new(vec![]),
            Err(Error::EmptyEmbedding)
        ));
        assert!(matches!(
            EmbeddingVector::new(vec![1.0, f32::NAN]),
            Err(Error::NonFiniteEmbedding { index: 1 })
        ));
        assert!(matches!(
            EmbeddingVector::new(vec![f32::INFINITY]),
            Err(Error::NonFiniteEmbedding { index: 0 })
        ));
    }

    #[test]
    fn matrix_rejects_bad_rows() {
        let mut m = EmbeddingMatrix::new(2);
        assert!(matches!(m.push(&[0.0, 0.0]), Err(Error::ZeroNormEmbedding)));
        assert!(matches!(
            m.push(&[1.0, 0.0, 0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert_eq!(m.push(&[3.0, 4.0]).unwrap(), 0);
        assert_eq!(m.norm(0), 5.0);
        assert!(!m.is_empty() && m.len() == 1);
    }

    #[test]
    fn lane_paths_agree_bitwise() {
        let a: Vec<f32> = (0..77).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..77).map(|i| (i as f32 * 1.13).cos()).collect();
        assert_eq!(dot(&a, &b).to_bits(), dot_lanes(&a, &b).to_bits());
    }

    proptest! {
        #[test]
        fn dot_matches_naive_sum(v in proptest::collection::vec((-10.0f32..10.0, -10.0f32..10.0), 1..200)) {
            let (a, b): (Vec<f32>, Vec<f32>) = v.into_iter().unzip();
            let fast = dot(&a, &b);
            let slow = naive_dot(&a, &b);
            prop_assert!((fast - slow).abs() <= 1e-9 * (1.0 + slow.abs()));
        }

        #[test]
        fn norm_is_absolutely_homogeneous(
            v in proptest::collection::vec(-100.0f32..100.0, 1..128),
            alpha in -50.0f32..50.0,
        ) {
            let scaled: Vec<f32> = v.iter().map(|x| x * alpha).collect();
            let lhs = l2_norm(&scaled);
            let rhs = f64::from(alpha.abs()) * l2_norm(&v);
            prop_assert!((lhs - rhs).abs() <= 1e-6 * (1.0 + rhs));
        }

        #[test]
        fn cosine_is_symmetric_and_bounded(
            v in proptest::collection::vec((-10.0f32..10.0, -10.0f32..10.0), 1..64),
        ) {
            let (a, b): (Vec<f32>, Vec<f32>) = v.into_iter().unzip();
            if let (Ok(ab), Ok(ba)) = (cosine_similarity(&a, &b), cosine_similarity(&b, &a)) {
                prop_assert_eq!(ab.to_bits(), ba.to_bits());
                prop_assert!((-1.0..=1.0).contains(&ab));
            }
        }
    }
}
