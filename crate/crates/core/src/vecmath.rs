//! Exact vector primitives shared by every module: normalization, cosine,
//! exponential similarity, Euclidean distance, and the normalization
//! vector-Jacobian product used during backpropagation.
//!
//! All arithmetic is f64 with fixed-order reductions so that identical
//! inputs always produce identical bits.

use crate::error::{AmcnError, Result};

/// Norms at or below this are treated as zero vectors.
pub const ZERO_TOL: f64 = 1e-12;

/// A d-dimensional embedding with unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitEmbedding(Vec<f64>);

impl UnitEmbedding {
    /// Wrap a vector that is already unit-norm. Deviations beyond 1e-9 are
    /// rejected.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let n = norm(&values);
        if (n - 1.0).abs() > 1e-9 {
            return Err(AmcnError::NormViolation((n - 1.0).abs()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for UnitEmbedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Project a raw vector onto the unit hypersphere.
pub fn normalize(v: &[f64]) -> Result<UnitEmbedding> {
    let n = norm(v);
    if n <= ZERO_TOL {
        return Err(AmcnError::ZeroVector { norm: n });
    }
    Ok(UnitEmbedding(v.iter().map(|x| x / n).collect()))
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na <= ZERO_TOL {
        return Err(AmcnError::ZeroVector { norm: na });
    }
    if nb <= ZERO_TOL {
        return Err(AmcnError::ZeroVector { norm: nb });
    }
    let c = dot(a, b) / (na * nb);
    Ok(c.clamp(-1.0, 1.0))
}

/// Temperature-scaled exponential similarity: exp(cos(a, b) / sigma).
pub fn similarity(a: &[f64], b: &[f64], sigma: f64) -> Result<f64> {
    if sigma <= 0.0 {
        return Err(AmcnError::NonPositiveTemperature(sigma));
    }
    Ok((cosine(a, b)? / sigma).exp())
}

/// Euclidean distance between two unit-norm embeddings; always in [0, 2].
pub fn euclid(a: &UnitEmbedding, b: &UnitEmbedding) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.0.len() {
        let d = a.0[i] - b.0[i];
        acc += d * d;
    }
    acc.sqrt()
}

/// Vector-Jacobian product of `normalize` at `z` applied to `g`:
/// (I - zhat zhatᵀ) g / ||z||. The output is orthogonal to normalize(z).
pub fn normalize_jacobian_vp(z: &[f64], g: &[f64]) -> Result<Vec<f64>> {
    let n = norm(z);
    if n <= ZERO_TOL {
        return Err(AmcnError::ZeroVector { norm: n });
    }
    let zhat: Vec<f64> = z.iter().map(|x| x / n).collect();
    let proj = dot(&zhat, g);
    Ok((0..z.len()).map(|i| (g[i] - proj * zhat[i]) / n).collect())
}
