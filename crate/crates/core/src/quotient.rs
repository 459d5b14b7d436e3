//! Geometry of the additive projective space: vectors modulo constants.
//!
//! A class `[x]` is represented by `x - min(x)·1`, so representatives are
//! nonnegative with at least one zero coordinate, and the Hilbert seminorm
//! `max(x) - min(x)` is the largest coordinate of the representative.

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, Error, Result};

/// `max_i x_i - min_i x_i`.
pub fn hilbert_seminorm(x: &[f64]) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::invalid("vector", "Hilbert seminorm of an empty vector"));
    }
    check_finite("vector", x)?;
    Ok(spread(x))
}

/// Seminorm without validation. Empty input yields 0.
#[inline]
pub(crate) fn spread(x: &[f64]) -> f64 {
    let (lo, hi) = min_max(x);
    if x.is_empty() {
        0.0
    } else {
        hi - lo
    }
}

#[inline]
pub(crate) fn min_max(x: &[f64]) -> (f64, f64) {
    x.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Hilbert distance between the classes of `a` and `b`.
#[inline]
pub(crate) fn hilbert_distance(a: &[f64], b: &[f64]) -> f64 {
    let (lo, hi) = a
        .iter()
        .zip(b)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (x, y)| {
            let d = x - y;
            (lo.min(d), hi.max(d))
        });
    if a.is_empty() {
        0.0
    } else {
        hi - lo
    }
}

/// Subtracts the minimum coordinate in place.
#[inline]
pub(crate) fn canonicalize(x: &mut [f64]) {
    let (lo, _) = min_max(x);
    if lo.is_finite() {
        x.iter_mut().for_each(|v| *v -= lo);
    }
}

/// Canonical representative of a class of `R^n / R·1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QuotientPoint {
    representative: Vec<f64>,
}

impl QuotientPoint {
    /// Builds the class of `x` without validating it.
    pub(crate) fn from_vec(mut x: Vec<f64>) -> Self {
        canonicalize(&mut x);
        Self { representative: x }
    }

    pub fn representative(&self) -> &[f64] {
        &self.representative
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.representative
    }

    pub fn dim(&self) -> usize {
        self.representative.len()
    }

    /// Hilbert seminorm of the class.
    pub fn seminorm(&self) -> f64 {
        spread(&self.representative)
    }

    /// Hilbert distance to another class of the same dimension.
    pub fn distance(&self, other: &QuotientPoint) -> f64 {
        hilbert_distance(&self.representative, &other.representative)
    }
}

/// Returns `x - (min_i x_i)·1`.
pub fn canonical_rep(x: &[f64]) -> Result<QuotientPoint> {
    if x.is_empty() {
        return Err(Error::invalid("vector", "empty vector has no class"));
    }
    check_finite("vector", x)?;
    Ok(QuotientPoint::from_vec(x.to_vec()))
}
