//! Dense vector helpers over `[f64]`.

use crate::error::{Error, Result};

pub fn check_len(v: &[f64], expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: v.len(),
        });
    }
    Ok(())
}

pub fn check_finite(v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::Contract(format!(
            "non-finite entry {} at index {i}",
            v[i]
        ))),
        None => Ok(()),
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(v: &[f64]) -> f64 {
    dot(v, v)
}

pub fn norm(v: &[f64]) -> f64 {
    norm_sq(v).sqrt()
}

/// `y += a * x`
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn scale(v: &mut [f64], a: f64) {
    for x in v.iter_mut() {
        *x *= a;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}
