//! Dense vector helpers over `[f64]`.
//!
//! Every reduction here runs left to right so results never depend on the
//! thread layout of the caller.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// `y += a * x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn scale(a: f64, x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| a * v).collect()
}

/// Arithmetic mean of equally sized vectors.
pub fn mean(vectors: &[Vec<f64>]) -> Vec<f64> {
    assert!(!vectors.is_empty(), "mean of an empty set");
    let d = vectors[0].len();
    let mut out = vec![0.0; d];
    for v in vectors {
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    let inv = 1.0 / vectors.len() as f64;
    for o in &mut out {
        *o *= inv;
    }
    out
}

/// Largest distance from any vector to the set's mean.
pub fn max_deviation(vectors: &[Vec<f64>]) -> f64 {
    let centre = mean(vectors);
    vectors
        .iter()
        .map(|v| dist(v, &centre))
        .fold(0.0, f64::max)
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}
