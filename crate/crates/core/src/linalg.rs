//! Small dense numerics shared by the training and scoring code.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};

pub type Vector = Array1<f64>;
pub type Matrix = Array2<f64>;

/// Scale `v` to unit Euclidean length.
pub fn l2_normalize(v: ArrayView1<'_, f64>) -> Result<Vector> {
    let norm = v.dot(&v).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(v.mapv(|x| x / norm))
}

/// Convenience wrapper over [`l2_normalize`] for plain slices.
pub fn l2_normalize_slice(v: &[f64]) -> Result<Vec<f64>> {
    l2_normalize(ArrayView1::from(v)).map(|a| a.to_vec())
}

/// Backward pass of `v = z / |z|`: maps a gradient with respect to the unit
/// vector `v` onto a gradient with respect to `z`.
pub fn normalize_backward(unit: &Vector, norm: f64, grad_unit: &Vector) -> Vector {
    let radial = unit.dot(grad_unit);
    (grad_unit - &(unit * radial)) / norm
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

/// Logistic function, stable for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Subgradient of |x| with 0 at the kink.
pub fn abs_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Index of the largest element; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn squared_distance(a: &Vector, b: &Vector) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}
