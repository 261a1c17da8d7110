//! Dense `f64` linear algebra, initialization, the adaptive-moment optimizer
//! and the central-difference gradient oracle.

mod matrix;
mod optim;
mod rng;

pub use matrix::{affine_backward, affine_forward, dot, norm, AffineGrads, Matrix};
pub use optim::{AdamConfig, AdamState, Parameters};
pub use rng::SeededSampler;

use crate::error::{Error, Result};

/// Weight matrix `rows × cols` drawn from N(0, 1/cols).
pub fn gaussian_weight(rows: usize, cols: usize, rng: &mut SeededSampler) -> Matrix {
    let std = 1.0 / (cols.max(1) as f64).sqrt();
    Matrix::from_vec(rows, cols, rng.normal_vec(rows * cols, std))
        .expect("length matches by construction")
}

/// Central-difference gradient `(f(x+ε) − f(x−ε)) / 2ε` per coordinate.
pub fn finite_diff_gradient<F>(mut f: F, params: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let mut x = params.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let plus = f(&x);
        x[i] = orig - eps;
        let minus = f(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Oracle { coord: i });
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`; falls back to the absolute difference when both
/// vectors are numerically zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error on unequal lengths");
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a).max(norm(b));
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}
