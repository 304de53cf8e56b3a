//! Central finite differences, used as an independent oracle in tests and
//! model self-checks. Deliberately kept apart from the exact derivative
//! paths it is used to audit.

use nalgebra::{DMatrix, DVector};

/// Central-difference Jacobian of a vector-valued map.
pub fn central_jacobian<F>(f: F, x: &DVector<f64>, h: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let fx = f(x);
    let mut jac = DMatrix::zeros(fx.len(), x.len());
    for j in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let diff = (f(&xp) - f(&xm)) / (2.0 * h);
        jac.column_mut(j).copy_from(&diff);
    }
    jac
}

/// Central-difference gradient of a scalar function.
pub fn central_gradient<F>(f: F, x: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let mut g = DVector::zeros(x.len());
    for j in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        g[j] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    g
}

/// Largest relative error between two arrays, with an absolute floor below
/// which entries count as equal.
pub fn max_relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>, abs_floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let diff = (x - y).abs();
        if diff <= abs_floor {
            continue;
        }
        let scale = x.abs().max(y.abs()).max(abs_floor);
        worst = worst.max(diff / scale);
    }
    worst
}
