//! Small linear plant used for fast tests and as a CLI-selectable model.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{AxisBox, ControlAffineModel, DisturbanceField};
use crate::error::Result;

/// Two-state, one-input damped oscillator `x1' = x2, x2' = -x1 - x2 + u`.
pub fn linear_test_model() -> ControlAffineModel {
    let lambda = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -1.0]);
    let jac = lambda.clone();
    let drift = Arc::new(move |x: &DVector<f64>| -> Result<DVector<f64>> { Ok(&lambda * x) });
    let drift_jac = Arc::new(move |_x: &DVector<f64>| -> Result<DMatrix<f64>> { Ok(jac.clone()) });
    let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
    ControlAffineModel::with_constant_b(
        "linear-test",
        drift,
        drift_jac,
        b,
        AxisBox::new(vec![-2.0, -2.0], vec![2.0, 2.0]),
        AxisBox::new(vec![-2.0], vec![2.0]),
    )
}

/// Mild time- and state-dependent disturbance for the linear plant.
pub fn linear_test_disturbance() -> DisturbanceField {
    DisturbanceField::new(
        Arc::new(|t: f64, x: &DVector<f64>| {
            DVector::from_vec(vec![0.3 * t.cos() + 0.2 * x[0].sin()])
        }),
        0.5,
    )
}
