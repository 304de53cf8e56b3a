//! Tethered space robot, dimensionless deployment model.
//!
//! States: `z1` in-plane libration angle, `z2` tether length minus one,
//! `z3 = z1'`, `z4 = z2'`. Controls act directly on the two accelerations.
//! The model is singular at `z2 = -1` (zero tether length); evaluation
//! rejects states near that line instead of clamping, since clamped
//! dynamics would corrupt any disturbance estimate fitted against them.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{AxisBox, ControlAffineModel, DisturbanceField};
use crate::error::{Error, Result};

const SINGULARITY_MARGIN: f64 = 1e-6;

fn check_domain(x: &DVector<f64>) -> Result<f64> {
    let len = x[1] + 1.0;
    if len <= SINGULARITY_MARGIN {
        return Err(Error::DomainViolation(format!(
            "tether length z2 + 1 = {len:.3e} is at or below the singular line"
        )));
    }
    Ok(len)
}

/// Four-state, two-input tethered-space-robot deployment dynamics.
pub fn tsr_model() -> ControlAffineModel {
    let drift = Arc::new(|x: &DVector<f64>| -> Result<DVector<f64>> {
        let len = check_domain(x)?;
        let (z1, z3, z4) = (x[0], x[2], x[3]);
        Ok(DVector::from_vec(vec![
            z3,
            z4,
            -2.0 * z4 / len * (z3 + 1.0) - 3.0 * z1.sin() * z1.cos(),
            len * ((z3 + 1.0) * (z3 + 1.0) + 3.0 * z1.cos() * z1.cos() - 1.0),
        ]))
    });
    let jac = Arc::new(|x: &DVector<f64>| -> Result<DMatrix<f64>> {
        let len = check_domain(x)?;
        let (z1, z3, z4) = (x[0], x[2], x[3]);
        let mut j = DMatrix::zeros(4, 4);
        j[(0, 2)] = 1.0;
        j[(1, 3)] = 1.0;
        j[(2, 0)] = -3.0 * (2.0 * z1).cos();
        j[(2, 1)] = 2.0 * z4 * (z3 + 1.0) / (len * len);
        j[(2, 2)] = -2.0 * z4 / len;
        j[(2, 3)] = -2.0 * (z3 + 1.0) / len;
        j[(3, 0)] = -3.0 * len * (2.0 * z1).sin();
        j[(3, 1)] = (z3 + 1.0) * (z3 + 1.0) + 3.0 * z1.cos() * z1.cos() - 1.0;
        j[(3, 2)] = 2.0 * len * (z3 + 1.0);
        Ok(j)
    });
    let b = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
    ControlAffineModel::with_constant_b(
        "tsr",
        drift,
        jac,
        b,
        AxisBox::new(vec![-0.8, -0.95, -1.0, -1.0], vec![0.8, 0.0, 1.0, 1.0]),
        AxisBox::new(vec![-3.0, -3.0], vec![3.0, 0.0]),
    )
}

/// True external disturbance acting on the TSR accelerations.
pub fn tsr_disturbance() -> DisturbanceField {
    DisturbanceField::new(
        Arc::new(|t: f64, x: &DVector<f64>| {
            DVector::from_vec(vec![0.3 * (t.cos() + x[1].sin()), 0.2 * x[0].cos()])
        }),
        0.6,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn drift_at_origin() {
        let model = tsr_model();
        let f = model.f(&DVector::zeros(4)).unwrap();
        assert_relative_eq!(
            f,
            DVector::from_vec(vec![0.0, 0.0, 0.0, 3.0]),
            epsilon = 1e-15
        );
    }

    #[test]
    fn drift_at_quarter_turn_equilibrium() {
        // z1 = pi/2 zeroes the gravity-gradient torque, z2 = -0.5 with
        // (z3+1)^2 + 3 cos^2 z1 - 1 = 0 zeroes the radial acceleration
        let model = tsr_model();
        let x = DVector::from_vec(vec![std::f64::consts::FRAC_PI_2, -0.5, 0.0, 0.0]);
        let f = model.f(&x).unwrap();
        assert_relative_eq!(f, DVector::zeros(4), epsilon = 1e-15);
    }

    #[test]
    fn singular_tether_length_rejected() {
        let model = tsr_model();
        let x = DVector::from_vec(vec![0.0, -1.0, 0.0, 0.0]);
        assert!(matches!(model.f(&x), Err(Error::DomainViolation(_))));
        assert!(model.df_dx(&x).is_err());
    }

    #[test]
    fn disturbance_samples() {
        let field = tsr_disturbance();
        let zero = DVector::zeros(4);
        assert_relative_eq!(
            field.h(0.0, &zero),
            DVector::from_vec(vec![0.3, 0.2]),
            epsilon = 1e-15
        );
        assert_relative_eq!(
            field.h(std::f64::consts::FRAC_PI_2, &zero),
            DVector::from_vec(vec![0.0, 0.2]),
            epsilon = 1e-15
        );
        let x = DVector::from_vec(vec![0.0, -0.5, 0.0, 0.0]);
        // 0.3 * (1 + sin(-0.5)), evaluated independently
        let expected = 0.3 * (1.0 + (-0.5f64).sin());
        let h = field.h(0.0, &x);
        assert_relative_eq!(h[0], expected, epsilon = 1e-15);
        assert_relative_eq!(h[0], 0.15617233841873912, epsilon = 1e-12);
        assert_relative_eq!(h[1], 0.2, epsilon = 1e-15);
    }

    #[test]
    fn input_matrix_shape() {
        let model = tsr_model();
        let b = model.b(&DVector::zeros(4));
        assert_eq!(b.shape(), (4, 2));
        assert_eq!(b[(2, 0)], 1.0);
        assert_eq!(b[(3, 1)], 1.0);
    }
}
