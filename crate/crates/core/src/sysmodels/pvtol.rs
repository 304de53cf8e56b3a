//! Planar vertical take-off and landing vehicle.
//!
//! States: `p_x, p_z` inertial position, `phi` roll angle, `v_x, v_z`
//! body-frame velocities, `phi_dot` roll rate. Controls are the two rotor
//! thrusts, entering through a constant sparse input matrix whose bottom
//! 2x2 block is invertible.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{AxisBox, ControlAffineModel, DisturbanceField};
use crate::error::Result;

pub const PVTOL_MASS: f64 = 0.486;
pub const PVTOL_INERTIA: f64 = 0.00383;
pub const PVTOL_ARM: f64 = 0.25;
pub const PVTOL_GRAVITY: f64 = 9.81;

/// Six-state, two-input planar VTOL with body-frame velocities.
pub fn pvtol_model() -> ControlAffineModel {
    let g = PVTOL_GRAVITY;
    let drift = Arc::new(move |x: &DVector<f64>| -> Result<DVector<f64>> {
        let (phi, vx, vz, phidot) = (x[2], x[3], x[4], x[5]);
        Ok(DVector::from_vec(vec![
            vx * phi.cos() - vz * phi.sin(),
            vx * phi.sin() + vz * phi.cos(),
            phidot,
            vz * phidot - g * phi.sin(),
            -vx * phidot - g * phi.cos(),
            0.0,
        ]))
    });
    let jac = Arc::new(move |x: &DVector<f64>| -> Result<DMatrix<f64>> {
        let (phi, vx, vz, phidot) = (x[2], x[3], x[4], x[5]);
        let mut j = DMatrix::zeros(6, 6);
        j[(0, 2)] = -vx * phi.sin() - vz * phi.cos();
        j[(0, 3)] = phi.cos();
        j[(0, 4)] = -phi.sin();
        j[(1, 2)] = vx * phi.cos() - vz * phi.sin();
        j[(1, 3)] = phi.sin();
        j[(1, 4)] = phi.cos();
        j[(2, 5)] = 1.0;
        j[(3, 2)] = -g * phi.cos();
        j[(3, 4)] = phidot;
        j[(3, 5)] = vz;
        j[(4, 2)] = g * phi.sin();
        j[(4, 3)] = -phidot;
        j[(4, 5)] = -vx;
        Ok(j)
    });
    let mut b = DMatrix::zeros(6, 2);
    b[(4, 0)] = 1.0 / PVTOL_MASS;
    b[(4, 1)] = 1.0 / PVTOL_MASS;
    b[(5, 0)] = PVTOL_ARM / PVTOL_INERTIA;
    b[(5, 1)] = -PVTOL_ARM / PVTOL_INERTIA;
    let phi_max = std::f64::consts::FRAC_PI_3;
    let thrust_max = 2.0 * PVTOL_MASS * PVTOL_GRAVITY;
    ControlAffineModel::with_constant_b(
        "pvtol",
        drift,
        jac,
        b,
        AxisBox::new(
            vec![-5.0, -5.0, -phi_max, -2.0, -2.0, -1.0],
            vec![5.0, 5.0, phi_max, 2.0, 2.0, 1.0],
        ),
        AxisBox::new(vec![0.0, 0.0], vec![thrust_max, thrust_max]),
    )
}

/// True external disturbance acting on the PVTOL thrust channels.
pub fn pvtol_disturbance() -> DisturbanceField {
    DisturbanceField::new(
        Arc::new(|t: f64, x: &DVector<f64>| {
            DVector::from_vec(vec![
                4.0 * (t.cos() + x[1].sin() + x[3].cos()),
                2.0 * (x[0].sin() + x[4].cos()),
            ])
        }),
        12.0,
    )
}
