//! Control-affine benchmark plants, their disturbance fields, analytic
//! Jacobians, and a fixed-step RK4 integrator.
//!
//! Dynamics have the form `x' = f(x) + B(x)(u + h(t, x))` with known `f`
//! and `B` and an unknown (to the controller) disturbance `h` bounded by a
//! declared constant. All operations here are pure functions of their
//! inputs.

mod linear;
mod pvtol;
mod tsr;

pub use linear::{linear_test_disturbance, linear_test_model};
pub use pvtol::{pvtol_disturbance, pvtol_model, PVTOL_ARM, PVTOL_GRAVITY, PVTOL_INERTIA, PVTOL_MASS};
pub use tsr::{tsr_disturbance, tsr_model};

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box used as a sampling domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl AxisBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        assert!(lo.iter().zip(&hi).all(|(a, b)| a <= b), "lo must be <= hi");
        AxisBox { lo, hi }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.dim()
            && x.iter()
                .enumerate()
                .all(|(i, v)| *v >= self.lo[i] && *v <= self.hi[i])
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| {
            if self.lo[i] == self.hi[i] {
                self.lo[i]
            } else {
                rng.gen_range(self.lo[i]..self.hi[i])
            }
        })
    }

    pub fn center(&self) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| 0.5 * (self.lo[i] + self.hi[i]))
    }
}

type DriftFn = dyn Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync;
type MatrixFn = dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync;
type FallibleMatrixFn = dyn Fn(&DVector<f64>) -> Result<DMatrix<f64>> + Send + Sync;
type ColJacobianFn = dyn Fn(&DVector<f64>, usize) -> DMatrix<f64> + Send + Sync;

/// Control-affine plant `x' = f(x) + B(x) u` with analytic Jacobians and
/// sampling domains.
#[derive(Clone)]
pub struct ControlAffineModel {
    pub id: String,
    pub n: usize,
    pub m: usize,
    drift: Arc<DriftFn>,
    input_matrix: Arc<MatrixFn>,
    drift_jacobian: Arc<FallibleMatrixFn>,
    input_col_jacobian: Arc<ColJacobianFn>,
    /// True when `B` does not depend on the state.
    pub constant_b: bool,
    pub state_box: AxisBox,
    pub control_box: AxisBox,
}

impl std::fmt::Debug for ControlAffineModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControlAffineModel")
            .field("id", &self.id)
            .field("n", &self.n)
            .field("m", &self.m)
            .field("constant_b", &self.constant_b)
            .finish()
    }
}

impl ControlAffineModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: &str,
        n: usize,
        m: usize,
        drift: Arc<DriftFn>,
        input_matrix: Arc<MatrixFn>,
        drift_jacobian: Arc<FallibleMatrixFn>,
        input_col_jacobian: Arc<ColJacobianFn>,
        constant_b: bool,
        state_box: AxisBox,
        control_box: AxisBox,
    ) -> Self {
        assert_eq!(state_box.dim(), n);
        assert_eq!(control_box.dim(), m);
        ControlAffineModel {
            id: id.to_string(),
            n,
            m,
            drift,
            input_matrix,
            drift_jacobian,
            input_col_jacobian,
            constant_b,
            state_box,
            control_box,
        }
    }

    /// Convenience constructor for plants with a state-independent `B`.
    pub fn with_constant_b(
        id: &str,
        drift: Arc<DriftFn>,
        drift_jacobian: Arc<FallibleMatrixFn>,
        b: DMatrix<f64>,
        state_box: AxisBox,
        control_box: AxisBox,
    ) -> Self {
        let n = b.nrows();
        let m = b.ncols();
        let zero = DMatrix::zeros(n, n);
        Self::new(
            id,
            n,
            m,
            drift,
            Arc::new(move |_x| b.clone()),
            drift_jacobian,
            Arc::new(move |_x, _i| zero.clone()),
            true,
            state_box,
            control_box,
        )
    }

    pub fn f(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        (self.drift)(x)
    }

    pub fn b(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.input_matrix)(x)
    }

    pub fn df_dx(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        (self.drift_jacobian)(x)
    }

    /// Jacobian of the i-th column of `B`.
    pub fn db_dx(&self, x: &DVector<f64>, i: usize) -> DMatrix<f64> {
        (self.input_col_jacobian)(x, i)
    }

    /// Orthonormal null-space basis of `B^T`, so that `B_perp^T B = 0`.
    /// Computed once for constant-B models via full QR of `B`.
    pub fn b_perp(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let b = self.b(x);
        b_nullspace_basis(&b)
    }
}

/// Columns spanning the orthogonal complement of the column space of `b`.
pub fn b_nullspace_basis(b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = b.nrows();
    let m = b.ncols();
    let qr = b.clone().qr();
    let r = qr.r();
    for i in 0..m {
        assert!(
            r[(i, i)].abs() > 1e-10,
            "input matrix lost column rank; cannot form null-space basis"
        );
    }
    // complete Q to an orthonormal basis of R^n by Gram-Schmidt against
    // the m columns of Q
    let q = qr.q();
    let basis: Vec<DVector<f64>> = (0..m).map(|j| q.column(j).into_owned()).collect();
    let mut extra: Vec<DVector<f64>> = Vec::new();
    for k in 0..n {
        if extra.len() == n - m {
            break;
        }
        let mut v = DVector::zeros(n);
        v[k] = 1.0;
        for b in basis.iter().chain(extra.iter()) {
            let proj = b.dot(&v);
            v -= b * proj;
        }
        let norm = v.norm();
        if norm > 1e-8 {
            extra.push(v / norm);
        }
    }
    assert_eq!(extra.len(), n - m, "failed to complete null-space basis");
    let mut out = DMatrix::zeros(n, n - m);
    for (j, v) in extra.iter().enumerate() {
        out.column_mut(j).copy_from(v);
    }
    out
}

/// Matched disturbance `h(t, x)` entering through the input channel, with a
/// declared componentwise bound.
#[derive(Clone)]
pub struct DisturbanceField {
    eval: Arc<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>,
    /// Componentwise sup bound over the operating domain.
    pub upper_bound: f64,
}

impl DisturbanceField {
    pub fn new(
        eval: Arc<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>,
        upper_bound: f64,
    ) -> Self {
        assert!(upper_bound >= 0.0);
        DisturbanceField { eval, upper_bound }
    }

    pub fn zero(m: usize) -> Self {
        DisturbanceField::new(Arc::new(move |_t, _x| DVector::zeros(m)), 0.0)
    }

    pub fn h(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        (self.eval)(t, x)
    }
}

/// `A(x, u) = df/dx + sum_i u_i db_i/dx`, the state Jacobian of the
/// closed-form drift under a fixed input. Reuses the analytic `df_dx` code
/// path exactly when `B` is constant.
pub fn jacobian_a(
    model: &ControlAffineModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let mut a = model.df_dx(x)?;
    if !model.constant_b {
        for i in 0..model.m {
            a += model.db_dx(x, i) * u[i];
        }
    }
    Ok(a)
}

/// One classical RK4 step of `x' = f(x) + B(x)(u + h(t, x))` with the
/// control held constant over the step. Without a disturbance the nominal
/// dynamics are integrated.
pub fn rk4_step(
    model: &ControlAffineModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    t: f64,
    dt: f64,
    disturbance: Option<&DisturbanceField>,
) -> Result<DVector<f64>> {
    if dt <= 0.0 {
        return Err(Error::InvalidConfig(format!("dt must be positive, got {dt}")));
    }
    let deriv = |ti: f64, xi: &DVector<f64>| -> Result<DVector<f64>> {
        let mut w = u.clone();
        if let Some(d) = disturbance {
            w += d.h(ti, xi);
        }
        Ok(model.f(xi)? + model.b(xi) * w)
    };
    let k1 = deriv(t, x)?;
    let k2 = deriv(t + 0.5 * dt, &(x + &k1 * (0.5 * dt)))?;
    let k3 = deriv(t + 0.5 * dt, &(x + &k2 * (0.5 * dt)))?;
    let k4 = deriv(t + dt, &(x + &k3 * dt))?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

/// Look up a benchmark model and its true disturbance by string id.
pub fn model_by_id(id: &str) -> Result<(ControlAffineModel, DisturbanceField)> {
    match id {
        "tsr" => Ok((tsr_model(), tsr_disturbance())),
        "pvtol" => Ok((pvtol_model(), pvtol_disturbance())),
        "linear-test" => Ok((linear_test_model(), linear_test_disturbance())),
        other => Err(Error::InvalidConfig(format!(
            "unknown model id '{other}' (expected tsr, pvtol, or linear-test)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numdiff::{central_jacobian, max_relative_error};
    use approx::assert_relative_eq;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Scalar plant x' = a x + u on [-2, 2].
    pub(crate) fn scalar_plant(a: f64) -> ControlAffineModel {
        ControlAffineModel::with_constant_b(
            "scalar",
            Arc::new(move |x: &DVector<f64>| Ok(DVector::from_vec(vec![a * x[0]]))),
            Arc::new(move |_x| Ok(DMatrix::from_element(1, 1, a))),
            DMatrix::from_element(1, 1, 1.0),
            AxisBox::new(vec![-10.0], vec![10.0]),
            AxisBox::new(vec![-10.0], vec![10.0]),
        )
    }

    #[test]
    fn rk4_fixed_point() {
        let plant = scalar_plant(0.0);
        let x = DVector::from_vec(vec![1.5]);
        let u = DVector::zeros(1);
        let x1 = rk4_step(&plant, &x, &u, 0.0, 0.1, None).unwrap();
        assert_eq!(x1, x);
    }

    #[test]
    fn rk4_matches_exponential() {
        let plant = scalar_plant(1.0);
        let x = DVector::from_vec(vec![1.0]);
        let u = DVector::zeros(1);
        let x1 = rk4_step(&plant, &x, &u, 0.0, 0.1, None).unwrap();
        // truncated Taylor series of e^{0.1}
        assert_relative_eq!(x1[0], 1.1051708333333333, epsilon = 1e-15);
        assert!((x1[0] - (0.1f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn rk4_is_fourth_order() {
        // global error at t=1 for x' = x, halving dt four times
        let plant = scalar_plant(1.0);
        let u = DVector::zeros(1);
        let mut errors = Vec::new();
        let mut dts = Vec::new();
        for k in 0..4 {
            let dt = 0.1 / 2f64.powi(k);
            let steps = (1.0 / dt).round() as usize;
            let mut x = DVector::from_vec(vec![1.0]);
            for i in 0..steps {
                x = rk4_step(&plant, &x, &u, i as f64 * dt, dt, None).unwrap();
            }
            errors.push((x[0] - 1f64.exp()).abs());
            dts.push(dt);
        }
        // least-squares slope in log-log space
        let lx: Vec<f64> = dts.iter().map(|d| d.ln()).collect();
        let ly: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
        let mx = lx.iter().sum::<f64>() / lx.len() as f64;
        let my = ly.iter().sum::<f64>() / ly.len() as f64;
        let slope = lx
            .iter()
            .zip(&ly)
            .map(|(a, b)| (a - mx) * (b - my))
            .sum::<f64>()
            / lx.iter().map(|a| (a - mx) * (a - mx)).sum::<f64>();
        assert!((3.7..=4.3).contains(&slope), "slope = {slope}");
    }

    #[test]
    fn rk4_rejects_nonpositive_dt() {
        let plant = scalar_plant(1.0);
        let x = DVector::zeros(1);
        let u = DVector::zeros(1);
        assert!(rk4_step(&plant, &x, &u, 0.0, 0.0, None).is_err());
    }

    #[test]
    fn jacobian_a_equals_df_dx_for_constant_b() {
        let (model, _) = model_by_id("tsr").unwrap();
        let x = DVector::from_vec(vec![0.1, -0.2, 0.0, 0.0]);
        let u = DVector::from_vec(vec![0.5, -0.5]);
        let a = jacobian_a(&model, &x, &u).unwrap();
        let j = model.df_dx(&x).unwrap();
        // same code path, so bitwise equal
        for (p, q) in a.iter().zip(j.iter()) {
            assert_eq!(p.to_bits(), q.to_bits());
        }
    }

    #[test]
    fn jacobian_a_is_lambda_for_linear_plant() {
        let (model, _) = model_by_id("linear-test").unwrap();
        let x = DVector::from_vec(vec![0.7, -0.4]);
        let u = DVector::from_vec(vec![0.3]);
        let a = jacobian_a(&model, &x, &u).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -1.0]);
        assert_relative_eq!(a, expected, epsilon = 1e-14);
    }

    #[test]
    fn analytic_jacobians_match_finite_differences() {
        for id in ["tsr", "pvtol", "linear-test"] {
            let (model, _) = model_by_id(id).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            for _ in 0..100 {
                let x = model.state_box.sample(&mut rng);
                let analytic = model.df_dx(&x).unwrap();
                let numeric =
                    central_jacobian(|xx| model.f(xx).expect("in-domain"), &x, 1e-6);
                let err = max_relative_error(&analytic, &numeric, 1e-7);
                assert!(err < 1e-5, "{id}: jacobian mismatch {err} at x = {x}");
            }
        }
    }

    #[test]
    fn disturbances_respect_declared_bounds() {
        for id in ["tsr", "pvtol", "linear-test"] {
            let (model, field) = model_by_id(id).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut worst: f64 = 0.0;
            for _ in 0..10_000 {
                let t: f64 = rng.gen_range(0.0..50.0);
                let x = model.state_box.sample(&mut rng);
                let h = field.h(t, &x);
                worst = worst.max(h.amax());
            }
            assert!(
                worst <= field.upper_bound,
                "{id}: sampled sup {worst} exceeds bound {}",
                field.upper_bound
            );
        }
    }

    #[test]
    fn b_perp_annihilates_b() {
        for id in ["tsr", "pvtol", "linear-test"] {
            let (model, _) = model_by_id(id).unwrap();
            let x = model.state_box.center();
            let b = model.b(&x);
            let bp = model.b_perp(&x);
            assert_eq!(bp.shape(), (model.n, model.n - model.m));
            let prod = bp.transpose() * b;
            assert!(prod.amax() < 1e-12, "{id}: B_perp^T B = {prod}");
            // orthonormal columns
            let gram = bp.transpose() * &bp;
            assert_relative_eq!(
                gram,
                DMatrix::identity(model.n - model.m, model.n - model.m),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn unknown_model_id_rejected() {
        assert!(model_by_id("segway").is_err());
    }
}
