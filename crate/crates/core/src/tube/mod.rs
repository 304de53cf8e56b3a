//! Robust-control-invariant tubes: overshoot constant, nominal and refined
//! radii, ellipsoid membership, and box-constraint tightening.
//!
//! The tube is the ellipsoid `{x : (x - x*)^T M_floor (x - x*) <= c^2}`
//! around the reference, where the radius scales the worst-case gain of
//! the disturbance channel under the metric factor against the contraction
//! rate. Suprema over the state box are estimated by sampling and inflated
//! by a fixed safety factor.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ccm::{FeedbackLaw, MetricNet, TrackingController};
use crate::error::{Error, Result};
use crate::sysmodels::{AxisBox, ControlAffineModel};

/// Safety inflation applied to sampled suprema.
pub const SUP_INFLATION: f64 = 1.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    /// Radius from the declared disturbance bound.
    Nominal,
    /// Radius from a measured estimation-error bound.
    Refined,
}

/// Ellipsoidal invariant-tube description.
#[derive(Debug, Clone)]
pub struct TubeEstimate {
    /// Overshoot constant, at least one.
    pub overshoot: f64,
    /// Tube radius in the floor-metric norm.
    pub radius: f64,
    /// Uniform lower bound of the metric (a scaled identity).
    pub metric_floor: DMatrix<f64>,
    pub provenance: Provenance,
    /// Sample count behind the supremum estimate.
    pub samples: usize,
    /// Disturbance (or estimation-error) bound the radius was built from.
    pub bound_used: f64,
}

impl TubeEstimate {
    pub fn new(
        overshoot: f64,
        radius: f64,
        alpha_lo_emp: f64,
        n: usize,
        provenance: Provenance,
        samples: usize,
        bound_used: f64,
    ) -> Self {
        assert!(overshoot >= 1.0);
        assert!(radius >= 0.0);
        assert!(alpha_lo_emp > 0.0);
        TubeEstimate {
            overshoot,
            radius,
            metric_floor: DMatrix::identity(n, n) * alpha_lo_emp,
            provenance,
            samples,
            bound_used,
        }
    }
}

/// State and control boxes handed to a planner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintBox {
    pub state: AxisBox,
    pub control: AxisBox,
}

/// Overshoot constant `sqrt(alpha_hi / alpha_lo)`.
pub fn overshoot(alpha_lo_emp: f64, alpha_hi_emp: f64) -> Result<f64> {
    if !(alpha_lo_emp > 0.0 && alpha_lo_emp <= alpha_hi_emp) {
        return Err(Error::BoundOrdering {
            lo: alpha_lo_emp,
            hi: alpha_hi_emp,
        });
    }
    Ok((alpha_hi_emp / alpha_lo_emp).sqrt())
}

/// Principal symmetric square root via eigendecomposition.
pub fn metric_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let mut scaled = eig.eigenvectors.clone();
    for j in 0..scaled.ncols() {
        let root = eig.eigenvalues[j].max(0.0).sqrt();
        scaled.column_mut(j).scale_mut(root);
    }
    scaled * eig.eigenvectors.transpose()
}

fn max_singular_value(a: &DMatrix<f64>) -> f64 {
    a.clone().svd(false, false).singular_values.max()
}

/// Sampled supremum of `sigma_max(Theta(x) B(x))` (or `sigma_max(Theta(x))`
/// when `include_input_matrix` is false) over the state box plus any
/// visited states, inflated by the safety factor.
fn sampled_gain_sup<R: Rng>(
    model: &ControlAffineModel,
    metric: &MetricNet,
    include_input_matrix: bool,
    n_samples: usize,
    rng: &mut R,
    visited: &[DVector<f64>],
) -> Result<f64> {
    let mut sup: f64 = 0.0;
    let eval = |x: &DVector<f64>| -> Result<f64> {
        let m = metric.metric_eval(x)?;
        let theta = metric_factor(&m);
        let val = if include_input_matrix {
            max_singular_value(&(&theta * model.b(x)))
        } else {
            max_singular_value(&theta)
        };
        Ok(val)
    };
    for _ in 0..n_samples {
        let x = model.state_box.sample(rng);
        sup = sup.max(eval(&x)?);
    }
    for x in visited {
        sup = sup.max(eval(x)?);
    }
    Ok(sup * SUP_INFLATION)
}

/// Nominal tube radius: inflated supremum of the factored disturbance gain
/// times the disturbance bound over the contraction rate.
pub fn tube_radius<R: Rng>(
    model: &ControlAffineModel,
    metric: &MetricNet,
    lambda: f64,
    h_bound: f64,
    n_samples: usize,
    rng: &mut R,
    visited: &[DVector<f64>],
) -> Result<f64> {
    if lambda <= 0.0 {
        return Err(Error::InvalidConfig("contraction rate must be positive".into()));
    }
    if h_bound < 0.0 {
        return Err(Error::InvalidConfig("disturbance bound must be nonnegative".into()));
    }
    let sup = sampled_gain_sup(model, metric, true, n_samples, rng, visited)?;
    Ok(sup * h_bound / lambda)
}

/// Refined radius from a measured estimation-error bound. The factored
/// gain omits the input matrix as printed in the refinement statement;
/// `include_input_matrix` restores the nominal form for comparison.
#[allow(clippy::too_many_arguments)]
pub fn refined_tube_radius<R: Rng>(
    model: &ControlAffineModel,
    metric: &MetricNet,
    lambda: f64,
    estimation_error_bound: f64,
    n_samples: usize,
    rng: &mut R,
    visited: &[DVector<f64>],
    include_input_matrix: bool,
) -> Result<f64> {
    if lambda <= 0.0 {
        return Err(Error::InvalidConfig("contraction rate must be positive".into()));
    }
    if estimation_error_bound < 0.0 {
        return Err(Error::InvalidConfig(
            "estimation error bound must be nonnegative".into(),
        ));
    }
    let sup = sampled_gain_sup(model, metric, include_input_matrix, n_samples, rng, visited)?;
    Ok(sup * estimation_error_bound / lambda)
}

/// Ellipsoid membership test in the floor metric.
pub fn rci_contains(tube: &TubeEstimate, x: &DVector<f64>, x_ref: &DVector<f64>) -> bool {
    let d = x - x_ref;
    let q = (&tube.metric_floor * &d).dot(&d);
    q <= tube.radius * tube.radius
}

/// Shrink state and control boxes by the tube extent.
///
/// States lose the per-axis extent of the floor-metric ellipsoid of radius
/// `c`. Controls lose the sampled maximum feedback magnitude over the tube
/// around tightened references. An empty result on any axis is reported as
/// infeasible.
pub fn tighten_constraints<R: Rng>(
    bounds: &ConstraintBox,
    tube: &TubeEstimate,
    ctrl: &TrackingController,
    n_samples: usize,
    rng: &mut R,
) -> Result<ConstraintBox> {
    let n = bounds.state.dim();
    let floor_inv = tube
        .metric_floor
        .clone()
        .try_inverse()
        .expect("metric floor is positive definite");
    let mut state_lo = Vec::with_capacity(n);
    let mut state_hi = Vec::with_capacity(n);
    for i in 0..n {
        let margin = tube.radius * floor_inv[(i, i)].sqrt();
        let lo = bounds.state.lo[i] + margin;
        let hi = bounds.state.hi[i] - margin;
        if lo > hi {
            return Err(Error::InfeasibleBox { axis: i });
        }
        state_lo.push(lo);
        state_hi.push(hi);
    }
    let tightened_state = AxisBox::new(state_lo, state_hi);

    // ellipsoid axis scaling: unit ball mapped through radius * floor^{-1/2}
    let floor_root_inv = metric_factor(&floor_inv);
    let m = bounds.control.dim();
    let mut worst_feedback: f64 = 0.0;
    if tube.radius > 0.0 {
        for _ in 0..n_samples {
            let x_ref = tightened_state.sample(rng);
            // uniform direction, radius biased toward the shell
            let mut z = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let norm = z.norm();
            if norm < 1e-12 {
                continue;
            }
            let r: f64 = rng.gen_range(0.0f64..1.0).powf(1.0 / n as f64);
            z *= tube.radius * r / norm;
            let x = &x_ref + &floor_root_inv * z;
            let u_fb = ctrl.control(&x, &x_ref, &DVector::zeros(m));
            worst_feedback = worst_feedback.max(u_fb.amax());
        }
        worst_feedback *= SUP_INFLATION;
    }
    let mut ctrl_lo = Vec::with_capacity(m);
    let mut ctrl_hi = Vec::with_capacity(m);
    for i in 0..m {
        let lo = bounds.control.lo[i] + worst_feedback;
        let hi = bounds.control.hi[i] - worst_feedback;
        if lo > hi {
            return Err(Error::InfeasibleBox { axis: i });
        }
        ctrl_lo.push(lo);
        ctrl_hi.push(hi);
    }
    Ok(ConstraintBox {
        state: tightened_state,
        control: AxisBox::new(ctrl_lo, ctrl_hi),
    })
}

/// JSON document emitted by the tube tooling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TubeReport {
    pub provenance: Provenance,
    #[serde(rename = "R")]
    pub overshoot: f64,
    pub c_bar: f64,
    pub alpha_lo: f64,
    pub alpha_hi: f64,
    pub lambda: f64,
    pub bound_used: f64,
    pub samples: usize,
    pub tightened_state_box: Option<AxisBox>,
    pub tightened_control_box: Option<AxisBox>,
}
