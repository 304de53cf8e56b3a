//! Virtual-dynamics rollouts and the moving-horizon update.
//!
//! The virtual copy of the plant replays recorded controls with the current
//! disturbance estimate added, anchored at the recorded state at the window
//! start. The whole rollout is recorded on a tape: plant drift and input
//! terms enter through custom nodes backed by the analytic Jacobians, so
//! gradients of the window discrepancy w.r.t. the estimator parameters are
//! exact through every integration stage.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{DisturbanceNet, MemoryBuffer, OnlineConfig};
use crate::diffnet::{concat_rows, AdamState, CustomOp, StagedNet, Tape, Var};
use crate::error::{Error, Result};
use crate::sysmodels::{rk4_step, ControlAffineModel};

struct DriftOp {
    model: ControlAffineModel,
}

impl CustomOp for DriftOp {
    fn backward(&self, inputs: &[DMatrix<f64>], upstream: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let x = DVector::from_column_slice(inputs[0].as_slice());
        let jac = self
            .model
            .df_dx(&x)
            .expect("drift Jacobian must exist where the drift was evaluated");
        vec![jac.transpose() * upstream]
    }
}

struct InputMulOp {
    model: ControlAffineModel,
}

impl CustomOp for InputMulOp {
    fn backward(&self, inputs: &[DMatrix<f64>], upstream: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let x = DVector::from_column_slice(inputs[0].as_slice());
        let w = DVector::from_column_slice(inputs[1].as_slice());
        let b = self.model.b(&x);
        let mut dx = DMatrix::zeros(x.len(), x.len());
        for i in 0..self.model.m {
            dx += self.model.db_dx(&x, i) * w[i];
        }
        vec![dx.transpose() * upstream, b.transpose() * upstream]
    }
}

/// One taped derivative evaluation of the virtual dynamics
/// `f(xi) + B(xi)(u + H(t, xi))`.
fn taped_deriv<'t>(
    tape: &'t Tape,
    model: &ControlAffineModel,
    h_staged: &StagedNet<'t>,
    time_scale: f64,
    xi: Var<'t>,
    u_c: Var<'t>,
    t: f64,
    b_const: Option<Var<'t>>,
) -> Result<Var<'t>> {
    let x_val = DVector::from_column_slice(xi.value().as_slice());
    let f_val = model.f(&x_val)?;
    let f_var = tape.custom(
        &[xi],
        DMatrix::from_column_slice(f_val.len(), 1, f_val.as_slice()),
        Arc::new(DriftOp {
            model: model.clone(),
        }),
    );
    let t_c = tape.scalar(t * time_scale);
    let h_var = h_staged.forward(concat_rows(tape, &[t_c, xi]));
    let w = u_c + h_var;
    let bw = match b_const {
        Some(b) => b.matmul(w),
        None => {
            let b_val = model.b(&x_val);
            let w_val = DVector::from_column_slice(w.value().as_slice());
            tape.custom(
                &[xi, w],
                DMatrix::from_column_slice(model.n, 1, (b_val * w_val).as_slice()),
                Arc::new(InputMulOp {
                    model: model.clone(),
                }),
            )
        }
    };
    Ok(f_var + bw)
}

/// One taped RK4 step of the virtual dynamics with zero-order-hold control.
fn taped_rk4_step<'t>(
    tape: &'t Tape,
    model: &ControlAffineModel,
    h_staged: &StagedNet<'t>,
    time_scale: f64,
    xi: Var<'t>,
    u_c: Var<'t>,
    t: f64,
    dt: f64,
    b_const: Option<Var<'t>>,
) -> Result<Var<'t>> {
    let k1 = taped_deriv(tape, model, h_staged, time_scale, xi, u_c, t, b_const)?;
    let x2 = xi + k1.scale(0.5 * dt);
    let k2 = taped_deriv(tape, model, h_staged, time_scale, x2, u_c, t + 0.5 * dt, b_const)?;
    let x3 = xi + k2.scale(0.5 * dt);
    let k3 = taped_deriv(tape, model, h_staged, time_scale, x3, u_c, t + 0.5 * dt, b_const)?;
    let x4 = xi + k3.scale(dt);
    let k4 = taped_deriv(tape, model, h_staged, time_scale, x4, u_c, t + dt, b_const)?;
    Ok(xi + (k1 + k2.scale(2.0) + k3.scale(2.0) + k4).scale(dt / 6.0))
}

/// Integrate the virtual dynamics from `anchor` under the recorded
/// `(time, control)` sequence. Returns the state at the anchor followed by
/// one state per applied control.
pub fn virtual_rollout(
    model: &ControlAffineModel,
    anchor: &DVector<f64>,
    controls: &[(f64, DVector<f64>)],
    dt: f64,
    h_net: &DisturbanceNet,
) -> Result<Vec<DVector<f64>>> {
    virtual_rollout_with_field(model, anchor, controls, dt, &h_net.as_field())
}

/// Rollout driven by an arbitrary estimate expressed as a disturbance
/// field. Test rigs use this to inject the true disturbance directly.
pub fn virtual_rollout_with_field(
    model: &ControlAffineModel,
    anchor: &DVector<f64>,
    controls: &[(f64, DVector<f64>)],
    dt: f64,
    field: &crate::sysmodels::DisturbanceField,
) -> Result<Vec<DVector<f64>>> {
    if controls.is_empty() {
        return Err(Error::InvalidConfig(
            "virtual rollout needs at least one recorded control".into(),
        ));
    }
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(anchor.clone());
    let mut x = anchor.clone();
    for (i, (t, u)) in controls.iter().enumerate() {
        x = rk4_step(model, &x, u, *t, dt, Some(field)).map_err(|e| Error::Rollout {
            step: i,
            source: Box::new(e),
        })?;
        states.push(x.clone());
    }
    Ok(states)
}

/// Sum of squared gaps between the re-rolled virtual window and the
/// recorded actual window.
pub fn window_loss(
    buffer: &MemoryBuffer,
    model: &ControlAffineModel,
    h_net: &DisturbanceNet,
    dt: f64,
) -> Result<f64> {
    if !buffer.is_full() {
        return Err(Error::BufferNotFull {
            len: buffer.len(),
            capacity: buffer.capacity(),
        });
    }
    let anchor = &buffer.get(0).1;
    let controls: Vec<(f64, DVector<f64>)> = buffer
        .iter()
        .take(buffer.len() - 1)
        .map(|(t, _, u)| (*t, u.clone()))
        .collect();
    let states = virtual_rollout(model, anchor, &controls, dt, h_net)?;
    let mut loss = 0.0;
    for (i, xi) in states.iter().enumerate() {
        let gap = xi - &buffer.get(i).1;
        loss += gap.norm_squared();
    }
    Ok(loss)
}

/// Taped window loss and its gradient w.r.t. the estimator parameters.
fn window_loss_and_grad(
    buffer: &MemoryBuffer,
    model: &ControlAffineModel,
    h_net: &DisturbanceNet,
    dt: f64,
) -> Result<(f64, DVector<f64>)> {
    let tape = Tape::new();
    let staged = h_net.net().stage(&tape);
    let b_const = if model.constant_b {
        Some(tape.constant(model.b(&buffer.get(0).1)))
    } else {
        None
    };
    let mut xi = tape.constant_vec(&buffer.get(0).1);
    let mut loss: Option<Var<'_>> = None;
    for i in 0..buffer.len() - 1 {
        let (t_i, _, u_i) = buffer.get(i);
        let u_c = tape.constant_vec(u_i);
        xi = taped_rk4_step(
            &tape,
            model,
            &staged,
            h_net.time_scale,
            xi,
            u_c,
            *t_i,
            dt,
            b_const,
        )
        .map_err(|e| Error::Rollout {
            step: i,
            source: Box::new(e),
        })?;
        let target = tape.constant_vec(&buffer.get(i + 1).1);
        let gap = xi - target;
        let term = gap.dot(gap);
        loss = Some(match loss {
            None => term,
            Some(acc) => acc + term,
        });
    }
    let loss = loss.expect("buffer capacity is at least 2");
    let value = loss.scalar_value();
    let grads = tape.backward(loss)?;
    Ok((value, staged.grad_flat(&grads)))
}

/// Outcome of one moving-horizon update.
#[derive(Debug, Clone)]
pub struct UpdateReport {
    pub loss_before: f64,
    pub loss_after: f64,
    /// False when a non-finite loss or gradient forced the update to be
    /// discarded (previous parameters kept).
    pub applied: bool,
}

/// Run `config.epochs` Adam steps on the window loss. A non-finite loss or
/// gradient aborts the update and restores the previous parameters, so the
/// controller never consumes a corrupted estimate.
pub fn update_disturbance(
    h_net: &mut DisturbanceNet,
    buffer: &MemoryBuffer,
    model: &ControlAffineModel,
    config: &OnlineConfig,
    adam: &mut AdamState,
) -> Result<UpdateReport> {
    if !buffer.is_full() {
        return Err(Error::BufferNotFull {
            len: buffer.len(),
            capacity: buffer.capacity(),
        });
    }
    let snapshot = h_net.net().flatten();
    let adam_snapshot = adam.clone();
    let mut params = snapshot.clone();
    let mut loss_before = f64::NAN;
    let mut ok = true;
    for epoch in 0..config.epochs {
        match window_loss_and_grad(buffer, model, h_net, config.control_interval) {
            Ok((loss, grad)) => {
                if epoch == 0 {
                    loss_before = loss;
                }
                if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    ok = false;
                    break;
                }
                adam.update(&mut params, &grad)?;
                h_net.net_mut().unflatten(&params)?;
            }
            Err(e @ Error::Rollout { .. }) => return Err(e),
            Err(e) => return Err(e),
        }
    }
    if !ok {
        h_net.net_mut().unflatten(&snapshot)?;
        *adam = adam_snapshot;
        return Ok(UpdateReport {
            loss_before,
            loss_after: loss_before,
            applied: false,
        });
    }
    let loss_after = window_loss(buffer, model, h_net, config.control_interval)?;
    Ok(UpdateReport {
        loss_before,
        loss_after,
        applied: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sysmodels::{model_by_id, AxisBox, DisturbanceField};
    use approx::assert_relative_eq;

    fn scalar_plant() -> ControlAffineModel {
        ControlAffineModel::with_constant_b(
            "scalar",
            Arc::new(|x: &DVector<f64>| Ok(DVector::from_vec(vec![-x[0]]))),
            Arc::new(|_x| Ok(DMatrix::from_element(1, 1, -1.0))),
            DMatrix::from_element(1, 1, 1.0),
            AxisBox::new(vec![-10.0], vec![10.0]),
            AxisBox::new(vec![-10.0], vec![10.0]),
        )
    }

    /// Record a window of the true closed-loop motion under `field`.
    fn record_window(
        model: &ControlAffineModel,
        field: &DisturbanceField,
        x0: DVector<f64>,
        n: usize,
        dt: f64,
    ) -> MemoryBuffer {
        let mut buf = MemoryBuffer::new(n);
        let mut x = x0;
        for k in 0..n {
            let t = k as f64 * dt;
            let u = DVector::from_element(model.m, 0.1);
            buf.push(t, x.clone(), u.clone()).unwrap();
            x = rk4_step(model, &x, &u, t, dt, Some(field)).unwrap();
        }
        buf
    }

    #[test]
    fn rollout_matches_nominal_without_disturbance() {
        let model = scalar_plant();
        let field = DisturbanceField::zero(1);
        let buf = record_window(&model, &field, DVector::from_vec(vec![1.0]), 8, 0.01);
        let h = DisturbanceNet::new(1, 1, &[8, 8], 0);
        let controls: Vec<_> = buf
            .iter()
            .take(7)
            .map(|(t, _, u)| (*t, u.clone()))
            .collect();
        let states = virtual_rollout(&model, &buf.get(0).1, &controls, 0.01, &h).unwrap();
        for (i, s) in states.iter().enumerate() {
            // zero estimate, zero truth: identical integrator arithmetic
            assert_eq!(s[0].to_bits(), buf.get(i).1[0].to_bits());
        }
    }

    #[test]
    fn rollout_with_true_disturbance_matches_recording() {
        let (model, field) = model_by_id("tsr").unwrap();
        let x0 = DVector::from_vec(vec![0.1, -0.5, 0.0, 0.0]);
        let buf = record_window(&model, &field, x0, 10, 0.01);
        let controls: Vec<_> = buf
            .iter()
            .take(9)
            .map(|(t, _, u)| (*t, u.clone()))
            .collect();
        let states =
            virtual_rollout_with_field(&model, &buf.get(0).1, &controls, 0.01, &field).unwrap();
        for (i, s) in states.iter().enumerate() {
            let gap = (s - &buf.get(i).1).norm();
            assert!(gap < 1e-8, "step {i}: gap {gap}");
        }
    }

    #[test]
    fn constant_disturbance_gap_matches_closed_form() {
        // x' = -x + u + 0.5 vs virtual x' = -x + u with the same controls:
        // the gap obeys g' = -g + 0.5, so g(t) = 0.5 (1 - e^{-t})
        let model = scalar_plant();
        let field = DisturbanceField::new(
            Arc::new(|_t, _x| DVector::from_vec(vec![0.5])),
            0.5,
        );
        let dt = 0.01;
        let steps = 100;
        let buf = record_window(&model, &field, DVector::from_vec(vec![1.0]), steps + 1, dt);
        let h = DisturbanceNet::new(1, 1, &[8], 0); // zero estimate
        let controls: Vec<_> = buf
            .iter()
            .take(steps)
            .map(|(t, _, u)| (*t, u.clone()))
            .collect();
        let states = virtual_rollout(&model, &buf.get(0).1, &controls, dt, &h).unwrap();
        for (i, s) in states.iter().enumerate() {
            let t = i as f64 * dt;
            let expected_gap = 0.5 * (1.0 - (-t).exp());
            let gap = buf.get(i).1[0] - s[0];
            assert_relative_eq!(gap, expected_gap, epsilon = 1e-6);
        }
    }

    #[test]
    fn window_loss_zero_when_estimate_is_exact() {
        // zero disturbance and zero estimate: the virtual window replays
        // the actual one exactly
        let model = scalar_plant();
        let field = DisturbanceField::zero(1);
        let buf = record_window(&model, &field, DVector::from_vec(vec![0.7]), 6, 0.01);
        let h = DisturbanceNet::new(1, 1, &[8], 1);
        let loss = window_loss(&buf, &model, &h, 0.01).unwrap();
        assert!(loss < 1e-10, "loss {loss}");
    }

    #[test]
    fn window_loss_positive_under_unmodelled_disturbance() {
        let model = scalar_plant();
        let field = DisturbanceField::new(
            Arc::new(|_t, _x| DVector::from_vec(vec![0.5])),
            0.5,
        );
        let buf = record_window(&model, &field, DVector::from_vec(vec![0.7]), 6, 0.01);
        let h = DisturbanceNet::new(1, 1, &[8], 1);
        let loss = window_loss(&buf, &model, &h, 0.01).unwrap();
        assert!(loss > 0.0);
    }

    #[test]
    fn window_loss_requires_full_buffer() {
        let model = scalar_plant();
        let mut buf = MemoryBuffer::new(5);
        buf.push(0.0, DVector::zeros(1), DVector::zeros(1)).unwrap();
        let h = DisturbanceNet::new(1, 1, &[8], 1);
        assert!(matches!(
            window_loss(&buf, &model, &h, 0.01),
            Err(Error::BufferNotFull { .. })
        ));
    }

    #[test]
    fn window_loss_sweep_has_minimum_near_truth() {
        // constant-output estimators: loss as a function of the constant
        // should be minimized near the true constant disturbance 0.5
        let model = scalar_plant();
        let field = DisturbanceField::new(
            Arc::new(|_t, _x| DVector::from_vec(vec![0.5])),
            0.5,
        );
        let buf = record_window(&model, &field, DVector::from_vec(vec![1.0]), 10, 0.01);
        let mut best = (f64::INFINITY, -1.0);
        for k in 0..=10 {
            let c = k as f64 * 0.1;
            let mut h = DisturbanceNet::new(1, 1, &[4], 0);
            let mut flat = h.net().flatten();
            let len = flat.len();
            flat[len - 1] = c; // final bias
            h.net_mut().unflatten(&flat).unwrap();
            let loss = window_loss(&buf, &model, &h, 0.01).unwrap();
            if loss < best.0 {
                best = (loss, c);
            }
        }
        assert!(
            (best.1 - 0.5).abs() < 0.11,
            "minimum at {} not near 0.5",
            best.1
        );
    }

    #[test]
    fn taped_gradient_matches_finite_differences() {
        let model = scalar_plant();
        let field = DisturbanceField::new(
            Arc::new(|t: f64, _x: &DVector<f64>| DVector::from_vec(vec![0.3 * t.cos()])),
            0.3,
        );
        let buf = record_window(&model, &field, DVector::from_vec(vec![1.0]), 6, 0.01);
        let h = DisturbanceNet::new(1, 1, &[6], 5);
        let (loss, grad) = window_loss_and_grad(&buf, &model, &h, 0.01).unwrap();
        let plain = window_loss(&buf, &model, &h, 0.01).unwrap();
        assert_relative_eq!(loss, plain, epsilon = 1e-13);

        let base = h.net().flatten();
        let step = 1e-6;
        for idx in 0..base.len() {
            let mut hp = h.clone();
            let mut hm = h.clone();
            let mut vp = base.clone();
            let mut vm = base.clone();
            vp[idx] += step;
            vm[idx] -= step;
            hp.net_mut().unflatten(&vp).unwrap();
            hm.net_mut().unflatten(&vm).unwrap();
            let lp = window_loss(&buf, &model, &hp, 0.01).unwrap();
            let lm = window_loss(&buf, &model, &hm, 0.01).unwrap();
            let fd = (lp - lm) / (2.0 * step);
            let diff = (grad[idx] - fd).abs();
            assert!(
                diff <= 1e-4 * grad[idx].abs().max(fd.abs()).max(1e-6),
                "grad[{idx}] = {} vs fd {}",
                grad[idx],
                fd
            );
        }
    }

    #[test]
    fn update_learns_constant_disturbance() {
        // simulate the plant for 220 intervals, updating every step once
        // the window fills; the estimate should converge near 0.5
        let model = scalar_plant();
        let field = DisturbanceField::new(
            Arc::new(|_t, _x| DVector::from_vec(vec![0.5])),
            0.5,
        );
        let config = OnlineConfig {
            buffer_capacity: 10,
            epochs: 2,
            learning_rate: 1e-3,
            control_interval: 0.01,
            hidden: vec![16, 16],
            ..OnlineConfig::default()
        };
        let mut h = DisturbanceNet::new(1, 1, &config.hidden, 3);
        let mut adam = super::super::adam_for(&h, config.learning_rate);
        let mut buf = MemoryBuffer::new(config.buffer_capacity);
        let mut x = DVector::from_vec(vec![1.0]);
        let dt = config.control_interval;
        let mut descents = 0;
        let mut updates = 0;
        for k in 0..220 {
            let t = k as f64 * dt;
            let u = DVector::from_vec(vec![-0.2 * x[0]]);
            if buf.is_full() {
                let rep = update_disturbance(&mut h, &buf, &model, &config, &mut adam).unwrap();
                updates += 1;
                if rep.loss_after <= rep.loss_before {
                    descents += 1;
                }
            }
            buf.push(t, x.clone(), u.clone()).unwrap();
            x = rk4_step(&model, &x, &u, t, dt, Some(&field)).unwrap();
        }
        // estimate near the visited states
        let mut err = 0.0;
        let mut count = 0;
        for k in 200..220 {
            let t = k as f64 * dt;
            let est = h.eval(t, &x);
            err += (est[0] - 0.5).abs();
            count += 1;
        }
        let mean_err = err / count as f64;
        assert!(mean_err < 0.1, "mean estimation error {mean_err}");
        assert!(
            descents as f64 >= 0.9 * updates as f64,
            "descents {descents}/{updates}"
        );
    }

    #[test]
    fn zero_disturbance_keeps_estimate_small() {
        let model = scalar_plant();
        let field = DisturbanceField::zero(1);
        let config = OnlineConfig {
            buffer_capacity: 8,
            hidden: vec![16, 16],
            ..OnlineConfig::default()
        };
        let mut h = DisturbanceNet::new(1, 1, &config.hidden, 3);
        let mut adam = super::super::adam_for(&h, config.learning_rate);
        let mut buf = MemoryBuffer::new(config.buffer_capacity);
        let mut x = DVector::from_vec(vec![0.8]);
        let dt = config.control_interval;
        for k in 0..110 {
            let t = k as f64 * dt;
            let u = DVector::from_vec(vec![-0.1 * x[0]]);
            if buf.is_full() {
                update_disturbance(&mut h, &buf, &model, &config, &mut adam).unwrap();
            }
            buf.push(t, x.clone(), u.clone()).unwrap();
            x = rk4_step(&model, &x, &u, t, dt, Some(&field)).unwrap();
        }
        let est = h.eval(1.1, &x).amax();
        assert!(est < 1e-3, "estimate drifted to {est}");
    }
}
