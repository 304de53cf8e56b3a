//! Sampled matrix-inequality risk functions for the metric/controller
//! search, in two forms: a plain evaluation path used for verification and
//! reporting, and a taped path that yields exact parameter gradients.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{CCMHyperParams, FeedbackLaw, MetricNet, SampleSet, TrackingController};
use crate::diffnet::{hstack_cols, Tape, Var};
use crate::error::{Error, Result};
use crate::sysmodels::{jacobian_a, ControlAffineModel};

/// Standard-normal sample via Box-Muller, deterministic in the rng stream.
fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Uniformly distributed unit directions, one per column.
pub fn unit_directions<R: Rng>(dim: usize, count: usize, rng: &mut R) -> DMatrix<f64> {
    let mut dirs = DMatrix::zeros(dim, count);
    if dim == 0 {
        return dirs;
    }
    for j in 0..count {
        loop {
            let v = DVector::from_fn(dim, |_, _| gaussian(rng));
            let norm = v.norm();
            if norm > 1e-12 {
                dirs.column_mut(j).copy_from(&(v / norm));
                break;
            }
        }
    }
    dirs
}

/// Frozen direction sets for one training step. Sharing them across a batch
/// keeps the loss a fixed deterministic function of the parameters, which
/// gradient checks rely on.
#[derive(Debug, Clone)]
pub struct PenaltyDirections {
    /// Directions for the contraction-condition penalty (dim n).
    pub psi: DMatrix<f64>,
    /// Directions for the dual-condition penalty (dim n - m).
    pub c1: DMatrix<f64>,
    /// Directions for the metric upper-bound penalty (dim n).
    pub metric: DMatrix<f64>,
}

impl PenaltyDirections {
    pub fn sample<R: Rng>(n: usize, m: usize, count: usize, rng: &mut R) -> Self {
        PenaltyDirections {
            psi: unit_directions(n, count, rng),
            c1: unit_directions(n.saturating_sub(m), count, rng),
            metric: unit_directions(n, count, rng),
        }
    }
}

/// Unit eigenvector of the largest eigenvalue of a symmetric matrix.
/// Used as an adversarial direction: penalizing the quadratic form along a
/// frozen copy of this vector has the same first-order parameter gradient
/// as penalizing the eigenvalue itself, so random directions only need to
/// cover the remaining spectrum.
pub fn top_eigvec(sym: &DMatrix<f64>) -> DVector<f64> {
    let eig = sym.clone().symmetric_eigen();
    let mut best = 0;
    for i in 1..eig.eigenvalues.len() {
        if eig.eigenvalues[i] > eig.eigenvalues[best] {
            best = i;
        }
    }
    let v = eig.eigenvectors.column(best).into_owned();
    let norm = v.norm();
    if norm > 0.0 {
        v / norm
    } else {
        v
    }
}

fn append_column(dirs: &DMatrix<f64>, v: &DVector<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(dirs.nrows(), dirs.ncols() + 1);
    out.view_mut((0, 0), (dirs.nrows(), dirs.ncols())).copy_from(dirs);
    out.column_mut(dirs.ncols()).copy_from(v);
    out
}

/// Training-form positivity penalty: mean over unit directions of
/// `max(0, -v^T A v)`. Zero exactly when `A` is positive semidefinite in
/// every sampled direction.
pub fn psd_penalty_with_dirs(a: &DMatrix<f64>, dirs: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 || dirs.ncols() == 0 {
        return 0.0;
    }
    let sym = (a + a.transpose()) * 0.5;
    let mut acc = 0.0;
    for j in 0..dirs.ncols() {
        let v = dirs.column(j);
        let q = (&sym * v).dot(&v);
        acc += (-q).max(0.0);
    }
    acc / dirs.ncols() as f64
}

/// Training-form penalty with internally sampled directions.
pub fn psd_penalty<R: Rng>(a: &DMatrix<f64>, direction_samples: usize, rng: &mut R) -> f64 {
    let dirs = unit_directions(a.nrows(), direction_samples, rng);
    psd_penalty_with_dirs(a, &dirs)
}

/// Verification-form penalty: sum of the magnitudes of negative
/// eigenvalues of the symmetrized input.
pub fn psd_penalty_exact(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    eig.eigenvalues.iter().map(|l| (-l).max(0.0)).sum()
}

/// Left-hand side of the contraction condition for the closed loop:
/// `Mdot + sym(M (A + B K)) + 2 lambda M`, symmetric by construction.
pub fn ccm_lhs(
    model: &ControlAffineModel,
    metric: &MetricNet,
    law: &dyn FeedbackLaw,
    x: &DVector<f64>,
    x_ref: &DVector<f64>,
    u_ref: &DVector<f64>,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    let u = law.control(x, x_ref, u_ref);
    let b = model.b(x);
    let xdot = model.f(x)? + &b * &u;
    let (m, mdot) = metric.metric_jvp(x, &xdot)?;
    let a = jacobian_a(model, x, &u)?;
    let k = law.gain_jacobian(x, x_ref);
    let closed = a + &b * k;
    let prod = &m * closed;
    Ok(mdot + (&prod + prod.transpose()) + m * (2.0 * lambda))
}

/// Dual condition on the natural dynamics:
/// `B_perp^T [ -d_f W + sym(df/dx W) + 2 lambda W ] B_perp`.
pub fn dual_condition_c1(
    model: &ControlAffineModel,
    metric: &MetricNet,
    x: &DVector<f64>,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    let f = model.f(x)?;
    let (m, mdot_f) = metric.metric_jvp(x, &f)?;
    let w = spd_inverse(&m)?;
    // d_f W = -W (d_f M) W
    let neg_dwf = &w * &mdot_f * &w;
    let dfw = model.df_dx(x)? * &w;
    let inner = neg_dwf + (&dfw + dfw.transpose()) + &w * (2.0 * lambda);
    let bp = model.b_perp(x);
    Ok(bp.transpose() * inner * bp)
}

/// Dual orthogonality conditions, one block per input column:
/// `B_perp^T [ d_{b_i} W - sym(db_i/dx W) ] B_perp`.
pub fn dual_condition_c2(
    model: &ControlAffineModel,
    metric: &MetricNet,
    x: &DVector<f64>,
) -> Result<Vec<DMatrix<f64>>> {
    let b = model.b(x);
    let bp = model.b_perp(x);
    let mut blocks = Vec::with_capacity(model.m);
    for i in 0..model.m {
        let bi = b.column(i).into_owned();
        let (m, mdot_bi) = metric.metric_jvp(x, &bi)?;
        let w = spd_inverse(&m)?;
        let mut inner = -(&w * &mdot_bi * &w);
        if !model.constant_b {
            let dbw = model.db_dx(x, i) * &w;
            inner -= &dbw + dbw.transpose();
        }
        blocks.push(bp.transpose() * inner * &bp);
    }
    Ok(blocks)
}

fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|ch| ch.inverse())
        .ok_or(Error::IllConditioned { cond: f64::INFINITY })
}

/// Frobenius norm of the stacked dual-orthogonality blocks.
pub fn c2_frobenius(blocks: &[DMatrix<f64>]) -> f64 {
    blocks
        .iter()
        .map(|b| b.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Empirical risk over a batch: mean of the contraction penalty, the two
/// dual-condition penalties, and the metric upper-bound penalty.
pub fn total_loss(
    model: &ControlAffineModel,
    metric: &MetricNet,
    ctrl: &TrackingController,
    batch: &[(DVector<f64>, DVector<f64>, DVector<f64>)],
    hyper: &CCMHyperParams,
    dirs: &PenaltyDirections,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("batch must be nonempty".into()));
    }
    let n = model.n;
    let lambda = hyper.contraction_rate;
    let eye = DMatrix::<f64>::identity(n, n);
    let mut acc = 0.0;
    for (x, x_ref, u_ref) in batch {
        let psi = ccm_lhs(model, metric, ctrl, x, x_ref, u_ref, lambda)?;
        let psi_dirs = append_column(&dirs.psi, &top_eigvec(&psi));
        let l_ccm = psd_penalty_with_dirs(&(-&psi - &eye * hyper.sigma), &psi_dirs);
        let mut l_c1 = 0.0;
        let mut l_c2 = 0.0;
        if n > model.m {
            let c1 = dual_condition_c1(model, metric, x, lambda)?;
            let c1_dirs = append_column(&dirs.c1, &top_eigvec(&c1));
            l_c1 = psd_penalty_with_dirs(&(-c1), &c1_dirs);
            l_c2 = c2_frobenius(&dual_condition_c2(model, metric, x)?);
        }
        let m = metric.metric_eval(x)?;
        let m_dirs = append_column(&dirs.metric, &top_eigvec(&m));
        let l_m = psd_penalty_with_dirs(&(&eye * hyper.alpha_hi - m), &m_dirs);
        acc += l_ccm + l_c1 + l_c2 + l_m;
    }
    Ok(acc / batch.len() as f64)
}

/// Mean quadratic-form penalty `mean_j relu(v_j^T A v_j + shift)` over the
/// columns of a constant direction matrix, on the tape.
fn taped_direction_penalty<'t>(a: Var<'t>, dirs_c: Var<'t>, shift: f64, count: usize) -> Var<'t> {
    let q = dirs_c.t().matmul(a).matmul(dirs_c).diag();
    q.add_scalar(shift).relu().sum().scale(1.0 / count as f64)
}

/// Batch loss and exact gradients w.r.t. the metric net, w1 net, and w2 net
/// parameters (in `flatten` order).
pub fn total_loss_and_grad(
    model: &ControlAffineModel,
    metric: &MetricNet,
    ctrl: &TrackingController,
    batch: &[(DVector<f64>, DVector<f64>, DVector<f64>)],
    hyper: &CCMHyperParams,
    dirs: &PenaltyDirections,
) -> Result<(f64, DVector<f64>, DVector<f64>, DVector<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("batch must be nonempty".into()));
    }
    let n = model.n;
    let m_dim = model.m;
    let c_dim = ctrl.gain_dim();
    let lambda = hyper.contraction_rate;
    let k_dirs = dirs.psi.ncols();

    let tape = Tape::new();
    let staged_m = metric.inner_net().stage(&tape);
    let staged_w1 = ctrl.w1_net().stage(&tape);
    let staged_w2 = ctrl.w2_net().stage(&tape);

    let alpha_eye = tape.constant(DMatrix::identity(n, n) * metric.alpha_lo);

    // unit tangents in the first half of the stacked controller input
    let x_tangents: Vec<Var<'_>> = (0..n)
        .map(|l| {
            let mut v = DMatrix::zeros(2 * n, 1);
            v[(l, 0)] = 1.0;
            tape.constant(v)
        })
        .collect();

    let bp_plain = if n > m_dim {
        Some(model.b_perp(&batch[0].0))
    } else {
        None
    };

    let mut loss_acc: Option<Var<'_>> = None;
    for (x, x_ref, u_ref) in batch {
        let mut q_val = DMatrix::zeros(2 * n, 1);
        q_val.view_mut((0, 0), (n, 1)).copy_from(&DMatrix::from_column_slice(n, 1, x.as_slice()));
        q_val
            .view_mut((n, 0), (n, 1))
            .copy_from(&DMatrix::from_column_slice(n, 1, x_ref.as_slice()));
        let q = tape.constant(q_val);
        let e_c = tape.constant_vec(&(x - x_ref));
        let uref_c = tape.constant_vec(u_ref);
        let f_val = model.f(x)?;
        let f_c = tape.constant_vec(&f_val);
        let b_val = model.b(x);
        let b_c = tape.constant(b_val.clone());
        let df_c = tape.constant(model.df_dx(x)?);

        // controller nets with per-axis input tangents
        let (g1_flat, d1) = staged_w1.forward_multi_jvp(q, &x_tangents);
        let (g2_flat, d2) = staged_w2.forward_multi_jvp(q, &x_tangents);
        let g1 = g1_flat.reshape(c_dim, n);
        let g2 = g2_flat.reshape(m_dim, c_dim);
        let z = g1.matmul(e_c);
        let g = z.tanh();
        let gp = g.emul(g).scale(-1.0).add_scalar(1.0);
        let u = uref_c + g2.matmul(g);

        // feedback-gain Jacobian, one column per state axis
        let cols: Vec<Var<'_>> = (0..n)
            .map(|l| {
                let a_l = d1[l].reshape(c_dim, n);
                let b_l = d2[l].reshape(m_dim, c_dim);
                b_l.matmul(g) + g2.matmul(gp.emul(a_l.matmul(e_c) + g1.column(l)))
            })
            .collect();
        let k_jac = hstack_cols(&tape, &cols);

        let xdot = f_c + b_c.matmul(u);

        // metric with tangents along xdot, f, and each input column;
        // a masked metric sees masked inputs and tangents
        let (x_m, xdot_m, f_m, b_cols_m): (Var<'_>, Var<'_>, Var<'_>, Vec<Var<'_>>) =
            match metric.input_mask() {
                Some(mask) => {
                    let mask_c = tape.constant_vec(mask);
                    (
                        tape.constant_vec(&x.component_mul(mask)),
                        xdot.emul(mask_c),
                        tape.constant_vec(&f_val.component_mul(mask)),
                        (0..m_dim)
                            .map(|i| {
                                tape.constant_vec(
                                    &b_val.column(i).into_owned().component_mul(mask),
                                )
                            })
                            .collect(),
                    )
                }
                None => (
                    tape.constant_vec(x),
                    xdot,
                    f_c,
                    (0..m_dim)
                        .map(|i| tape.constant_vec(&b_val.column(i).into_owned()))
                        .collect(),
                ),
            };
        let mut tangents = vec![xdot_m, f_m];
        tangents.extend(b_cols_m);
        let (m_flat, mdots) = staged_m.forward_multi_jvp(x_m, &tangents);
        let m_fac = m_flat.reshape(n, n);
        let m_fac_t = m_fac.t();
        let metric_m = alpha_eye + m_fac_t.matmul(m_fac);
        let mdot_psi = m_fac_t.matmul(mdots[0].reshape(n, n)).sym();

        // A(x, u), constant unless B depends on the state
        let a_mat = if model.constant_b {
            df_c
        } else {
            let u_row = u.t();
            let mut acc = df_c;
            for i in 0..m_dim {
                let db_c = tape.constant(model.db_dx(x, i));
                acc = acc + db_c.scale_by(u_row.column(i));
            }
            acc
        };

        let closed = a_mat + b_c.matmul(k_jac);
        let psi = mdot_psi + metric_m.matmul(closed).sym() + metric_m.scale(2.0 * lambda);

        let psi_dirs = tape.constant(append_column(&dirs.psi, &top_eigvec(&psi.value())));
        let l_ccm = taped_direction_penalty(psi, psi_dirs, hyper.sigma, k_dirs + 1);
        let met_dirs = tape.constant(append_column(&dirs.metric, &top_eigvec(&metric_m.value())));
        let l_m = taped_direction_penalty(metric_m, met_dirs, -hyper.alpha_hi, k_dirs + 1);

        let mut sample_loss = l_ccm + l_m;
        if let Some(bp) = &bp_plain {
            let bp_c = tape.constant(bp.clone());
            let bp_t = tape.constant(bp.transpose());
            let w = metric_m.spd_inverse();
            let mdot_f = m_fac_t.matmul(mdots[1].reshape(n, n)).sym();
            // -d_f W = W (d_f M) W
            let neg_dwf = w.matmul(mdot_f).matmul(w);
            let inner = neg_dwf + df_c.matmul(w).sym() + w.scale(2.0 * lambda);
            let c1 = bp_t.matmul(inner).matmul(bp_c);
            let c1_dirs = tape.constant(append_column(&dirs.c1, &top_eigvec(&c1.value())));
            let l_c1 = taped_direction_penalty(c1, c1_dirs, 0.0, k_dirs + 1);

            let mut ssq: Option<Var<'_>> = None;
            for i in 0..m_dim {
                let mdot_bi = m_fac_t.matmul(mdots[2 + i].reshape(n, n)).sym();
                let mut inner_i = w.matmul(mdot_bi).matmul(w).scale(-1.0);
                if !model.constant_b {
                    let db_c = tape.constant(model.db_dx(x, i));
                    inner_i = inner_i - db_c.matmul(w).sym();
                }
                let c2i = bp_t.matmul(inner_i).matmul(bp_c);
                let s = c2i.emul(c2i).sum();
                ssq = Some(match ssq {
                    None => s,
                    Some(p) => p + s,
                });
            }
            let l_c2 = ssq.expect("m >= 1").sqrt();
            sample_loss = sample_loss + l_c1 + l_c2;
        }

        loss_acc = Some(match loss_acc {
            None => sample_loss,
            Some(p) => p + sample_loss,
        });
    }

    let loss = loss_acc.expect("nonempty batch").scale(1.0 / batch.len() as f64);
    let value = loss.scalar_value();
    let grads = tape.backward(loss)?;
    Ok((
        value,
        staged_m.grad_flat(&grads),
        staged_w1.grad_flat(&grads),
        staged_w2.grad_flat(&grads),
    ))
}

/// Convenience: sample a batch of indices with replacement.
pub(crate) fn batch_indices<R: Rng>(rng: &mut R, dataset: &SampleSet, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.gen_range(0..dataset.len())).collect()
}
