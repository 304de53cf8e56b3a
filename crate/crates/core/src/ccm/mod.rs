//! Neural contraction-metric synthesis: metric and feedback-gain
//! parameterizations, sampled matrix-inequality risk functions, the
//! training loop, and a posteriori contraction verification.

mod loss;
mod train;

pub use loss::{
    c2_frobenius, ccm_lhs, dual_condition_c1, dual_condition_c2, psd_penalty, psd_penalty_exact,
    psd_penalty_with_dirs, total_loss, total_loss_and_grad, PenaltyDirections,
};
pub use train::{
    load_checkpoint, save_checkpoint, train_ccm, verify_contraction, CcmMeta, ContractionReport,
    TrainReport,
};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{Activation, DenseNet, DifferentiableMap};
use crate::error::{Error, Result};
use crate::sysmodels::ControlAffineModel;

/// Uniformly positive definite metric `M(x) = alpha_lo I + m(x)^T m(x)`
/// with a square network factor `m : R^n -> R^{n x n}`.
///
/// An optional input mask zeroes selected coordinates before they reach the
/// factor net. Masking the actuated coordinates of a plant with a constant
/// row-sparse input matrix makes the dual orthogonality condition hold
/// identically, which removes its penalty from the search entirely.
#[derive(Debug, Clone)]
pub struct MetricNet {
    pub alpha_lo: f64,
    net: DenseNet,
    n: usize,
    input_mask: Option<DVector<f64>>,
}

impl MetricNet {
    pub fn new(alpha_lo: f64, net: DenseNet) -> Self {
        let n = net.input_dim();
        assert_eq!(
            net.output_dim(),
            n * n,
            "metric factor must map R^n to R^(n*n)"
        );
        assert!(alpha_lo > 0.0);
        MetricNet {
            alpha_lo,
            net,
            n,
            input_mask: None,
        }
    }

    pub fn xavier(n: usize, hidden: &[usize], alpha_lo: f64, seed: u64) -> Self {
        let mut widths = vec![n];
        widths.extend_from_slice(hidden);
        widths.push(n * n);
        Self::new(alpha_lo, DenseNet::xavier(&widths, Activation::Tanh, seed))
    }

    /// Constant metric `alpha_lo * I` (zero network factor).
    pub fn constant(n: usize, alpha_lo: f64) -> Self {
        Self::new(alpha_lo, DenseNet::zeros(&[n, n * n], Activation::Tanh))
    }

    /// Restrict the metric to the coordinates where `mask` is true.
    pub fn with_input_mask(mut self, mask: &[bool]) -> Self {
        assert_eq!(mask.len(), self.n);
        self.input_mask = Some(DVector::from_fn(self.n, |i, _| {
            if mask[i] {
                1.0
            } else {
                0.0
            }
        }));
        self
    }

    pub fn input_mask(&self) -> Option<&DVector<f64>> {
        self.input_mask.as_ref()
    }

    fn apply_mask(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.input_mask {
            Some(m) => v.component_mul(m),
            None => v.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn inner_net(&self) -> &DenseNet {
        &self.net
    }

    pub fn inner_net_mut(&mut self) -> &mut DenseNet {
        &mut self.net
    }

    fn factor(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let flat = self.net.forward(&self.apply_mask(x))?;
        Ok(DMatrix::from_column_slice(self.n, self.n, flat.as_slice()))
    }

    /// `M(x)`, symmetric with smallest eigenvalue at least `alpha_lo`.
    pub fn metric_eval(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let m = self.factor(x)?;
        let mut out = DMatrix::identity(self.n, self.n) * self.alpha_lo;
        out += m.transpose() * &m;
        Ok(out)
    }

    /// Dual metric `W(x) = M(x)^{-1}`.
    pub fn dual_metric(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let m = self.metric_eval(x)?;
        let eig = m.clone().symmetric_eigen();
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        let cond = max / min.max(f64::MIN_POSITIVE);
        if cond > 1e12 {
            return Err(Error::IllConditioned { cond });
        }
        m.cholesky()
            .map(|ch| ch.inverse())
            .ok_or(Error::IllConditioned { cond })
    }

    /// `M(x)` together with its exact directional derivative along `v`.
    pub fn metric_jvp(&self, x: &DVector<f64>, v: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let (flat, dflat) = self
            .net
            .forward_jvp(&self.apply_mask(x), &self.apply_mask(v))?;
        let m = DMatrix::from_column_slice(self.n, self.n, flat.as_slice());
        let dm = DMatrix::from_column_slice(self.n, self.n, dflat.as_slice());
        let mut metric = DMatrix::identity(self.n, self.n) * self.alpha_lo;
        metric += m.transpose() * &m;
        let prod = m.transpose() * dm;
        let mdot = &prod + prod.transpose();
        Ok((metric, mdot))
    }
}

impl DifferentiableMap for MetricNet {
    fn eval(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.metric_eval(x).expect("input length mismatch")
    }

    fn jvp(&self, x: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
        self.metric_jvp(x, v).expect("input length mismatch").1
    }
}

/// State-feedback tracking law together with its exact state Jacobian.
pub trait FeedbackLaw {
    fn control(
        &self,
        x: &DVector<f64>,
        x_ref: &DVector<f64>,
        u_ref: &DVector<f64>,
    ) -> DVector<f64>;

    /// `du/dx` at fixed reference.
    fn gain_jacobian(&self, x: &DVector<f64>, x_ref: &DVector<f64>) -> DMatrix<f64>;
}

/// Tracking controller `u = u_ref + g2(x, x_ref) tanh(g1(x, x_ref) (x - x_ref))`
/// where `g1` and `g2` are matrix-valued networks of the stacked pair.
/// The structure returns `u_ref` exactly at `x = x_ref` for any parameters.
#[derive(Debug, Clone)]
pub struct TrackingController {
    w1: DenseNet,
    w2: DenseNet,
    n: usize,
    m: usize,
    gain_dim: usize,
}

impl TrackingController {
    pub fn new(w1: DenseNet, w2: DenseNet, n: usize, m: usize) -> Self {
        assert_eq!(w1.input_dim(), 2 * n);
        assert_eq!(w2.input_dim(), 2 * n);
        assert_eq!(w1.output_dim() % n, 0);
        let gain_dim = w1.output_dim() / n;
        assert_eq!(w2.output_dim(), m * gain_dim);
        TrackingController {
            w1,
            w2,
            n,
            m,
            gain_dim,
        }
    }

    pub fn xavier(n: usize, m: usize, gain_dim: usize, hidden: &[usize], seed: u64) -> Self {
        let mut widths1 = vec![2 * n];
        widths1.extend_from_slice(hidden);
        widths1.push(gain_dim * n);
        let mut widths2 = vec![2 * n];
        widths2.extend_from_slice(hidden);
        widths2.push(m * gain_dim);
        Self::new(
            DenseNet::xavier(&widths1, Activation::Tanh, seed),
            DenseNet::xavier(&widths2, Activation::Tanh, seed.wrapping_add(1)),
            n,
            m,
        )
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn control_dim(&self) -> usize {
        self.m
    }

    pub fn gain_dim(&self) -> usize {
        self.gain_dim
    }

    pub fn w1_net(&self) -> &DenseNet {
        &self.w1
    }

    pub fn w2_net(&self) -> &DenseNet {
        &self.w2
    }

    pub fn w1_net_mut(&mut self) -> &mut DenseNet {
        &mut self.w1
    }

    pub fn w2_net_mut(&mut self) -> &mut DenseNet {
        &mut self.w2
    }

    fn stacked(&self, x: &DVector<f64>, x_ref: &DVector<f64>) -> DVector<f64> {
        let mut q = DVector::zeros(2 * self.n);
        q.rows_mut(0, self.n).copy_from(x);
        q.rows_mut(self.n, self.n).copy_from(x_ref);
        q
    }

    fn gain_matrices(&self, q: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let g1 = self.w1.forward(q).expect("shape checked at construction");
        let g2 = self.w2.forward(q).expect("shape checked at construction");
        (
            DMatrix::from_column_slice(self.gain_dim, self.n, g1.as_slice()),
            DMatrix::from_column_slice(self.m, self.gain_dim, g2.as_slice()),
        )
    }
}

impl FeedbackLaw for TrackingController {
    fn control(
        &self,
        x: &DVector<f64>,
        x_ref: &DVector<f64>,
        u_ref: &DVector<f64>,
    ) -> DVector<f64> {
        let q = self.stacked(x, x_ref);
        let (g1, g2) = self.gain_matrices(&q);
        let e = x - x_ref;
        let z = (&g1 * e).map(f64::tanh);
        u_ref + g2 * z
    }

    fn gain_jacobian(&self, x: &DVector<f64>, x_ref: &DVector<f64>) -> DMatrix<f64> {
        let q = self.stacked(x, x_ref);
        let (g1, g2) = self.gain_matrices(&q);
        let e = x - x_ref;
        let z = &g1 * &e;
        let g = z.map(f64::tanh);
        let gp = g.map(|t| 1.0 - t * t);
        let mut jac = DMatrix::zeros(self.m, self.n);
        for l in 0..self.n {
            let mut tangent = DVector::zeros(2 * self.n);
            tangent[l] = 1.0;
            let (_, d1) = self.w1.forward_jvp(&q, &tangent).expect("shape checked");
            let (_, d2) = self.w2.forward_jvp(&q, &tangent).expect("shape checked");
            let a_l = DMatrix::from_column_slice(self.gain_dim, self.n, d1.as_slice());
            let b_l = DMatrix::from_column_slice(self.m, self.gain_dim, d2.as_slice());
            let inner = (&a_l * &e + g1.column(l)).component_mul(&gp);
            let col = &b_l * &g + &g2 * inner;
            jac.column_mut(l).copy_from(&col);
        }
        jac
    }
}

/// Hyper-parameters of the metric/controller search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CCMHyperParams {
    /// Contraction rate.
    pub contraction_rate: f64,
    pub alpha_lo: f64,
    pub alpha_hi: f64,
    /// Margin added inside the contraction penalty.
    pub sigma: f64,
    /// Unit directions per matrix penalty per step.
    pub penalty_dirs: usize,
    pub batch_size: usize,
    pub train_steps: usize,
    pub dataset_size: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub metric_hidden: Vec<usize>,
    pub gain_hidden: Vec<usize>,
    pub gain_dim: usize,
}

impl Default for CCMHyperParams {
    fn default() -> Self {
        CCMHyperParams {
            contraction_rate: 0.5,
            alpha_lo: 0.1,
            alpha_hi: 10.0,
            sigma: 0.01,
            penalty_dirs: 32,
            batch_size: 1024,
            train_steps: 10_000,
            dataset_size: 130_000,
            seed: 0,
            learning_rate: 1e-3,
            metric_hidden: vec![128, 128],
            gain_hidden: vec![128, 128],
            gain_dim: 128,
        }
    }
}

impl CCMHyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.contraction_rate <= 0.0 {
            return Err(Error::InvalidConfig("contraction rate must be positive".into()));
        }
        if !(self.alpha_lo > 0.0 && self.alpha_lo < self.alpha_hi) {
            return Err(Error::BoundOrdering {
                lo: self.alpha_lo,
                hi: self.alpha_hi,
            });
        }
        if self.sigma <= 0.0 {
            return Err(Error::InvalidConfig("sigma must be positive".into()));
        }
        if self.batch_size == 0 || self.dataset_size == 0 {
            return Err(Error::InvalidConfig("batch and dataset must be nonempty".into()));
        }
        Ok(())
    }
}

/// Coordinates safe to feed the metric of a constant-B plant: `true` for
/// rows where the input matrix has no support. Masking the remaining rows
/// makes the dual orthogonality blocks vanish identically.
pub fn sparse_actuation_mask(model: &ControlAffineModel) -> Option<Vec<bool>> {
    if !model.constant_b {
        return None;
    }
    let b = model.b(&model.state_box.center());
    Some(
        (0..model.n)
            .map(|i| b.row(i).iter().all(|v| *v == 0.0))
            .collect(),
    )
}

/// Uniform samples from the product of state, state, and control boxes.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub samples: Vec<(DVector<f64>, DVector<f64>, DVector<f64>)>,
}

impl SampleSet {
    pub fn generate<R: Rng>(model: &ControlAffineModel, count: usize, rng: &mut R) -> Self {
        let samples = (0..count)
            .map(|_| {
                (
                    model.state_box.sample(rng),
                    model.state_box.sample(rng),
                    model.control_box.sample(rng),
                )
            })
            .collect();
        SampleSet { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_metric_is_scaled_identity() {
        let metric = MetricNet::constant(3, 0.5);
        let x = DVector::from_vec(vec![0.1, 0.2, 0.3]);
        let m = metric.metric_eval(&x).unwrap();
        assert_relative_eq!(m, DMatrix::identity(3, 3) * 0.5, epsilon = 1e-15);
        let w = metric.dual_metric(&x).unwrap();
        assert_relative_eq!(w, DMatrix::identity(3, 3) * 2.0, epsilon = 1e-12);
    }

    #[test]
    fn metric_inverse_identity() {
        let metric = MetricNet::xavier(4, &[16, 16], 0.1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let x = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
            let m = metric.metric_eval(&x).unwrap();
            let w = metric.dual_metric(&x).unwrap();
            assert_relative_eq!(&m * &w, DMatrix::identity(4, 4), epsilon = 1e-10);
        }
    }

    #[test]
    fn metric_eigenvalues_respect_lower_bound() {
        let metric = MetricNet::xavier(4, &[24, 24], 0.1, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let x = DVector::from_fn(4, |_, _| rng.gen_range(-2.0..2.0));
            let m = metric.metric_eval(&x).unwrap();
            let eig = m.symmetric_eigen();
            assert!(eig.eigenvalues.min() >= 0.1 - 1e-9);
        }
    }

    #[test]
    fn controller_identity_at_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..50 {
            let ctrl = TrackingController::xavier(4, 2, 8, &[16], trial);
            let x_ref = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
            let u_ref = DVector::from_fn(2, |_, _| rng.gen_range(-3.0..3.0));
            let u = ctrl.control(&x_ref, &x_ref, &u_ref);
            // exact: tanh(0) = 0 and W * 0 = 0 in floating point
            assert_eq!(u, u_ref);
        }
    }

    #[test]
    fn zero_w2_gives_pure_feedforward() {
        let w1 = DenseNet::xavier(&[8, 12, 16], Activation::Tanh, 0);
        let w2 = DenseNet::zeros(&[8, 12, 8], Activation::Tanh);
        let ctrl = TrackingController::new(w1, w2, 4, 2);
        let x = DVector::from_vec(vec![0.5, -0.5, 0.2, 0.1]);
        let x_ref = DVector::zeros(4);
        let u_ref = DVector::from_vec(vec![1.0, -1.0]);
        assert_eq!(ctrl.control(&x, &x_ref, &u_ref), u_ref);
    }

    #[test]
    fn controller_output_bounded_by_w2_row_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ctrl = TrackingController::xavier(4, 2, 8, &[16], 77);
        for _ in 0..100 {
            let x = DVector::from_fn(4, |_, _| rng.gen_range(-3.0..3.0));
            let x_ref = DVector::from_fn(4, |_, _| rng.gen_range(-3.0..3.0));
            let u_ref = DVector::zeros(2);
            let u = ctrl.control(&x, &x_ref, &u_ref);
            let q = ctrl.stacked(&x, &x_ref);
            let (_, g2) = ctrl.gain_matrices(&q);
            for i in 0..2 {
                let bound: f64 = g2.row(i).iter().map(|v| v.abs()).sum();
                assert!(u[i].abs() <= bound + 1e-12, "row {i}: |{}| > {bound}", u[i]);
            }
        }
    }

    #[test]
    fn gain_jacobian_matches_finite_differences() {
        let ctrl = TrackingController::xavier(3, 2, 6, &[10], 4);
        let x = DVector::from_vec(vec![0.2, -0.4, 0.6]);
        let x_ref = DVector::from_vec(vec![-0.1, 0.3, 0.0]);
        let u_ref = DVector::zeros(2);
        let jac = ctrl.gain_jacobian(&x, &x_ref);
        let fd = crate::numdiff::central_jacobian(
            |xx| ctrl.control(xx, &x_ref, &u_ref),
            &x,
            1e-6,
        );
        let err = crate::numdiff::max_relative_error(&jac, &fd, 1e-8);
        assert!(err < 1e-5, "gain jacobian mismatch: {err}");
    }

    #[test]
    fn hyper_validation() {
        let mut h = CCMHyperParams::default();
        assert!(h.validate().is_ok());
        h.alpha_lo = 11.0;
        assert!(matches!(h.validate(), Err(Error::BoundOrdering { .. })));
    }
}
