//! Minibatch search for the metric/controller pair and the a posteriori
//! contraction audit.

use std::path::Path;

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{batch_indices, total_loss_and_grad, PenaltyDirections};
use super::{ccm_lhs, CCMHyperParams, MetricNet, SampleSet, TrackingController};
use crate::diffnet::{AdamState, DenseNet};
use crate::error::{Error, Result};
use crate::sysmodels::ControlAffineModel;

/// Per-run training summary.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub loss_trace: Vec<f64>,
    pub final_loss: f64,
    pub steps: usize,
    /// Execution mode; training is sequential for determinism.
    pub mode: String,
}

/// Result of the sampled eigenvalue audit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContractionReport {
    pub violation_rate: f64,
    pub worst_max_eig: f64,
    pub alpha_lo_emp: f64,
    pub alpha_hi_emp: f64,
    pub samples: usize,
}

/// Minibatch Adam on the empirical risk over a uniformly sampled dataset.
pub fn train_ccm(
    model: &ControlAffineModel,
    hyper: &CCMHyperParams,
) -> Result<(MetricNet, TrackingController, TrainReport)> {
    hyper.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut metric = MetricNet::xavier(
        model.n,
        &hyper.metric_hidden,
        hyper.alpha_lo,
        hyper.seed.wrapping_add(1),
    );
    if let Some(mask) = super::sparse_actuation_mask(model) {
        metric = metric.with_input_mask(&mask);
    }
    let mut ctrl = TrackingController::xavier(
        model.n,
        model.m,
        hyper.gain_dim,
        &hyper.gain_hidden,
        hyper.seed.wrapping_add(2),
    );
    let dataset = SampleSet::generate(model, hyper.dataset_size, &mut rng);

    let dim_m = metric.inner_net().param_count();
    let dim_1 = ctrl.w1_net().param_count();
    let dim_2 = ctrl.w2_net().param_count();
    let mut params = DVector::zeros(dim_m + dim_1 + dim_2);
    params.rows_mut(0, dim_m).copy_from(&metric.inner_net().flatten());
    params
        .rows_mut(dim_m, dim_1)
        .copy_from(&ctrl.w1_net().flatten());
    params
        .rows_mut(dim_m + dim_1, dim_2)
        .copy_from(&ctrl.w2_net().flatten());
    let mut adam = AdamState::new(params.len(), hyper.learning_rate);

    let mut trace = Vec::with_capacity(hyper.train_steps);
    for step in 0..hyper.train_steps {
        let idxs = batch_indices(&mut rng, &dataset, hyper.batch_size);
        let dirs = PenaltyDirections::sample(model.n, model.m, hyper.penalty_dirs, &mut rng);
        let batch: Vec<_> = idxs.iter().map(|&i| dataset.samples[i].clone()).collect();
        let (loss, g_m, g_1, g_2) =
            total_loss_and_grad(model, &metric, &ctrl, &batch, hyper, &dirs)?;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!(
                "loss became {loss} at step {step}"
            )));
        }
        let mut grad = DVector::zeros(params.len());
        grad.rows_mut(0, dim_m).copy_from(&g_m);
        grad.rows_mut(dim_m, dim_1).copy_from(&g_1);
        grad.rows_mut(dim_m + dim_1, dim_2).copy_from(&g_2);
        adam.update(&mut params, &grad)?;
        metric
            .inner_net_mut()
            .unflatten(&params.rows(0, dim_m).into_owned())?;
        ctrl.w1_net_mut()
            .unflatten(&params.rows(dim_m, dim_1).into_owned())?;
        ctrl.w2_net_mut()
            .unflatten(&params.rows(dim_m + dim_1, dim_2).into_owned())?;
        trace.push(loss);
    }

    let final_loss = trace.last().copied().unwrap_or(0.0);
    Ok((
        metric,
        ctrl,
        TrainReport {
            loss_trace: trace,
            final_loss,
            steps: hyper.train_steps,
            mode: "sequential".to_string(),
        },
    ))
}

/// Exact eigenvalue audit of the contraction condition on fresh uniform
/// samples, plus empirical metric bounds.
pub fn verify_contraction<R: Rng>(
    model: &ControlAffineModel,
    metric: &MetricNet,
    ctrl: &TrackingController,
    lambda: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<ContractionReport> {
    let mut violations = 0usize;
    let mut worst = f64::NEG_INFINITY;
    let mut alpha_lo_emp = f64::INFINITY;
    let mut alpha_hi_emp = f64::NEG_INFINITY;
    for _ in 0..n_samples {
        let x = model.state_box.sample(rng);
        let x_ref = model.state_box.sample(rng);
        let u_ref = model.control_box.sample(rng);
        let psi = ccm_lhs(model, metric, ctrl, &x, &x_ref, &u_ref, lambda)?;
        let sym = (&psi + psi.transpose()) * 0.5;
        let max_eig = sym.symmetric_eigen().eigenvalues.max();
        worst = worst.max(max_eig);
        if max_eig >= 0.0 {
            violations += 1;
        }
        let m_eig = metric.metric_eval(&x)?.symmetric_eigen();
        alpha_lo_emp = alpha_lo_emp.min(m_eig.eigenvalues.min());
        alpha_hi_emp = alpha_hi_emp.max(m_eig.eigenvalues.max());
    }
    Ok(ContractionReport {
        violation_rate: violations as f64 / n_samples as f64,
        worst_max_eig: worst,
        alpha_lo_emp,
        alpha_hi_emp,
        samples: n_samples,
    })
}

/// Checkpoint metadata stored next to the two network documents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CcmMeta {
    pub model_id: String,
    pub lambda: f64,
    pub alpha_lo: f64,
    pub alpha_hi: f64,
    pub sigma: f64,
    pub dataset_size: usize,
    pub seed: u64,
    pub violation_rate: f64,
    /// Empirical metric bounds from the audit, when available.
    #[serde(default)]
    pub alpha_lo_emp: Option<f64>,
    #[serde(default)]
    pub alpha_hi_emp: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct ControllerDoc {
    schema_version: u32,
    w1: serde_json::Value,
    w2: serde_json::Value,
}

pub fn save_checkpoint(
    dir: &Path,
    metric: &MetricNet,
    ctrl: &TrackingController,
    meta: &CcmMeta,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    metric.inner_net().save(&dir.join("metric_net.json"))?;
    let doc = ControllerDoc {
        schema_version: crate::diffnet::NET_SCHEMA_VERSION,
        w1: ctrl.w1_net().to_json(),
        w2: ctrl.w2_net().to_json(),
    };
    std::fs::write(
        dir.join("controller_net.json"),
        serde_json::to_string_pretty(&doc)?,
    )?;
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(MetricNet, TrackingController, CcmMeta)> {
    let meta: CcmMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
    let metric_net = DenseNet::load(&dir.join("metric_net.json"))?;
    let doc: ControllerDoc =
        serde_json::from_str(&std::fs::read_to_string(dir.join("controller_net.json"))?)?;
    let w1 = DenseNet::from_json(&doc.w1)?;
    let w2 = DenseNet::from_json(&doc.w2)?;
    let n = w1.input_dim() / 2;
    if metric_net.input_dim() != n || metric_net.output_dim() != n * n {
        return Err(Error::Checkpoint(
            "metric and controller dimensions disagree".into(),
        ));
    }
    let gain_dim = w1.output_dim() / n;
    let m = w2.output_dim() / gain_dim;
    let mut metric = MetricNet::new(meta.alpha_lo, metric_net);
    // restore the structural input mask for known benchmark plants
    if let Ok((model, _)) = crate::sysmodels::model_by_id(&meta.model_id) {
        if let Some(mask) = super::sparse_actuation_mask(&model) {
            metric = metric.with_input_mask(&mask);
        }
    }
    let ctrl = TrackingController::new(w1, w2, n, m);
    Ok((metric, ctrl, meta))
}
