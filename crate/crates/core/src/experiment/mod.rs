//! End-to-end experiments: paired tracking runs with and without online
//! learning, tracking-error metrics, tube evaluation on run artifacts, and
//! update-cost timing.

mod reference;

pub use reference::{
    gen_reference, gen_reference_linear, gen_reference_pvtol, gen_reference_tsr,
    ReferenceTrajectory,
};

use std::collections::BTreeMap;
use std::path::PathBuf;

use nalgebra::DVector;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ccm::{load_checkpoint, FeedbackLaw, TrackingController};
use crate::error::{Error, Result};
use crate::online::{
    adam_for, run_online, update_disturbance, DisturbanceNet, MemoryBuffer, OnlineConfig,
    RunOptions, TrajectoryLog,
};
use crate::sysmodels::{model_by_id, rk4_step, ControlAffineModel, DisturbanceField};
use crate::tube::{rci_contains, refined_tube_radius, tube_radius, Provenance, TubeEstimate};

/// Which disturbance acts on the plant during an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// The benchmark's true disturbance field.
    Standard,
    /// No disturbance; online learning should then change nothing.
    ZeroDisturbance,
}

/// Configuration of one paired experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model_id: String,
    pub scenario: Scenario,
    /// Optional truncation of the generated reference, in control steps.
    pub horizon: Option<usize>,
    pub seed: u64,
    pub online: OnlineConfig,
    pub ccm_dir: PathBuf,
    pub out_dir: Option<PathBuf>,
    /// Sample count for tube suprema.
    pub tube_samples: usize,
}

impl ExperimentConfig {
    pub fn new(model_id: &str, ccm_dir: PathBuf) -> Self {
        ExperimentConfig {
            model_id: model_id.to_string(),
            scenario: Scenario::Standard,
            horizon: None,
            seed: 0,
            online: OnlineConfig::default(),
            ccm_dir,
            out_dir: None,
            tube_samples: 20_000,
        }
    }
}

/// Error selector for the tracking metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorSelector {
    FullState,
    /// First two state components.
    Position,
}

/// Root-mean-square tracking error over a completed log.
pub fn rmse(log: &TrajectoryLog, selector: ErrorSelector) -> Result<f64> {
    if log.rows.is_empty() {
        return Err(Error::InvalidConfig("empty trajectory log".into()));
    }
    let take = match selector {
        ErrorSelector::FullState => log.n,
        ErrorSelector::Position => 2.min(log.n),
    };
    let mut acc = 0.0;
    for row in &log.rows {
        let mut sq = 0.0;
        for i in 0..take {
            let d = row.x[i] - row.x_ref[i];
            sq += d * d;
        }
        acc += sq;
    }
    Ok((acc / log.rows.len() as f64).sqrt())
}

fn selector_for(model_id: &str) -> ErrorSelector {
    match model_id {
        "pvtol" => ErrorSelector::Position,
        _ => ErrorSelector::FullState,
    }
}

/// Initial displacement applied to the reference start for tracking runs.
pub fn initial_offset(model_id: &str, n: usize) -> DVector<f64> {
    let mut off = DVector::zeros(n);
    match model_id {
        "tsr" => {
            off[0] = 0.05;
            off[1] = 0.05;
        }
        "pvtol" => {
            off[0] = 1.0;
            off[1] = 1.0;
        }
        _ => {
            off[0] = 0.3;
        }
    }
    off
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingEntry {
    pub mean_ms: f64,
    pub std_ms: f64,
}

/// Metrics emitted by one paired experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse_ccm: f64,
    pub rmse_ol: f64,
    pub improvement_pct: f64,
    /// Fraction of base-controller steps inside the nominal tube.
    pub tube_containment: f64,
    /// Terminal precision flag; only meaningful for the deployment task.
    pub deployment_reached: Option<bool>,
    pub timing: Option<BTreeMap<String, TimingEntry>>,
    pub nominal_radius: f64,
    pub refined_radius: f64,
    /// 99th percentile of the estimation-error norm after warm-up.
    pub estimation_error_p99: f64,
    pub inputs_hash: String,
}

impl MetricsReport {
    /// Serialize with reals rounded to six decimal places (timing included
    /// as measured).
    pub fn to_json_rounded(&self) -> serde_json::Value {
        fn round6(v: f64) -> f64 {
            (v * 1e6).round() / 1e6
        }
        let mut value = serde_json::to_value(self).expect("report serializes");
        if let serde_json::Value::Object(map) = &mut value {
            for key in [
                "rmse_ccm",
                "rmse_ol",
                "improvement_pct",
                "tube_containment",
                "nominal_radius",
                "refined_radius",
                "estimation_error_p99",
            ] {
                if let Some(serde_json::Value::Number(num)) = map.get(key) {
                    if let Some(f) = num.as_f64() {
                        map.insert(
                            key.to_string(),
                            serde_json::Value::Number(
                                serde_json::Number::from_f64(round6(f)).expect("finite"),
                            ),
                        );
                    }
                }
            }
        }
        value
    }
}

/// High quantile of the estimation-error norm over post-warm-up rows.
pub fn estimation_error_quantile(log: &TrajectoryLog, warmup: usize, q: f64) -> f64 {
    let mut errs: Vec<f64> = log
        .rows
        .iter()
        .skip(warmup)
        .map(|r| (&r.h_hat - &r.h_true).norm())
        .collect();
    if errs.is_empty() {
        return 0.0;
    }
    errs.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
    let idx = ((errs.len() - 1) as f64 * q).round() as usize;
    errs[idx]
}

/// Run the same scenario with the base controller and with online
/// compensation, sharing the seed, reference, initial state, and true
/// disturbance; then evaluate metrics and tubes on the logs.
pub fn run_experiment(
    config: &ExperimentConfig,
) -> Result<(MetricsReport, TrajectoryLog, TrajectoryLog)> {
    let (model, true_field) = model_by_id(&config.model_id)?;
    let (metric, ctrl, meta) = load_checkpoint(&config.ccm_dir)?;
    if meta.model_id != config.model_id {
        return Err(Error::InvalidConfig(format!(
            "checkpoint was trained for '{}', experiment wants '{}'",
            meta.model_id, config.model_id
        )));
    }
    let disturbance = match config.scenario {
        Scenario::Standard => true_field,
        Scenario::ZeroDisturbance => DisturbanceField::zero(model.m),
    };

    let mut reference = gen_reference(&config.model_id, config.seed)?;
    if let Some(h) = config.horizon {
        if h <= config.online.buffer_capacity {
            return Err(Error::InvalidConfig(format!(
                "horizon {h} must exceed the warm-up length {}",
                config.online.buffer_capacity
            )));
        }
        reference.truncate(h);
    }

    let mut online_cfg = config.online.clone();
    online_cfg.seed = config.seed;
    online_cfg.control_interval = reference.dt;

    let x0 = &reference.samples[0].1 + initial_offset(&config.model_id, model.n);
    let opts_ccm = RunOptions {
        enable_online: false,
        initial_state: x0.clone(),
    };
    let opts_ol = RunOptions {
        enable_online: true,
        initial_state: x0,
    };
    let log_ccm = run_online(
        &model,
        &disturbance,
        &ctrl,
        &reference.samples,
        &online_cfg,
        &opts_ccm,
    )?;
    let log_ol = run_online(
        &model,
        &disturbance,
        &ctrl,
        &reference.samples,
        &online_cfg,
        &opts_ol,
    )?;
    debug_assert_eq!(log_ccm.inputs_hash, log_ol.inputs_hash);

    let selector = selector_for(&config.model_id);
    let rmse_ccm = rmse(&log_ccm, selector)?;
    let rmse_ol = rmse(&log_ol, selector)?;
    let improvement_pct = 100.0 * (1.0 - rmse_ol / rmse_ccm);

    // tubes from the trained metric and the runs
    let alpha_lo_emp = meta.alpha_lo_emp.unwrap_or(meta.alpha_lo);
    let alpha_hi_emp = meta.alpha_hi_emp.unwrap_or(meta.alpha_hi);
    let overshoot = crate::tube::overshoot(alpha_lo_emp, alpha_hi_emp)?;
    let visited: Vec<DVector<f64>> = log_ccm.rows.iter().map(|r| r.x.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x7ea1));
    let nominal_radius = tube_radius(
        &model,
        &metric,
        meta.lambda,
        disturbance.upper_bound,
        config.tube_samples,
        &mut rng,
        &visited,
    )?;
    let tube = TubeEstimate::new(
        overshoot,
        nominal_radius,
        alpha_lo_emp,
        model.n,
        Provenance::Nominal,
        config.tube_samples,
        disturbance.upper_bound,
    );
    let contained = log_ccm
        .rows
        .iter()
        .filter(|r| rci_contains(&tube, &r.x, &r.x_ref))
        .count();
    let tube_containment = contained as f64 / log_ccm.rows.len() as f64;

    let e_h_p99 = estimation_error_quantile(&log_ol, config.online.buffer_capacity, 0.99);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x7ea2));
    let refined_radius = refined_tube_radius(
        &model,
        &metric,
        meta.lambda,
        e_h_p99,
        config.tube_samples,
        &mut rng,
        &visited,
        false,
    )?;

    let deployment_reached = if config.model_id == "tsr" {
        let terminal = &log_ol.rows.last().expect("nonempty log").x;
        Some(terminal[0].abs() <= 0.01 && terminal[1].abs() <= 0.01)
    } else {
        None
    };

    let report = MetricsReport {
        rmse_ccm,
        rmse_ol,
        improvement_pct,
        tube_containment,
        deployment_reached,
        timing: None,
        nominal_radius,
        refined_radius,
        estimation_error_p99: e_h_p99,
        inputs_hash: log_ccm.inputs_hash.clone(),
    };

    if let Some(dir) = &config.out_dir {
        std::fs::create_dir_all(dir)?;
        log_ccm.write_csv(&dir.join("run_ccm.csv"))?;
        log_ol.write_csv(&dir.join("run_ol.csv"))?;
        std::fs::write(
            dir.join("metrics.json"),
            serde_json::to_string_pretty(&report.to_json_rounded())?,
        )?;
    }
    Ok((report, log_ccm, log_ol))
}

/// Wall-time of one moving-horizon update as a function of buffer
/// capacity. Only the update call is timed; plant stepping between
/// repetitions is excluded.
pub fn timing_bench(
    model: &ControlAffineModel,
    disturbance: &DisturbanceField,
    ctrl: &TrackingController,
    reference: &ReferenceTrajectory,
    base: &OnlineConfig,
    capacities: &[usize],
    repeats: usize,
) -> Result<Vec<(usize, TimingEntry)>> {
    let mut out = Vec::new();
    for &capacity in capacities {
        let mut cfg = base.clone();
        cfg.buffer_capacity = capacity;
        cfg.control_interval = reference.dt;
        let mut h_net = DisturbanceNet::new(model.n, model.m, &cfg.hidden, cfg.seed);
        h_net.time_scale = cfg.time_scale;
        let mut adam = adam_for(&h_net, cfg.learning_rate);
        let mut buffer = MemoryBuffer::new(capacity);
        let x0 = &reference.samples[0].1 + initial_offset(&model.id, model.n);
        let mut x = x0;
        let mut times_ms = Vec::with_capacity(repeats);
        for (k, (t, x_ref, u_ref)) in reference.samples.iter().enumerate() {
            let u_ccm = ctrl.control(&x, x_ref, u_ref);
            let u = if buffer.is_full() {
                let start = std::time::Instant::now();
                update_disturbance(&mut h_net, &buffer, model, &cfg, &mut adam)?;
                times_ms.push(start.elapsed().as_secs_f64() * 1e3);
                if times_ms.len() >= repeats {
                    break;
                }
                crate::online::control_ol(&u_ccm, &h_net, *t, &x)
            } else {
                u_ccm
            };
            buffer.push(*t, x.clone(), u.clone())?;
            x = rk4_step(model, &x, &u, *t, reference.dt, Some(disturbance))?;
            let _ = k;
        }
        if times_ms.is_empty() {
            return Err(Error::InvalidConfig(
                "reference too short to time any update".into(),
            ));
        }
        let mean = times_ms.iter().sum::<f64>() / times_ms.len() as f64;
        let var = times_ms
            .iter()
            .map(|t| (t - mean) * (t - mean))
            .sum::<f64>()
            / times_ms.len() as f64;
        out.push((
            capacity,
            TimingEntry {
                mean_ms: mean,
                std_ms: var.sqrt(),
            },
        ));
    }
    Ok(out)
}
