//! Closed-loop tracking runs: warm up on the base controller until the
//! memory window fills, then update the disturbance estimate and apply the
//! compensated law each control instant.

use nalgebra::DVector;
use sha2::{Digest, Sha256};

use super::rollout::update_disturbance;
use super::{adam_for, control_ol, DisturbanceNet, MemoryBuffer, OnlineConfig};
use crate::ccm::{FeedbackLaw, TrackingController};
use crate::error::{Error, Result};
use crate::sysmodels::{rk4_step, ControlAffineModel, DisturbanceField};

/// One control interval of a tracking run.
#[derive(Debug, Clone)]
pub struct LogRow {
    pub t: f64,
    pub x: DVector<f64>,
    pub x_ref: DVector<f64>,
    pub u: DVector<f64>,
    pub u_ccm: DVector<f64>,
    pub h_hat: DVector<f64>,
    pub h_true: DVector<f64>,
}

/// Recorded trajectory of one run.
#[derive(Debug, Clone)]
pub struct TrajectoryLog {
    pub model_id: String,
    pub n: usize,
    pub m: usize,
    pub rows: Vec<LogRow>,
    /// Digest of the run inputs (model, seed, initial state, reference,
    /// disturbance bound); paired runs must agree on it.
    pub inputs_hash: String,
    /// False when a domain violation ended the run early.
    pub completed: bool,
}

/// Options for a single tracking run.
#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Apply the moving-horizon compensation; otherwise the base
    /// controller runs alone.
    pub enable_online: bool,
    pub initial_state: DVector<f64>,
}

fn hash_inputs(
    model: &ControlAffineModel,
    disturbance: &DisturbanceField,
    reference: &[(f64, DVector<f64>, DVector<f64>)],
    x0: &DVector<f64>,
    seed: u64,
) -> String {
    let mut hasher = Sha256::new();
    hasher.update(model.id.as_bytes());
    hasher.update(seed.to_le_bytes());
    hasher.update(disturbance.upper_bound.to_le_bytes());
    for v in x0.iter() {
        hasher.update(v.to_le_bytes());
    }
    for (t, xr, ur) in reference {
        hasher.update(t.to_le_bytes());
        for v in xr.iter() {
            hasher.update(v.to_le_bytes());
        }
        for v in ur.iter() {
            hasher.update(v.to_le_bytes());
        }
    }
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Execute the full tracking loop over a sampled reference `(t, x*, u*)`.
///
/// Per instant: measure, update the estimator once the window is full (and
/// compensation is enabled), apply the control, push the applied tuple into
/// the buffer, then advance the plant one interval under the true
/// disturbance. A domain violation ends the run with the partial log.
pub fn run_online(
    model: &ControlAffineModel,
    disturbance: &DisturbanceField,
    ctrl: &TrackingController,
    reference: &[(f64, DVector<f64>, DVector<f64>)],
    config: &OnlineConfig,
    opts: &RunOptions,
) -> Result<TrajectoryLog> {
    config.validate()?;
    if reference.is_empty() {
        return Err(Error::InvalidConfig("reference must be nonempty".into()));
    }
    if reference.len() <= config.buffer_capacity {
        return Err(Error::InvalidConfig(format!(
            "horizon {} must exceed the warm-up length {}",
            reference.len(),
            config.buffer_capacity
        )));
    }
    let dt = config.control_interval;
    let mut h_net = DisturbanceNet::new(model.n, model.m, &config.hidden, config.seed);
    h_net.time_scale = config.time_scale;
    let mut adam = adam_for(&h_net, config.learning_rate);
    let mut buffer = MemoryBuffer::new(config.buffer_capacity);

    let mut log = TrajectoryLog {
        model_id: model.id.clone(),
        n: model.n,
        m: model.m,
        rows: Vec::with_capacity(reference.len()),
        inputs_hash: hash_inputs(model, disturbance, reference, &opts.initial_state, config.seed),
        completed: true,
    };

    let mut x = opts.initial_state.clone();
    for (t, x_ref, u_ref) in reference {
        let t = *t;
        let u_ccm = ctrl.control(&x, x_ref, u_ref);
        let compensate = opts.enable_online
            && (buffer.is_full() || config.compensate_during_warmup);
        if opts.enable_online && buffer.is_full() {
            update_disturbance(&mut h_net, &buffer, model, config, &mut adam)?;
        }
        let (u, h_hat) = if compensate {
            (
                control_ol(&u_ccm, &h_net, t, &x),
                h_net.eval(t, &x),
            )
        } else {
            (u_ccm.clone(), DVector::zeros(model.m))
        };
        log.rows.push(LogRow {
            t,
            x: x.clone(),
            x_ref: x_ref.clone(),
            u: u.clone(),
            u_ccm: u_ccm.clone(),
            h_hat,
            h_true: disturbance.h(t, &x),
        });
        buffer.push(t, x.clone(), u.clone())?;
        match rk4_step(model, &x, &u, t, dt, Some(disturbance)) {
            Ok(next) => x = next,
            Err(Error::DomainViolation(_)) => {
                log.completed = false;
                return Ok(log);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(log)
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

impl TrajectoryLog {
    /// CSV export: one row per control interval, reals with 17 significant
    /// digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let mut cols: Vec<String> = vec!["t".into()];
        for i in 0..self.n {
            cols.push(format!("x_{i}"));
        }
        for i in 0..self.n {
            cols.push(format!("xref_{i}"));
        }
        for i in 0..self.m {
            cols.push(format!("u_{i}"));
        }
        for i in 0..self.m {
            cols.push(format!("u_ccm_{i}"));
        }
        for i in 0..self.m {
            cols.push(format!("Hhat_{i}"));
        }
        for i in 0..self.m {
            cols.push(format!("htrue_{i}"));
        }
        out.push_str(&cols.join(","));
        out.push('\n');
        for row in &self.rows {
            let mut fields = vec![fmt17(row.t)];
            fields.extend(row.x.iter().map(|v| fmt17(*v)));
            fields.extend(row.x_ref.iter().map(|v| fmt17(*v)));
            fields.extend(row.u.iter().map(|v| fmt17(*v)));
            fields.extend(row.u_ccm.iter().map(|v| fmt17(*v)));
            fields.extend(row.h_hat.iter().map(|v| fmt17(*v)));
            fields.extend(row.h_true.iter().map(|v| fmt17(*v)));
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Parse a CSV trajectory log written by [`to_csv`](Self::to_csv).
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidConfig("empty trajectory file".into()))?;
        let names: Vec<&str> = header.split(',').map(|s| s.trim()).collect();
        if names.first() != Some(&"t") {
            return Err(Error::InvalidConfig(
                "trajectory header must start with 't'".into(),
            ));
        }
        let n = names.iter().filter(|c| c.starts_with("x_")).count();
        let m = names.iter().filter(|c| c.starts_with("u_ccm_")).count();
        let expected = 1 + 2 * n + 3 * m + m;
        if names.len() != expected || n == 0 || m == 0 {
            return Err(Error::InvalidConfig(format!(
                "unexpected trajectory header with {} columns",
                names.len()
            )));
        }
        let mut rows = Vec::new();
        for (k, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidConfig(format!("row {k}: {e}")))?;
            if vals.len() != expected {
                return Err(Error::InvalidConfig(format!(
                    "row {k} has {} fields, expected {expected}",
                    vals.len()
                )));
            }
            let mut it = vals.into_iter();
            let t = it.next().unwrap();
            let take = |it: &mut std::vec::IntoIter<f64>, k: usize| {
                DVector::from_iterator(k, it.by_ref().take(k))
            };
            rows.push(LogRow {
                t,
                x: take(&mut it, n),
                x_ref: take(&mut it, n),
                u: take(&mut it, m),
                u_ccm: take(&mut it, m),
                h_hat: take(&mut it, m),
                h_true: take(&mut it, m),
            });
        }
        Ok(TrajectoryLog {
            model_id: String::new(),
            n,
            m,
            rows,
            inputs_hash: String::new(),
            completed: true,
        })
    }

    pub fn read_csv(path: &std::path::Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}
