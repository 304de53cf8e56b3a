//! Online disturbance learning: fixed-capacity memory buffers of recorded
//! motion, differentiable virtual-dynamics rollouts, the moving-horizon
//! update of the disturbance network, and the compensated control law.

mod rollout;
mod run;

pub use rollout::{
    update_disturbance, virtual_rollout, virtual_rollout_with_field, window_loss, UpdateReport,
};
pub use run::{run_online, LogRow, RunOptions, TrajectoryLog};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::diffnet::{Activation, AdamState, DenseNet};
use crate::error::{Error, Result};
use crate::sysmodels::DisturbanceField;

/// Fixed-capacity window of timestamped (state, control) tuples, ordered
/// oldest to newest. Once full, a push evicts the oldest tuple.
#[derive(Debug, Clone)]
pub struct MemoryBuffer {
    capacity: usize,
    entries: std::collections::VecDeque<(f64, DVector<f64>, DVector<f64>)>,
}

impl MemoryBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 2, "buffer needs at least two slots");
        MemoryBuffer {
            capacity,
            entries: std::collections::VecDeque::with_capacity(capacity + 1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    /// Append a tuple; evicts the oldest entry iff the buffer was full.
    pub fn push(&mut self, t: f64, x: DVector<f64>, u: DVector<f64>) -> Result<()> {
        if let Some((last, _, _)) = self.entries.back() {
            if t <= *last {
                return Err(Error::NonMonotoneTimestamp {
                    prev: *last,
                    next: t,
                });
            }
        }
        self.entries.push_back((t, x, u));
        if self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &(f64, DVector<f64>, DVector<f64>)> {
        self.entries.iter()
    }

    pub fn get(&self, i: usize) -> &(f64, DVector<f64>, DVector<f64>) {
        &self.entries[i]
    }
}

/// Perceptron estimating the matched disturbance from `(t, x)`. The final
/// layer starts at zero so the estimate is identically zero until the
/// first update, which keeps the compensated law equal to the base law.
#[derive(Debug, Clone)]
pub struct DisturbanceNet {
    net: DenseNet,
    /// Simulation time is multiplied by this factor before entering the
    /// net, keeping the activations in range over long runs.
    pub time_scale: f64,
    n: usize,
    m: usize,
}

pub const DEFAULT_TIME_SCALE: f64 = 0.1;

impl DisturbanceNet {
    pub fn new(n: usize, m: usize, hidden: &[usize], seed: u64) -> Self {
        let mut widths = vec![n + 1];
        widths.extend_from_slice(hidden);
        widths.push(m);
        let mut net = DenseNet::xavier(&widths, Activation::Tanh, seed);
        net.zero_final_layer();
        DisturbanceNet {
            net,
            time_scale: DEFAULT_TIME_SCALE,
            n,
            m,
        }
    }

    /// Two hidden layers of width 128.
    pub fn standard(n: usize, m: usize, seed: u64) -> Self {
        Self::new(n, m, &[128, 128], seed)
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn output_dim(&self) -> usize {
        self.m
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut DenseNet {
        &mut self.net
    }

    fn input(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.n + 1);
        y[0] = t * self.time_scale;
        y.rows_mut(1, self.n).copy_from(x);
        y
    }

    /// Disturbance estimate at `(t, x)`.
    pub fn eval(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        self.net
            .forward(&self.input(t, x))
            .expect("dimensions fixed at construction")
    }

    /// View the estimate as a disturbance field (e.g. to drive plain
    /// rollouts through the shared integrator).
    pub fn as_field(&self) -> DisturbanceField {
        let clone = self.clone();
        DisturbanceField::new(
            std::sync::Arc::new(move |t, x| clone.eval(t, x)),
            f64::INFINITY,
        )
    }
}

/// Moving-horizon learner configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OnlineConfig {
    /// Memory-buffer capacity.
    pub buffer_capacity: usize,
    /// Adam steps per control interval.
    pub epochs: usize,
    pub learning_rate: f64,
    /// Control interval, which equals the integrator step.
    pub control_interval: f64,
    /// Apply the compensation term even before the buffers fill. Off by
    /// default: the warm-up phase tracks with the base controller alone.
    pub compensate_during_warmup: bool,
    pub hidden: Vec<usize>,
    pub time_scale: f64,
    pub seed: u64,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig {
            buffer_capacity: 20,
            epochs: 2,
            learning_rate: 3e-3,
            control_interval: 0.01,
            compensate_during_warmup: false,
            hidden: vec![128, 128],
            time_scale: DEFAULT_TIME_SCALE,
            seed: 0,
        }
    }
}

impl OnlineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.buffer_capacity < 2 {
            return Err(Error::InvalidConfig(
                "buffer capacity must be at least 2".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.control_interval <= 0.0 {
            return Err(Error::InvalidConfig(
                "control interval must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Compensated control law: subtract the current disturbance estimate from
/// the base control. No clamping; constraint handling belongs to planning.
pub fn control_ol(
    u_ccm: &DVector<f64>,
    h_net: &DisturbanceNet,
    t: f64,
    x: &DVector<f64>,
) -> DVector<f64> {
    u_ccm - h_net.eval(t, x)
}

/// Adam state sized for a disturbance net.
pub fn adam_for(h_net: &DisturbanceNet, learning_rate: f64) -> AdamState {
    AdamState::new(h_net.net().param_count(), learning_rate)
}
