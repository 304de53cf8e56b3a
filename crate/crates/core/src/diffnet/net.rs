//! Dense feed-forward networks with exact input derivatives.
//!
//! Two evaluation paths exist: a plain path over nalgebra values for
//! simulation hot loops, and a taped path for training. Both use the same
//! operation order so their results agree bitwise.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{concat_rows, Tape, Var};
use crate::error::{Error, Result};

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    SmoothRelu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::SmoothRelu => {
                if x > 30.0 {
                    x
                } else {
                    x.exp().ln_1p()
                }
            }
        }
    }

    /// Derivative expressed through the pre-activation.
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::SmoothRelu => 1.0 / (1.0 + (-x).exp()),
        }
    }
}

/// Fully connected network. Weights are stored `out x in`; the final layer
/// is linear, every hidden layer applies its activation.
#[derive(Debug, Clone)]
pub struct DenseNet {
    widths: Vec<usize>,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
    activations: Vec<Activation>,
    rng_seed: u64,
}

impl DenseNet {
    /// Uniform Xavier/Glorot initialization, deterministic in `seed`.
    pub fn xavier(widths: &[usize], activation: Activation, seed: u64) -> Self {
        assert!(widths.len() >= 2, "need at least input and output widths");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(DMatrix::from_fn(fan_out, fan_in, |_, _| {
                rng.gen_range(-a..a)
            }));
            biases.push(DVector::zeros(fan_out));
        }
        DenseNet {
            widths: widths.to_vec(),
            weights,
            biases,
            activations: vec![activation; widths.len().saturating_sub(2)],
            rng_seed: seed,
        }
    }

    /// All-zero parameters (useful as a neutral function).
    pub fn zeros(widths: &[usize], activation: Activation) -> Self {
        let mut net = Self::xavier(widths, activation, 0);
        for w in &mut net.weights {
            w.fill(0.0);
        }
        net
    }

    /// Zero the last affine layer so the net initially outputs zero.
    pub fn zero_final_layer(&mut self) {
        let last = self.weights.len() - 1;
        self.weights[last].fill(0.0);
        self.biases[last].fill(0.0);
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    fn layer_count(&self) -> usize {
        self.weights.len()
    }

    fn activation(&self, layer: usize) -> Activation {
        self.activations[layer]
    }

    /// Deterministic forward evaluation.
    pub fn forward(&self, input: &DVector<f64>) -> Result<DVector<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "net expects input of length {}, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        let mut h = input.clone();
        for l in 0..self.layer_count() {
            h = &self.weights[l] * h + &self.biases[l];
            if l + 1 < self.layer_count() {
                let act = self.activation(l);
                h.apply(|x| *x = act.apply(*x));
            }
        }
        Ok(h)
    }

    /// Forward value together with the Jacobian-vector product `J(x) v`,
    /// both exact.
    pub fn forward_jvp(
        &self,
        input: &DVector<f64>,
        tangent: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        if input.len() != self.input_dim() || tangent.len() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "net expects input/tangent of length {}, got {}/{}",
                self.input_dim(),
                input.len(),
                tangent.len()
            )));
        }
        let mut h = input.clone();
        let mut t = tangent.clone();
        for l in 0..self.layer_count() {
            h = &self.weights[l] * h + &self.biases[l];
            t = &self.weights[l] * t;
            if l + 1 < self.layer_count() {
                let act = self.activation(l);
                for i in 0..h.len() {
                    t[i] *= act.derivative(h[i]);
                    h[i] = act.apply(h[i]);
                }
            }
        }
        Ok((h, t))
    }

    /// Jacobian of the output w.r.t. the input; row i is the gradient of
    /// output i. Assembled from the layer-wise chain product.
    pub fn input_jacobian(&self, input: &DVector<f64>) -> Result<DMatrix<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "net expects input of length {}, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        let mut h = input.clone();
        let mut jac = self.weights[0].clone();
        for l in 0..self.layer_count() {
            if l > 0 {
                jac = &self.weights[l] * jac;
            }
            if l + 1 < self.layer_count() {
                let z = &self.weights[l] * &h + &self.biases[l];
                let act = self.activation(l);
                for i in 0..z.len() {
                    let d = act.derivative(z[i]);
                    jac.row_mut(i).scale_mut(d);
                }
                h = z.map(|x| act.apply(x));
            }
        }
        Ok(jac)
    }

    /// Flatten parameters layer by layer (weights column-major, then bias).
    pub fn flatten(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in 0..self.layer_count() {
            out.extend(self.weights[l].iter());
            out.extend(self.biases[l].iter());
        }
        DVector::from_vec(out)
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn unflatten(&mut self, flat: &DVector<f64>) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut k = 0;
        for l in 0..self.layer_count() {
            for v in self.weights[l].iter_mut() {
                *v = flat[k];
                k += 1;
            }
            for v in self.biases[l].iter_mut() {
                *v = flat[k];
                k += 1;
            }
        }
        Ok(())
    }

    /// Record the parameters on a tape as differentiable leaves.
    pub fn stage<'t>(&self, tape: &'t Tape) -> StagedNet<'t> {
        self.stage_inner(tape, true)
    }

    /// Record the parameters as constants (frozen net).
    pub fn stage_frozen<'t>(&self, tape: &'t Tape) -> StagedNet<'t> {
        self.stage_inner(tape, false)
    }

    fn stage_inner<'t>(&self, tape: &'t Tape, trainable: bool) -> StagedNet<'t> {
        let weights = self
            .weights
            .iter()
            .map(|w| {
                if trainable {
                    tape.param(w.clone())
                } else {
                    tape.constant(w.clone())
                }
            })
            .collect();
        let biases = self
            .biases
            .iter()
            .map(|b| {
                let m = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
                if trainable {
                    tape.param(m)
                } else {
                    tape.constant(m)
                }
            })
            .collect();
        StagedNet {
            weights,
            biases,
            activations: self.activations.clone(),
        }
    }
}

/// A network's parameters recorded on a tape.
pub struct StagedNet<'t> {
    weights: Vec<Var<'t>>,
    biases: Vec<Var<'t>>,
    activations: Vec<Activation>,
}

impl<'t> StagedNet<'t> {
    pub fn forward(&self, input: Var<'t>) -> Var<'t> {
        let mut h = input;
        let layers = self.weights.len();
        for l in 0..layers {
            h = self.weights[l].matmul(h) + self.biases[l];
            if l + 1 < layers {
                h = match self.activations[l] {
                    Activation::Tanh => h.tanh(),
                    Activation::SmoothRelu => h.softplus(),
                };
            }
        }
        h
    }

    /// Taped forward and Jacobian-vector product. The tangent may itself be
    /// a tape value, so the product stays differentiable end to end.
    pub fn forward_jvp(&self, input: Var<'t>, tangent: Var<'t>) -> (Var<'t>, Var<'t>) {
        let mut h = input;
        let mut t = tangent;
        let layers = self.weights.len();
        for l in 0..layers {
            h = self.weights[l].matmul(h) + self.biases[l];
            t = self.weights[l].matmul(t);
            if l + 1 < layers {
                match self.activations[l] {
                    Activation::Tanh => {
                        let a = h.tanh();
                        // tanh' = 1 - tanh^2
                        let dp = a.emul(a).scale(-1.0).add_scalar(1.0);
                        t = dp.emul(t);
                        h = a;
                    }
                    Activation::SmoothRelu => {
                        // softplus' = sigmoid = tanh(x/2)/2 + 1/2
                        let dp = h.scale(0.5).tanh().scale(0.5).add_scalar(0.5);
                        t = dp.emul(t);
                        h = h.softplus();
                    }
                }
            }
        }
        (h, t)
    }

    /// Like [`forward_jvp`](Self::forward_jvp) but propagates several
    /// tangents through one shared forward chain.
    pub fn forward_multi_jvp(
        &self,
        input: Var<'t>,
        tangents: &[Var<'t>],
    ) -> (Var<'t>, Vec<Var<'t>>) {
        let mut h = input;
        let mut ts: Vec<Var<'t>> = tangents.to_vec();
        let layers = self.weights.len();
        for l in 0..layers {
            h = self.weights[l].matmul(h) + self.biases[l];
            for t in &mut ts {
                *t = self.weights[l].matmul(*t);
            }
            if l + 1 < layers {
                let dp = match self.activations[l] {
                    Activation::Tanh => {
                        let a = h.tanh();
                        let dp = a.emul(a).scale(-1.0).add_scalar(1.0);
                        h = a;
                        dp
                    }
                    Activation::SmoothRelu => {
                        let dp = h.scale(0.5).tanh().scale(0.5).add_scalar(0.5);
                        h = h.softplus();
                        dp
                    }
                };
                for t in &mut ts {
                    *t = dp.emul(*t);
                }
            }
        }
        (h, ts)
    }

    /// Collect the adjoints of the staged parameters in `flatten` order.
    pub fn grad_flat(&self, grads: &super::tape::Gradients) -> DVector<f64> {
        let mut out = Vec::new();
        for l in 0..self.weights.len() {
            out.extend(grads.wrt(self.weights[l]).iter());
            out.extend(grads.wrt(self.biases[l]).iter());
        }
        DVector::from_vec(out)
    }
}

/// Build a taped input vector `[t_scaled, x...]` from a constant scalar and
/// a tape variable.
pub fn concat_scalar_vec<'t>(tape: &'t Tape, s: f64, v: Var<'t>) -> Var<'t> {
    let sv = tape.scalar(s);
    concat_rows(tape, &[sv, v])
}

#[derive(Serialize, Deserialize)]
struct NetDoc {
    schema_version: u32,
    layer_widths: Vec<usize>,
    activation: Vec<Activation>,
    /// Row-major weight matrices, one per layer.
    weights: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
    rng_seed: u64,
}

pub const NET_SCHEMA_VERSION: u32 = 1;

impl DenseNet {
    pub fn to_json(&self) -> serde_json::Value {
        let weights = self
            .weights
            .iter()
            .map(|w| {
                (0..w.nrows())
                    .map(|i| w.row(i).iter().copied().collect())
                    .collect()
            })
            .collect();
        let doc = NetDoc {
            schema_version: NET_SCHEMA_VERSION,
            layer_widths: self.widths.clone(),
            activation: self.activations.clone(),
            weights,
            biases: self.biases.iter().map(|b| b.as_slice().to_vec()).collect(),
            rng_seed: self.rng_seed,
        };
        serde_json::to_value(doc).expect("net serialization cannot fail")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let doc: NetDoc = serde_json::from_value(value.clone())?;
        if doc.schema_version != NET_SCHEMA_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported net schema version {}",
                doc.schema_version
            )));
        }
        if doc.layer_widths.len() < 2
            || doc.weights.len() != doc.layer_widths.len() - 1
            || doc.biases.len() != doc.weights.len()
            || doc.activation.len() != doc.layer_widths.len() - 2
        {
            return Err(Error::Checkpoint("inconsistent net document".into()));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..doc.weights.len() {
            let (rows, cols) = (doc.layer_widths[l + 1], doc.layer_widths[l]);
            let w = &doc.weights[l];
            if w.len() != rows || w.iter().any(|r| r.len() != cols) {
                return Err(Error::Checkpoint(format!("bad weight shape in layer {l}")));
            }
            let flat: Vec<f64> = w.iter().flatten().copied().collect();
            weights.push(DMatrix::from_row_slice(rows, cols, &flat));
            if doc.biases[l].len() != rows {
                return Err(Error::Checkpoint(format!("bad bias shape in layer {l}")));
            }
            biases.push(DVector::from_column_slice(&doc.biases[l]));
        }
        Ok(DenseNet {
            widths: doc.layer_widths,
            weights,
            biases,
            activations: doc.activation,
            rng_seed: doc.rng_seed,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_json())?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Straight-line reimplementation of the layered formula, kept
    /// deliberately independent of the library path.
    fn oracle_forward(net: &DenseNet, x: &DVector<f64>) -> DVector<f64> {
        let mut h: Vec<f64> = x.iter().copied().collect();
        for l in 0..net.weights.len() {
            let w = &net.weights[l];
            let mut next = vec![0.0; w.nrows()];
            for i in 0..w.nrows() {
                let mut acc = net.biases[l][i];
                for j in 0..w.ncols() {
                    acc += w[(i, j)] * h[j];
                }
                next[i] = acc;
            }
            if l + 1 < net.weights.len() {
                for v in &mut next {
                    *v = net.activations[l].apply(*v);
                }
            }
            h = next;
        }
        DVector::from_vec(h)
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = DenseNet::zeros(&[3, 5, 2], Activation::Tanh);
        let y = net.forward(&DVector::from_vec(vec![1.0, -2.0, 0.5])).unwrap();
        assert_eq!(y, DVector::zeros(2));
    }

    #[test]
    fn identity_linear_layer() {
        let mut net = DenseNet::zeros(&[3, 3], Activation::Tanh);
        net.weights[0] = DMatrix::identity(3, 3);
        let x = DVector::from_vec(vec![0.3, -1.2, 2.0]);
        assert_eq!(net.forward(&x).unwrap(), x);
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let net = DenseNet::xavier(&[4, 7, 6, 3], Activation::Tanh, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let x = DVector::from_fn(4, |_, _| rng.gen_range(-2.0..2.0));
            let y = net.forward(&x).unwrap();
            let y_ref = oracle_forward(&net, &x);
            assert_relative_eq!(y, y_ref, epsilon = 1e-14);
        }
    }

    #[test]
    fn shape_mismatch_reported() {
        let net = DenseNet::xavier(&[4, 3, 2], Activation::Tanh, 0);
        let bad = DVector::zeros(5);
        assert!(matches!(net.forward(&bad), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn taped_forward_matches_plain_bitwise() {
        let net = DenseNet::xavier(&[3, 9, 8, 2], Activation::Tanh, 21);
        let x = DVector::from_vec(vec![0.4, -0.9, 1.3]);
        let plain = net.forward(&x).unwrap();
        let tape = Tape::new();
        let staged = net.stage(&tape);
        let out = staged.forward(tape.constant_vec(&x));
        let taped = out.value();
        for i in 0..2 {
            assert_eq!(plain[i].to_bits(), taped[(i, 0)].to_bits());
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let net = DenseNet::xavier(&[4, 6, 5, 3], Activation::Tanh, 99);
        let doc = serde_json::to_string(&net.to_json()).unwrap();
        let back = DenseNet::from_json(&serde_json::from_str(&doc).unwrap()).unwrap();
        assert_eq!(net.widths, back.widths);
        assert_eq!(net.rng_seed, back.rng_seed);
        for l in 0..net.weights.len() {
            for (a, b) in net.weights[l].iter().zip(back.weights[l].iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
            for (a, b) in net.biases[l].iter().zip(back.biases[l].iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn deterministic_initialization() {
        let a = DenseNet::xavier(&[5, 8, 2], Activation::Tanh, 1234);
        let b = DenseNet::xavier(&[5, 8, 2], Activation::Tanh, 1234);
        for (wa, wb) in a.weights.iter().zip(&b.weights) {
            for (x, y) in wa.iter().zip(wb.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
