//! Differentiable-computation core: gradient tape, dense networks, exact
//! input derivatives, and the Adam optimizer.

pub mod adam;
pub mod net;
pub mod tape;

pub use adam::AdamState;
pub use net::{concat_scalar_vec, Activation, DenseNet, StagedNet, NET_SCHEMA_VERSION};
pub use tape::{concat_rows, hstack_cols, CustomOp, Gradients, Tape, Var};

use nalgebra::{DMatrix, DVector};

/// A map whose value and exact directional derivative are both available.
pub trait DifferentiableMap {
    fn eval(&self, x: &DVector<f64>) -> DMatrix<f64>;
    /// Jacobian-vector product at `x` along `v`, computed analytically.
    fn jvp(&self, x: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64>;
}

/// Exact directional derivative of `f` at `x` along `v`.
pub fn directional_derivative(
    f: &dyn DifferentiableMap,
    x: &DVector<f64>,
    v: &DVector<f64>,
) -> DMatrix<f64> {
    assert_eq!(x.len(), v.len(), "direction must match input length");
    f.jvp(x, v)
}

impl DifferentiableMap for DenseNet {
    fn eval(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let y = self.forward(x).expect("input length mismatch");
        DMatrix::from_column_slice(y.len(), 1, y.as_slice())
    }

    fn jvp(&self, x: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
        let (_, t) = self.forward_jvp(x, v).expect("input length mismatch");
        DMatrix::from_column_slice(t.len(), 1, t.as_slice())
    }
}
