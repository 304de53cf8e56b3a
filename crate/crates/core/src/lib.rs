//! Tracking-control toolkit for control-affine systems: neural contraction
//! metrics with a matched feedback controller, online disturbance learning
//! over a moving horizon of recorded data, robust invariant tubes, and two
//! reproducible benchmarks.

pub mod ccm;
pub mod diffnet;
pub mod error;
pub mod experiment;
pub mod numdiff;
pub mod online;
pub mod sysmodels;
pub mod tube;

pub use error::{Error, Result};
