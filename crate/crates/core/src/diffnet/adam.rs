//! Adam optimizer with bias correction.

use nalgebra::DVector;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamState {
    m: DVector<f64>,
    v: DVector<f64>,
    step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(dim: usize, learning_rate: f64) -> Self {
        AdamState {
            m: DVector::zeros(dim),
            v: DVector::zeros(dim),
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update in place.
    pub fn update(&mut self, params: &mut DVector<f64>, grad: &DVector<f64>) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam state has {} entries, got params {} / grad {}",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_roughly_lr() {
        let mut adam = AdamState::new(2, 0.01);
        let mut p = DVector::from_vec(vec![1.0, -3.0]);
        let g = DVector::from_vec(vec![250.0, -0.5]);
        adam.update(&mut p, &g).unwrap();
        // bias-corrected first step is lr * sign(g) up to epsilon effects
        let d0 = (p[0] - 1.0).abs();
        let d1 = (p[1] + 3.0).abs();
        assert!(d0 >= 0.99 * 0.01 && d0 <= 0.01, "step {d0}");
        assert!(d1 >= 0.99 * 0.01 && d1 <= 0.01, "step {d1}");
        assert!(p[0] < 1.0 && p[1] > -3.0);
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut adam = AdamState::new(3, 0.1);
        let mut p = DVector::from_vec(vec![0.5, -0.25, 2.0]);
        let orig = p.clone();
        let g = DVector::zeros(3);
        for _ in 0..50 {
            adam.update(&mut p, &g).unwrap();
        }
        assert_eq!(p, orig);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut adam = AdamState::new(1, 0.1);
        let mut p = DVector::from_vec(vec![-1.0]);
        for _ in 0..200 {
            let g = DVector::from_vec(vec![2.0 * (p[0] - 2.0)]);
            adam.update(&mut p, &g).unwrap();
        }
        assert!((p[0] - 2.0).abs() < 0.05, "theta = {}", p[0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut adam = AdamState::new(2, 0.1);
        let mut p = DVector::zeros(3);
        let g = DVector::zeros(3);
        assert!(matches!(
            adam.update(&mut p, &g),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn step_counter_increases() {
        let mut adam = AdamState::new(1, 0.1);
        let mut p = DVector::zeros(1);
        let g = DVector::from_vec(vec![1.0]);
        adam.update(&mut p, &g).unwrap();
        adam.update(&mut p, &g).unwrap();
        assert_eq!(adam.step_count(), 2);
    }
}
