use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Adam moments for one flat parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
        }
    }

    /// One bias-corrected Adam update. Non-finite gradients leave both the
    /// parameters and the moments untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_len("adam_step params", self.m.len(), params.len())?;
        check_len("adam_step grads", self.m.len(), grads.len())?;
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {i}; adam step refused")));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grads_only_advance_the_counter() {
        let mut s = AdamState::new(3, 1e-3);
        let mut p = vec![1.0, -2.0, 3.0];
        s.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = AdamState::new(1, 1e-3);
        let mut p = vec![0.5];
        s.step(&mut p, &[1.0]).unwrap();
        assert!(((0.5 - p[0]) - 1e-3).abs() < 1e-10);
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut s = AdamState::new(2, 1e-2);
        let mut p = vec![0.3, 0.3];
        for k in 0..20 {
            let g = (k as f64).sin();
            s.step(&mut p, &[g, g]).unwrap();
        }
        assert_eq!(p[0], p[1]);
    }

    #[test]
    fn non_finite_gradient_is_refused() {
        let mut s = AdamState::new(2, 1e-2);
        let mut p = vec![0.3, 0.4];
        assert!(s.step(&mut p, &[f64::NAN, 0.0]).is_err());
        assert_eq!(p, vec![0.3, 0.4]);
        assert_eq!(s.step, 0);
    }
}
