use crate::error::{Error, Result};

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step_count: u64,
}

impl Adam {
    pub fn new(num_params: usize, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step_count: 0,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update. Non-finite gradients leave everything untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                context: "optimizer state",
                expected: self.m.len(),
                got: if params.len() != self.m.len() {
                    params.len()
                } else {
                    grads.len()
                },
            });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_sign_step() {
        let mut opt = Adam::new(2, 0.01).unwrap();
        let mut p = [0.0, 0.0];
        opt.step(&mut p, &[3.5, -0.2]).unwrap();
        assert!((p[0] + 0.01).abs() < 1e-8);
        assert!((p[1] - 0.01).abs() < 1e-7);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut opt = Adam::new(1, 0.1).unwrap();
        let mut p = [1.25];
        opt.step(&mut p, &[0.0]).unwrap();
        assert_eq!(p, [1.25]);
    }

    #[test]
    fn non_finite_gradient_rejected_without_change() {
        let mut opt = Adam::new(1, 0.1).unwrap();
        let mut p = [1.0];
        opt.step(&mut p, &[0.5]).unwrap();
        let before = opt.clone();
        assert!(opt.step(&mut p, &[f64::NAN]).is_err());
        assert!(opt.step(&mut p, &[f64::INFINITY]).is_err());
        assert_eq!(opt, before);
    }

    #[test]
    fn length_mismatch_rejected() {
        let mut opt = Adam::new(2, 0.1).unwrap();
        assert!(opt.step(&mut [0.0], &[0.0]).is_err());
        assert!(Adam::new(2, 0.0).is_err());
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut opt = Adam::new(1, 0.1).unwrap();
        let mut theta = [0.0];
        for _ in 0..200 {
            let g = 2.0 * (theta[0] - 5.0);
            opt.step(&mut theta, &[g]).unwrap();
        }
        assert!((theta[0] - 5.0).abs() < 0.1, "theta = {}", theta[0]);
    }
}
