use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Multiplies the learning rate by `gamma` every `step_epochs` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLr {
    pub step_epochs: usize,
    pub gamma: f64,
}

/// Hyperparameters of one optimized component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr: f64,
    pub scheduler: StepLr,
}

impl Schedule {
    pub const fn new(lr: f64, step_epochs: usize, gamma: f64) -> Self {
        Self {
            lr,
            scheduler: StepLr { step_epochs, gamma },
        }
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("{what}: learning rate must be > 0")));
        }
        if !(self.scheduler.gamma > 0.0 && self.scheduler.gamma <= 1.0) {
            return Err(Error::Config(format!("{what}: gamma must lie in (0, 1]")));
        }
        if self.scheduler.step_epochs == 0 {
            return Err(Error::Config(format!("{what}: scheduler step must be >= 1")));
        }
        Ok(())
    }
}

/// Adam with a step learning-rate schedule.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    lr: f64,
    scheduler: StepLr,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(schedule: Schedule) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr: schedule.lr,
            scheduler: schedule.scheduler,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies the schedule for the start of `epoch`; returns the rate in
    /// effect for that epoch.
    pub fn scheduler_step(&mut self, epoch: usize) -> f64 {
        if epoch > 0 && epoch % self.scheduler.step_epochs == 0 {
            self.lr *= self.scheduler.gamma;
        }
        self.lr
    }

    /// One Adam update. `grads[i]` must have the length of `params[i]`.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim("optimizer gradient list", params.len(), grads.len()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::dim(format!("gradient of parameter {i}"), p.len(), g.len()));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { param: i });
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for k in 0..p.len() {
                let gk = g[k];
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn adam(lr: f64) -> Adam {
        Adam::new(Schedule::new(lr, 1000, 1.0))
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut opt = adam(0.1);
        let mut w = vec![1.5, -2.0];
        opt.step(&mut [&mut w[..]], &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(w, vec![1.5, -2.0]);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn quadratic_converges() {
        let mut opt = adam(0.1);
        let mut w = [1.0];
        for _ in 0..200 {
            let g = vec![2.0 * w[0]];
            opt.step(&mut [&mut w[..]], &[g]).unwrap();
        }
        assert!(w[0].abs() < 1e-3, "w = {}", w[0]);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        for &g in &[1.0, -1.0] {
            let mut opt = adam(0.01);
            let mut w = [0.0];
            opt.step(&mut [&mut w[..]], &[vec![g]]).unwrap();
            let expected = -0.01 * g.signum() * (1.0 - 1e-8);
            assert!((w[0] - expected).abs() < 1e-15, "{} vs {}", w[0], expected);
        }
    }

    #[test]
    fn nan_gradient_is_reported_and_nothing_moves() {
        let mut opt = adam(0.1);
        let mut a = [1.0];
        let mut b = [2.0];
        let err = opt
            .step(&mut [&mut a[..], &mut b[..]], &[vec![0.5], vec![f64::NAN]])
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { param: 1 }));
        assert_eq!((a[0], b[0]), (1.0, 2.0));
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn step_schedule() {
        let mut opt = Adam::new(Schedule::new(1e-2, 500, 0.1));
        for e in 0..500 {
            assert_eq!(opt.scheduler_step(e), 1e-2);
        }
        assert!((opt.scheduler_step(500) - 1e-3).abs() < 1e-18);

        let mut opt = Adam::new(Schedule::new(5e-5, 100, 0.9));
        let mut lr = 0.0;
        for e in 0..=300 {
            lr = opt.scheduler_step(e);
        }
        assert!((lr - 5e-5 * 0.9f64.powi(3)).abs() < 1e-18);
    }

    #[test]
    fn schedule_validation() {
        assert!(Schedule::new(0.0, 10, 0.5).validate("x").is_err());
        assert!(Schedule::new(1e-3, 10, 1.5).validate("x").is_err());
        assert!(Schedule::new(1e-3, 0, 0.5).validate("x").is_err());
        assert!(Schedule::new(1e-3, 10, 1.0).validate("x").is_ok());
    }
}
