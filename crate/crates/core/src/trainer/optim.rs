//! Adam with per-block learning rates and linear warmup.

use std::ops::Range;

use serde::{Deserialize, Serialize};

/// One block of parameters sharing a learning rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub range: Range<usize>,
    pub lr: f64,
    /// Number of steps over which the rate ramps linearly up to `lr`.
    pub warmup_steps: usize,
}

impl ParamGroup {
    /// Rate used at 0-based optimizer step `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * ((t + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl Adam {
    pub fn new(n_params: usize) -> Adam {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    /// Descends along `grad`. Parameters outside every group are untouched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], groups: &[ParamGroup]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        let t = self.t;
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for g in groups {
            let lr = g.lr_at(t);
            for i in g.range.clone() {
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let mhat = self.m[i] / bc1;
                let vhat = self.v[i] / bc2;
                params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_linear_then_flat() {
        let g = ParamGroup {
            range: 0..1,
            lr: 1.0,
            warmup_steps: 5,
        };
        let rates: Vec<f64> = (0..7).map(|t| g.lr_at(t)).collect();
        assert_eq!(rates, vec![0.2, 0.4, 0.6, 0.8, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut adam = Adam::new(3);
        let groups = [ParamGroup {
            range: 0..3,
            lr: 0.1,
            warmup_steps: 0,
        }];
        adam.step(&mut p, &[0.0; 3], &groups);
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![3.0, -4.0];
        let mut adam = Adam::new(2);
        let groups = [ParamGroup {
            range: 0..2,
            lr: 0.05,
            warmup_steps: 10,
        }];
        for _ in 0..2000 {
            let g = vec![2.0 * p[0], 2.0 * p[1]];
            adam.step(&mut p, &g, &groups);
        }
        assert!(p[0].abs() < 1e-3 && p[1].abs() < 1e-3, "{p:?}");
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![0.0, 0.0];
        let mut adam = Adam::new(2);
        let groups = [ParamGroup {
            range: 0..1,
            lr: 0.5,
            warmup_steps: 0,
        }];
        adam.step(&mut p, &[3.0, 3.0], &groups);
        assert!((p[0] + 0.5).abs() < 1e-6);
        assert_eq!(p[1], 0.0);
    }
}
