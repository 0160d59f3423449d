//! SGD with momentum under a linear-warmup cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::tensor::Matrix;

/// Linear warmup to `max_lr`, then cosine decay to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub max_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return 0.0;
        }
        if step < self.warmup_steps {
            return self.max_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        0.5 * self.max_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<Matrix>,
}

impl Sgd {
    pub fn new(momentum: f64, params: &[&Matrix]) -> Self {
        Self {
            momentum,
            velocity: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
        }
    }

    /// One update `v = mu v + g; p -= lr v`, in parameter order.
    pub fn step(&mut self, lr: f64, params: &mut [&mut Matrix], grads: &[&Matrix]) {
        debug_assert_eq!(params.len(), self.velocity.len());
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for (vv, gv) in v.data_mut().iter_mut().zip(g.data()) {
                *vv = self.momentum * *vv + gv;
            }
            if lr != 0.0 {
                p.axpy(-lr, v);
            }
        }
    }
}
