//! Optimizers and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Param;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Adam (coupled L2 weight decay, as in the common framework default) or SGD
/// with momentum 0.9.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum: f64,
    state: Vec<(Vec<f32>, Vec<f32>)>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f64) -> Self {
        Optimizer {
            kind,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.9,
            state: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Param], lr: f64) -> Result<()> {
        if self.state.is_empty() {
            self.state = params
                .iter()
                .map(|p| (vec![0.0; p.value.len()], vec![0.0; p.value.len()]))
                .collect();
        }
        if self.state.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {}",
                self.state.len(),
                params.len()
            )));
        }
        self.t += 1;
        let wd = self.weight_decay as f32;
        let lr32 = lr as f32;
        match self.kind {
            OptimizerKind::Adam => {
                let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
                let bc1 = 1.0 - self.beta1.powi(self.t as i32);
                let bc2 = 1.0 - self.beta2.powi(self.t as i32);
                let step = (lr / bc1) as f32;
                let bc2s = bc2.sqrt() as f32;
                let eps = self.eps as f32;
                for (p, (m, v)) in params.iter_mut().zip(self.state.iter_mut()) {
                    for i in 0..p.value.len() {
                        let g = p.grad[i] + wd * p.value[i];
                        m[i] = b1 * m[i] + (1.0 - b1) * g;
                        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                        p.value[i] -= step * m[i] / (v[i].sqrt() / bc2s + eps);
                    }
                }
            }
            OptimizerKind::Sgd => {
                let mu = self.momentum as f32;
                for (p, (buf, _)) in params.iter_mut().zip(self.state.iter_mut()) {
                    for i in 0..p.value.len() {
                        let g = p.grad[i] + wd * p.value[i];
                        buf[i] = mu * buf[i] + g;
                        p.value[i] -= lr32 * buf[i];
                    }
                }
            }
        }
        Ok(())
    }
}

/// Constant until `start`, then cosine to zero at `total` (epochs 1-based).
pub fn constant_then_cosine(base: f64, epoch: usize, start: usize, total: usize) -> f64 {
    if epoch < start || total <= start {
        return base;
    }
    let frac = ((epoch - start) as f64 / (total - start) as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Cosine annealing over `total` epochs without reaching zero on the last
/// one (epochs 1-based).
pub fn cosine(base: f64, epoch: usize, total: usize) -> f64 {
    let frac = (epoch.saturating_sub(1)) as f64 / total.max(1) as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
}
