use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: default_beta1(), beta2: default_beta2(), eps: default_eps() }
    }
}

/// Moment buffers for a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = shapes
            .into_iter()
            .map(|(r, c)| (Matrix::zeros(r, c), Matrix::zeros(r, c)))
            .unzip();
        AdamState { config, m, v, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update. Tensors whose `active` flag is false
    /// are skipped entirely (neither moments nor values change).
    pub fn step(
        &mut self,
        params: &mut [&mut Matrix],
        grads: &[&Matrix],
        active: Option<&[bool]>,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(format!(
                "adam state tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::shape(format!(
                    "tensor {i}: param {:?}, grad {:?}, state {:?}",
                    p.shape(),
                    g.shape(),
                    self.m[i].shape()
                )));
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powf(self.t as f64);
        let bc2 = 1.0 - beta2.powf(self.t as f64);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if active.is_some_and(|a| !a[i]) {
                continue;
            }
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            for (((pj, &gj), mj), vj) in
                p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m.iter_mut()).zip(v.iter_mut())
            {
                *mj = beta1 * *mj + (1.0 - beta1) * gj;
                *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                *pj -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
