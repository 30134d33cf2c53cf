use serde::{Deserialize, Serialize};

use super::{Matrix, Mlp, MlpGrads};
use crate::error::{EmmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Moments {
    weight: Matrix,
    bias: Vec<f64>,
}

/// Adaptive-moment optimizer state for one [`Mlp`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Moments>,
    second: Vec<Moments>,
}

impl Adam {
    pub fn new(params: &Mlp, config: AdamConfig) -> Self {
        let zeros = || {
            params
                .layers()
                .iter()
                .map(|l| Moments {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Applies one bias-corrected update. A non-finite gradient aborts the
    /// step before anything is modified.
    pub fn step(&mut self, params: &mut Mlp, grads: &MlpGrads) -> Result<()> {
        if grads.layers.len() != params.layers().len() || self.first.len() != grads.layers.len() {
            return Err(EmmError::shape("gradient/parameter layer count mismatch"));
        }
        for (g, p) in grads.layers.iter().zip(params.layers()) {
            if g.weight.shape() != p.weight.shape() || g.bias.len() != p.bias.len() {
                return Err(EmmError::shape("gradient shape differs from parameter shape"));
            }
        }
        if !grads.is_finite() {
            return Err(EmmError::Training("non-finite gradient".into()));
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        };
        for (((layer, g), m), v) in params
            .layers_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            update(
                layer.weight.data_mut(),
                g.weight.data(),
                m.weight.data_mut(),
                v.weight.data_mut(),
            );
            update(&mut layer.bias, &g.bias, &mut m.bias, &mut v.bias);
        }
        Ok(())
    }
}
