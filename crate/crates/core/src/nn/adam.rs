//! Adam with bias correction and L2 weight decay folded into the gradient.

use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.002,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    /// One moment buffer pair per parameter tensor of the given sizes.
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update in place. Gradients are checked for finiteness
    /// before anything is modified; `label` prefixes parameter names in errors.
    pub fn update(
        &mut self,
        label: &str,
        params: Vec<(String, &mut [f64])>,
        grads: &[&[f64]],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::Shape(format!(
                "{} parameter tensors, {} gradients, {} moment buffers",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for ((name, p), (g, m)) in params.iter().zip(grads.iter().zip(&self.first)) {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::Shape(format!(
                    "{label}.{name}: {} values, {} gradients, {} moments",
                    p.len(),
                    g.len(),
                    m.len()
                )));
            }
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::Training {
                    step: self.step,
                    detail: format!("non-finite gradient in {label}.{name}[{i}]"),
                });
            }
        }

        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (((_, p), g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for i in 0..p.len() {
                let gi = g[i] + weight_decay * p[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn write_to(&self, c: &mut Container, prefix: &str) {
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        c.put_f64(format!("{prefix}.config"), vec![beta1, beta2, eps, weight_decay]);
        c.put_u64(format!("{prefix}.step"), vec![self.step]);
        c.put_u64(
            format!("{prefix}.sizes"),
            self.first.iter().map(|m| m.len() as u64).collect(),
        );
        c.put_f64(format!("{prefix}.first"), self.first.concat());
        c.put_f64(format!("{prefix}.second"), self.second.concat());
    }

    pub fn read_from(c: &Container, prefix: &str) -> Result<Self> {
        let cfg = c.f64s(&format!("{prefix}.config"))?;
        let [beta1, beta2, eps, weight_decay] = cfg[..] else {
            return Err(Error::Load(format!("{prefix}.config: expected 4 values")));
        };
        let sizes = c.u64s(&format!("{prefix}.sizes"))?;
        let split = |flat: &[f64]| -> Result<Vec<Vec<f64>>> {
            if flat.len() as u64 != sizes.iter().sum::<u64>() {
                return Err(Error::Load(format!("{prefix}: moment length mismatch")));
            }
            let mut out = Vec::with_capacity(sizes.len());
            let mut pos = 0;
            for &n in sizes {
                out.push(flat[pos..pos + n as usize].to_vec());
                pos += n as usize;
            }
            Ok(out)
        };
        Ok(Self {
            config: AdamConfig {
                beta1,
                beta2,
                eps,
                weight_decay,
            },
            step: c.u64_scalar(&format!("{prefix}.step"))?,
            first: split(c.f64s(&format!("{prefix}.first"))?)?,
            second: split(c.f64s(&format!("{prefix}.second"))?)?,
        })
    }
}
