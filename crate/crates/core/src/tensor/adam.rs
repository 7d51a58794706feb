use std::collections::BTreeMap;

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
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

#[derive(Clone, Debug)]
struct Moments {
    shape: Vec<usize>,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with bias correction. Moments and their step counts are keyed by
/// parameter name and created lazily on first update.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update over all `(name, param, grad)` triples. Nothing is written
    /// if any gradient is non-finite or mis-shaped.
    pub fn step<F: Real>(
        &mut self,
        updates: &mut [(&str, &mut Tensor<F>, &Tensor<F>)],
    ) -> Result<()> {
        for (name, p, g) in updates.iter() {
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "parameter `{name}` {:?} vs gradient {:?}",
                        p.shape(),
                        g.shape()
                    ),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NanGradient((*name).to_string()));
            }
            if let Some(m) = self.moments.get(*name) {
                if m.shape != p.shape() {
                    return Err(Error::shape(
                        "adam_step",
                        format!(
                            "parameter `{name}` changed shape {:?} -> {:?}",
                            m.shape,
                            p.shape()
                        ),
                    ));
                }
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        for (name, p, g) in updates.iter_mut() {
            let mom = self
                .moments
                .entry((*name).to_string())
                .or_insert_with(|| Moments {
                    shape: p.shape().to_vec(),
                    t: 0,
                    m: vec![0.0; p.len()],
                    v: vec![0.0; p.len()],
                });
            mom.t += 1;
            let bc1 = 1.0 - beta1.powf(mom.t as f64);
            let bc2 = 1.0 - beta2.powf(mom.t as f64);
            for (i, (w, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gv = gv.to_f64();
                mom.m[i] = beta1 * mom.m[i] + (1.0 - beta1) * gv;
                mom.v[i] = beta2 * mom.v[i] + (1.0 - beta2) * gv * gv;
                let mhat = mom.m[i] / bc1;
                let vhat = mom.v[i] / bc2;
                *w = F::from_f64(w.to_f64() - lr * mhat / (vhat.sqrt() + eps));
            }
        }
        Ok(())
    }
}
