//! Adaptive-moment optimizer with decoupled weight decay.

use crate::error::Result;
use crate::model::ModelParams;
use ndarray::Array2;

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

pub struct AdamW {
    config: AdamWConfig,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    step: usize,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ModelParams) -> AdamW {
        let m = params
            .tensors()
            .iter()
            .map(|(_, t)| Array2::zeros(t.dim()))
            .collect();
        let v = params
            .tensors()
            .iter()
            .map(|(_, t)| Array2::zeros(t.dim()))
            .collect();
        AdamW {
            config,
            m,
            v,
            step: 0,
        }
    }

    /// One update; `grads` must align with `params.tensors()` order.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Array2<f64>]) -> Result<()> {
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let tensors = params.tensors_mut()?;
        for (i, (_, tensor)) in tensors.iter_mut().enumerate() {
            let g = &grads[i];
            self.m[i].zip_mut_with(g, |m, &gv| *m = c.beta1 * *m + (1.0 - c.beta1) * gv);
            self.v[i].zip_mut_with(g, |v, &gv| *v = c.beta2 * *v + (1.0 - c.beta2) * gv * gv);
            let m = &self.m[i];
            let v = &self.v[i];
            // Copy-on-write view; tapes referencing the old value are gone by
            // the time step() runs, so this mutates in place.
            let mut t = tensor.view_mut();
            for ((tv, &mv), &vv) in t.iter_mut().zip(m.iter()).zip(v.iter()) {
                let m_hat = mv / bc1;
                let v_hat = vv / bc2;
                *tv -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * *tv);
            }
        }
        Ok(())
    }
}
