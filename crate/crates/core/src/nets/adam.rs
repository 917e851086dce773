use serde::{Deserialize, Serialize};

use super::real::Real;
use super::unet::ModelParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First and second moment estimates, aligned with [`ModelParams::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ModelParams<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<T>> = params.params().iter().map(|p| vec![T::zero(); p.data.len()]).collect();
        AdamState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn check_shapes(&self, params: &ModelParams<T>, grads: &[Vec<T>]) -> Result<()> {
        let ps = params.params();
        if grads.len() != ps.len() || self.m.len() != ps.len() || self.v.len() != ps.len() {
            return Err(Error::Shape(format!(
                "optimizer expects {} tensors, got {} gradients",
                ps.len(),
                grads.len()
            )));
        }
        for (i, p) in ps.iter().enumerate() {
            let n = p.data.len();
            if grads[i].len() != n || self.m[i].len() != n || self.v[i].len() != n {
                return Err(Error::Shape(format!("gradient for {} has the wrong length", p.name)));
            }
        }
        Ok(())
    }

    /// One bias-corrected Adam update. Leaves everything untouched if any
    /// gradient is non-finite.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &[Vec<T>]) -> Result<()> {
        self.check_shapes(params, grads)?;
        for (p, g) in params.params().iter().zip(grads) {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (ob1, ob2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(c.lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(c.eps);
        for (i, p) in params.params_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data.iter_mut().enumerate() {
                let gj = grads[i][j];
                m[j] = b1 * m[j] + ob1 * gj;
                v[j] = b2 * v[j] + ob2 * gj * gj;
                *w -= step_size * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
