use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Named parameter matrices of a trainable component, in a fixed order.
///
/// Gradients are represented by a value of the same type holding
/// derivatives in place of weights, so parameters and gradients always
/// enumerate in matching order.
pub trait Parameters {
    fn params(&self) -> Vec<(&'static str, &Matrix)>;
    fn params_mut(&mut self) -> Vec<(&'static str, &mut Matrix)>;

    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        for (_, m) in z.params_mut() {
            m.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, m)| m.data().len()).sum()
    }

    /// Flattened copy of every parameter, in `params()` order.
    fn flatten(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|(_, m)| m.data().iter().copied())
            .collect()
    }

    /// Inverse of [`Parameters::flatten`].
    fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total = self.param_count();
        if flat.len() != total {
            return Err(Error::shape("load_flat", (total, 1), (flat.len(), 1)));
        }
        let mut offset = 0;
        for (_, m) in self.params_mut() {
            let n = m.data().len();
            m.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_step_size(step_size: f64) -> Self {
        AdamConfig {
            step_size,
            ..AdamConfig::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: Vec<Matrix>,
    pub second_moment: Vec<Matrix>,
    pub step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            step: 0,
        }
    }

    /// One bias-corrected adaptive-moment update of `params` against `grads`.
    ///
    /// Gradients are validated before anything is written, so a non-finite
    /// gradient leaves both the parameters and the state untouched.
    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        if self.config.step_size.is_nan() || self.config.step_size <= 0.0 {
            return Err(Error::Config(format!(
                "step size must be positive, got {}",
                self.config.step_size
            )));
        }
        let grads = grads.params();
        for (name, g) in &grads {
            if !g.is_finite() {
                return Err(Error::Divergence {
                    param: (*name).to_string(),
                });
            }
        }
        let mut params = params.params_mut();
        if params.len() != grads.len() {
            return Err(Error::shape(
                "adam_step",
                (params.len(), 1),
                (grads.len(), 1),
            ));
        }
        for ((_, p), (_, g)) in params.iter().zip(&grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
        }
        if self.first_moment.is_empty() {
            self.first_moment = params
                .iter()
                .map(|(_, p)| Matrix::zeros(p.rows(), p.cols()))
                .collect();
            self.second_moment = self.first_moment.clone();
        } else if self.first_moment.len() != params.len()
            || self
                .first_moment
                .iter()
                .zip(&params)
                .any(|(m, (_, p))| m.shape() != p.shape())
        {
            return Err(Error::Config(
                "optimizer state does not match parameters".into(),
            ));
        }

        self.step += 1;
        let AdamConfig {
            step_size,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);

        for (i, (_, p)) in params.iter_mut().enumerate() {
            let g = grads[i].1.data();
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                *w -= step_size * m_hat / (v_hat.sqrt() + eps);
            }
        }
        for (name, p) in &params {
            if !p.is_finite() {
                return Err(Error::Divergence {
                    param: (*name).to_string(),
                });
            }
        }
        Ok(())
    }
}
