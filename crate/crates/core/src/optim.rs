//! AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f32>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: None,
        }
    }
}

/// Moment buffers for one parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step_count: u64,
    decay: Vec<bool>,
}

impl AdamW {
    /// State for parameters of the given sizes; every parameter is decayed.
    pub fn new(config: AdamWConfig, sizes: &[usize]) -> Self {
        AdamW {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step_count: 0,
            decay: vec![true; sizes.len()],
        }
    }

    /// State for a tensor list; vectors (biases, layer-norm parameters) are not decayed.
    pub fn for_params<'a>(
        config: AdamWConfig,
        params: impl IntoIterator<Item = &'a Tensor>,
    ) -> Self {
        let tensors: Vec<&Tensor> = params.into_iter().collect();
        let sizes: Vec<usize> = tensors.iter().map(|t| t.numel()).collect();
        let mut opt = Self::new(config, &sizes);
        opt.decay = tensors.iter().map(|t| t.shape().len() >= 2).collect();
        opt
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update: `θ ← θ(1 − lr·wd)` then `θ ← θ − lr·m̂/(√v̂ + eps)`.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor>,
        grads: &[Vec<f32>],
        lr: f32,
    ) -> Result<()> {
        if lr < 0.0 || !lr.is_finite() {
            return Err(Error::Parameter(format!(
                "learning rate must be finite and ≥ 0, got {lr}"
            )));
        }
        let mut params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer holds {} parameters, got {} tensors and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::Contract(format!(
                    "parameter {i}: shape does not match optimizer state"
                )));
            }
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        let clip = match self.config.clip_norm {
            Some(max) => {
                let norm = grads
                    .iter()
                    .flatten()
                    .map(|&g| g as f64 * g as f64)
                    .sum::<f64>()
                    .sqrt() as f32;
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step_count += 1;
        let t = self.step_count as i32;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let decay = if self.decay[i] {
                1.0 - lr * weight_decay
            } else {
                1.0
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((x, &g), (mm, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(&grads[i])
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let g = g * clip;
                *mm = beta1 * *mm + (1.0 - beta1) * g;
                *vv = beta2 * *vv + (1.0 - beta2) * g * g;
                *x *= decay;
                let update = (*mm / bc1) / ((*vv / bc2).sqrt() + eps);
                *x -= lr * update;
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr`, then half-cosine decay to 0 at `total_steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak_lr: f64,
    pub total_steps: usize,
    pub warmup_frac: f64,
}

impl Schedule {
    pub fn new(peak_lr: f64, total_steps: usize, warmup_frac: f64) -> Self {
        Schedule {
            peak_lr,
            total_steps,
            warmup_frac,
        }
    }

    pub fn warmup_steps(&self) -> usize {
        ((self.warmup_frac * self.total_steps as f64).round() as usize).min(self.total_steps)
    }

    /// Learning rate at `step`; steps past the end clamp to the final value.
    pub fn lr_at(&self, step: usize) -> f64 {
        let step = step.min(self.total_steps);
        let warm = self.warmup_steps();
        if step < warm {
            return self.peak_lr * step as f64 / warm as f64;
        }
        let span = self.total_steps - warm;
        if span == 0 {
            return self.peak_lr;
        }
        let progress = (step - warm) as f64 / span as f64;
        self.peak_lr * 0.5 * (1.0 + (PI * progress).cos())
    }
}
