use crate::error::{LabError, Result};
use crate::heads::DraftHead;
use crate::linalg::Matrix;
use crate::models::DrafterBackbone;

use super::backprop::DrafterGrads;
use super::TrainConfig;

/// Linear warmup over `warmup_steps`, then cosine decay to zero at `steps`.
pub fn learning_rate_at(config: &TrainConfig, step: usize) -> f64 {
    let lr = config.learning_rate;
    if step < config.warmup_steps {
        return lr * (step + 1) as f64 / config.warmup_steps as f64;
    }
    if !config.cosine_decay {
        return lr;
    }
    let span = config.steps.saturating_sub(config.warmup_steps).max(1);
    let progress = ((step - config.warmup_steps) as f64 / span as f64).min(1.0);
    lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adam with decoupled weight decay set to zero, plus global-norm clipping.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

fn params_mut<'a>(backbone: &'a mut DrafterBackbone, head: &'a mut DraftHead) -> Vec<&'a mut Matrix> {
    let mut out = vec![&mut backbone.embed, &mut backbone.mix];
    out.extend(head.matrices_mut());
    out
}

impl AdamW {
    pub fn new(grads: &mut DrafterGrads) -> Self {
        let m: Vec<Vec<f64>> = grads.matrices_mut().iter().map(|g| vec![0.0; g.data().len()]).collect();
        Self { v: m.clone(), m, t: 0 }
    }

    /// Clips `grads` in place to `grad_clip_norm`, then applies one update.
    pub fn step(
        &mut self,
        backbone: &mut DrafterBackbone,
        head: &mut DraftHead,
        grads: &mut DrafterGrads,
        lr: f64,
        config: &TrainConfig,
    ) -> Result<()> {
        let mut gs = grads.matrices_mut();
        let norm = gs
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(LabError::Numerical(format!("gradient norm is {norm}")));
        }
        let clip = if norm > config.grad_clip_norm {
            config.grad_clip_norm / norm
        } else {
            1.0
        };
        for g in gs.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= clip);
        }
        self.t += 1;
        let c1 = 1.0 - config.beta1.powi(self.t);
        let c2 = 1.0 - config.beta2.powi(self.t);
        let params = params_mut(backbone, head);
        if params.len() != gs.len() || params.len() != self.m.len() {
            return Err(LabError::dims("optimizer state", self.m.len(), params.len()));
        }
        for (((p, g), m), v) in params.into_iter().zip(gs).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = config.beta1 * *mi + (1.0 - config.beta1) * gi;
                *vi = config.beta2 * *vi + (1.0 - config.beta2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + config.eps);
            }
        }
        Ok(())
    }
}
