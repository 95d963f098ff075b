//! Forward-KL training of draft heads at toy scale.

mod backprop;
mod dataset;
mod freq;
mod gradcheck;
mod kl;
mod optim;
mod toy;

pub use backprop::{example_loss_grad, flatten_grads, flatten_params, unflatten_params, DrafterGrads, Example};
pub use dataset::{build_dataset, read_dataset_jsonl, write_dataset_jsonl, DatasetRecord, TargetKind};
pub use freq::{collect_freq_stats, select_truncated_vocab, FreqStats};
pub use gradcheck::{drafter_gradient_check, finite_diff_check, GradCheckReport};
pub use kl::{kl_grad, kl_loss, mask_probs, masked_target};
pub use optim::{learning_rate_at, AdamW};
pub use toy::{
    freq_stats_for, run_toy_training, run_toy_training_with, target_for, FreqSource, HeadChoice, ToyTrainConfig,
    ToyTrainResult,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::HeadDrafter;
use crate::error::{LabError, Result};
use crate::heads::DraftHead;
use crate::models::DrafterBackbone;
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    pub grad_clip_norm: f64,
    /// Cosine decay to zero after warmup; constant otherwise.
    pub cosine_decay: bool,
    pub seed: u64,
    pub freeze_backbone: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4e-4,
            steps: 1500,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            warmup_steps: 100,
            grad_clip_norm: 0.5,
            cosine_decay: true,
            seed: 0,
            freeze_backbone: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(LabError::InvalidArgument(msg.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must be in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub drafter: HeadDrafter,
    /// Mean loss over the monitor set before each optimizer step.
    pub loss_curve: Vec<f64>,
}

/// Truncated heads can only be trained on targets that vanish outside the
/// kept vocabulary; anything else has infinite KL.
fn check_targets(head: &DraftHead, dataset: &[Example]) -> Result<()> {
    if let DraftHead::Truncated(t) = head {
        let mut kept = vec![false; t.vocab_size()];
        for tok in &t.index_map {
            kept[tok.index()] = true;
        }
        for ex in dataset {
            if let Some((i, &mass)) = ex
                .target
                .probs()
                .iter()
                .enumerate()
                .find(|(i, &p)| p > 0.0 && !kept[*i])
            {
                return Err(LabError::InfiniteKl { token: i as u32, mass });
            }
        }
    }
    Ok(())
}

fn mean_loss(backbone: &DrafterBackbone, head: &DraftHead, examples: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        total += example_loss_grad(backbone, head, ex, None, 1.0, false)?;
    }
    Ok(total / examples.len() as f64)
}

/// Trains backbone (unless frozen) and head jointly with AdamW on minibatches
/// sampled with replacement. The loss curve is evaluated on a fixed monitor
/// set (the first `batch_size` examples) so it is comparable across steps.
pub fn train_drafter(drafter: HeadDrafter, dataset: &[Example], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(LabError::InvalidArgument("training dataset is empty".into()));
    }
    check_targets(&drafter.head, dataset)?;
    let HeadDrafter { mut backbone, mut head } = drafter;
    let monitor = &dataset[..config.batch_size.min(dataset.len())];
    let mut rng = rng_for(config.seed, "minibatch");
    let mut grads = DrafterGrads::zeros_like(&backbone, &head);
    let mut opt = AdamW::new(&mut grads);
    let mut loss_curve = Vec::with_capacity(config.steps);
    let scale = 1.0 / config.batch_size as f64;
    for step in 0..config.steps {
        loss_curve.push(mean_loss(&backbone, &head, monitor)?);
        grads.reset();
        for _ in 0..config.batch_size {
            let ex = &dataset[rng.gen_range(0..dataset.len())];
            example_loss_grad(&backbone, &head, ex, Some(&mut grads), scale, !config.freeze_backbone)?;
        }
        let lr = learning_rate_at(config, step);
        opt.step(&mut backbone, &mut head, &mut grads, lr, config)?;
    }
    Ok(TrainOutcome {
        drafter: HeadDrafter::new(backbone, head)?,
        loss_curve,
    })
}

/// Same as [`train_drafter`] with the backbone and head passed separately.
pub fn train_head(
    backbone: DrafterBackbone,
    head: DraftHead,
    dataset: &[Example],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_drafter(HeadDrafter::new(backbone, head)?, dataset, config)
}
