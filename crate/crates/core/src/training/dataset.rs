use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::dist::{DecodeTemperature, ProbDist, TokenId};
use crate::error::{LabError, Result};
use crate::models::{sample_corpus, ToyTargetModel};

use super::backprop::Example;
use super::kl::mask_probs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Full,
    Masked,
}

/// Recomputes the target from a toy target model instead of storing probs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogitsSeedRef {
    pub target_seed: u64,
    pub temperature: DecodeTemperature,
}

/// One line of a dataset file. Exactly one of `probs` and `logits_seed_ref`
/// is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub context: Vec<u32>,
    pub target_kind: TargetKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits_seed_ref: Option<LogitsSeedRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f64>>,
}

fn tokens(ids: &[u32]) -> Vec<TokenId> {
    ids.iter().map(|&i| TokenId(i)).collect()
}

impl DatasetRecord {
    pub fn from_example(example: &Example, keep: Option<&[TokenId]>) -> Self {
        Self {
            context: example.context.iter().map(|t| t.0).collect(),
            target_kind: if keep.is_some() {
                TargetKind::Masked
            } else {
                TargetKind::Full
            },
            keep: keep.map(|k| k.iter().map(|t| t.0).collect()),
            logits_seed_ref: None,
            probs: Some(example.target.probs().to_vec()),
        }
    }

    /// `target` is required only for records that reference a model.
    pub fn to_example(&self, target: Option<&ToyTargetModel>) -> Result<Example> {
        let context = tokens(&self.context);
        let p = match (&self.probs, &self.logits_seed_ref) {
            (Some(probs), None) => ProbDist::new(probs.clone())?,
            (None, Some(r)) => {
                let model = target.ok_or_else(|| {
                    LabError::InvalidArgument("record references a target model but none was given".into())
                })?;
                if model.seed != r.target_seed {
                    return Err(LabError::InvalidArgument(format!(
                        "record references target seed {} but the model has seed {}",
                        r.target_seed, model.seed
                    )));
                }
                model.next_dist(&context, r.temperature)?
            }
            _ => {
                return Err(LabError::InvalidArgument(
                    "record must set exactly one of probs and logits_seed_ref".into(),
                ))
            }
        };
        let target = match (self.target_kind, &self.keep) {
            (TargetKind::Full, None) => p,
            (TargetKind::Masked, Some(keep)) => {
                let keep = tokens(keep);
                // Stored probs that already vanish off `keep` are taken as is.
                let off_keep = p.support().iter().any(|t| keep.binary_search(t).is_err());
                if self.probs.is_some() && !off_keep {
                    p
                } else {
                    mask_probs(&p, &keep)?
                }
            }
            (TargetKind::Full, Some(_)) => {
                return Err(LabError::InvalidArgument(
                    "full target must not carry a keep set".into(),
                ))
            }
            (TargetKind::Masked, None) => {
                return Err(LabError::InvalidArgument("masked target requires a keep set".into()))
            }
        };
        Ok(Example { context, target })
    }
}

/// Examples at every position of a sampled corpus; the context is the window
/// the target saw. With `keep`, targets are renormalized onto it.
pub fn build_dataset(
    target: &ToyTargetModel,
    num_examples: usize,
    temperature: DecodeTemperature,
    seed: u64,
    keep: Option<&[TokenId]>,
) -> Result<Vec<Example>> {
    let corpus = sample_corpus(target, num_examples, temperature, seed)?;
    let c = target.context_window;
    let mut history = vec![TokenId(0)];
    let mut out = Vec::with_capacity(num_examples);
    for &tok in &corpus {
        let start = history.len().saturating_sub(c);
        let context = history[start..].to_vec();
        let p = target.next_dist(&context, temperature)?;
        let p = match keep {
            Some(k) => mask_probs(&p, k)?,
            None => p,
        };
        out.push(Example { context, target: p });
        history.push(tok);
    }
    Ok(out)
}

pub fn write_dataset_jsonl<W: Write>(mut w: W, examples: &[Example], keep: Option<&[TokenId]>) -> Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut w, &DatasetRecord::from_example(ex, keep))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset_jsonl<R: BufRead>(r: R, target: Option<&ToyTargetModel>) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line)?;
        out.push(rec.to_example(target)?);
    }
    Ok(out)
}
