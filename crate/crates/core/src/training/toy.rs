//! End-to-end toy training run: target, data, vocabulary selection, drafter.

use serde::{Deserialize, Serialize};

use crate::dist::{DecodeTemperature, TokenId};
use crate::error::{LabError, Result};
use crate::heads::{DraftHead, HeadSpec};
use crate::models::{sample_corpus, BackboneConfig, DrafterBackbone, TargetConfig, ToyTargetModel};
use crate::seed::{derive_seed, rng_for};

use super::backprop::Example;
use super::dataset::build_dataset;
use super::freq::{collect_freq_stats, select_truncated_vocab, FreqStats};
use super::{train_head, TrainConfig, TrainOutcome};

/// Which corpus ranks tokens for a truncated vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FreqSource {
    /// Samples of the target itself.
    #[default]
    Target,
    /// Samples of a differently seeded model of the same shape.
    General,
}

/// The head to train. A truncated head takes its vocabulary from exactly
/// one of an explicit `index_map`, a `size`, or a target `coverage`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum HeadChoice {
    Full,
    #[serde(rename = "slimspec")]
    SlimSpec {
        r: usize,
    },
    Truncated {
        #[serde(default)]
        index_map: Option<Vec<TokenId>>,
        #[serde(default)]
        size: Option<usize>,
        #[serde(default)]
        coverage: Option<f64>,
        #[serde(default)]
        freq_source: FreqSource,
    },
    Routed {
        r: usize,
        k: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyTrainConfig {
    pub seed: u64,
    pub target: TargetConfig,
    pub drafter_d: usize,
    pub head: HeadChoice,
    pub num_examples: usize,
    /// Corpus length for token-frequency statistics.
    pub freq_tokens: usize,
    pub temperature: DecodeTemperature,
    pub train: TrainConfig,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            target: TargetConfig::default(),
            drafter_d: BackboneConfig::default().d,
            head: HeadChoice::Full,
            num_examples: 20_000,
            freq_tokens: 200_000,
            temperature: DecodeTemperature::UNIT,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyTrainResult {
    pub target: ToyTargetModel,
    pub outcome: TrainOutcome,
    /// The kept vocabulary of a truncated head.
    pub keep: Option<Vec<TokenId>>,
    /// Frequency-estimated target mass on `keep`.
    pub coverage: Option<f64>,
    pub dataset: Vec<Example>,
}

pub fn target_for(config: &ToyTrainConfig) -> Result<ToyTargetModel> {
    ToyTargetModel::new(&config.target, derive_seed(config.seed, "target-model"))
}

/// Token frequencies of the corpus named by `source`.
pub fn freq_stats_for(config: &ToyTrainConfig, target: &ToyTargetModel, source: FreqSource) -> Result<FreqStats> {
    let stream = match source {
        FreqSource::Target => sample_corpus(
            target,
            config.freq_tokens,
            config.temperature,
            derive_seed(config.seed, "freq-corpus"),
        )?,
        FreqSource::General => {
            let general = ToyTargetModel::new(&config.target, derive_seed(config.seed, "general-model"))?;
            sample_corpus(
                &general,
                config.freq_tokens,
                config.temperature,
                derive_seed(config.seed, "freq-corpus"),
            )?
        }
    };
    collect_freq_stats(&stream, target.vocab_size())
}

fn resolve_head(config: &ToyTrainConfig, target: &ToyTargetModel) -> Result<(HeadSpec, Option<(Vec<TokenId>, f64)>)> {
    Ok(match &config.head {
        HeadChoice::Full => (HeadSpec::Full, None),
        HeadChoice::SlimSpec { r } => (HeadSpec::SlimSpec { r: *r }, None),
        HeadChoice::Routed { r, k } => (HeadSpec::Routed { r: *r, k: *k }, None),
        HeadChoice::Truncated {
            index_map,
            size,
            coverage,
            freq_source,
        } => {
            let stats = freq_stats_for(config, target, *freq_source)?;
            let keep = match (index_map, size, coverage) {
                (Some(m), None, None) => m.clone(),
                (None, Some(s), None) => select_truncated_vocab(&stats, *s)?,
                (None, None, Some(c)) => select_truncated_vocab(&stats, stats.size_for_coverage(*c)?)?,
                _ => {
                    return Err(LabError::InvalidArgument(
                        "truncated head needs exactly one of index_map, size and coverage".into(),
                    ))
                }
            };
            let covered = keep.iter().map(|t| stats.counts[t.index()]).sum::<u64>() as f64 / stats.total as f64;
            (
                HeadSpec::Truncated {
                    index_map: keep.clone(),
                },
                Some((keep, covered)),
            )
        }
    })
}

/// Builds the target, a dataset (masked for truncated heads) and a fresh
/// drafter, then trains the drafter.
pub fn run_toy_training(config: &ToyTrainConfig) -> Result<ToyTrainResult> {
    run_toy_training_with(config, None)
}

/// As [`run_toy_training`], training on `dataset` when given instead of
/// sampling one.
pub fn run_toy_training_with(config: &ToyTrainConfig, dataset: Option<Vec<Example>>) -> Result<ToyTrainResult> {
    let target = target_for(config)?;
    let (spec, truncation) = resolve_head(config, &target)?;
    let keep = truncation.as_ref().map(|(k, _)| k.as_slice());
    let data = match dataset {
        Some(d) => d,
        None => build_dataset(
            &target,
            config.num_examples,
            config.temperature,
            derive_seed(config.seed, "dataset"),
            keep,
        )?,
    };
    let v = target.vocab_size();
    let backbone = DrafterBackbone::new(
        &BackboneConfig {
            vocab_size: v,
            d: config.drafter_d,
            context: target.context_window,
        },
        derive_seed(config.seed, "drafter-backbone"),
    )?;
    let mut rng = rng_for(config.seed, "untrained-head");
    let head = DraftHead::init(&spec, v, config.drafter_d, &mut rng)?;
    let train = TrainConfig {
        seed: derive_seed(config.seed, "train"),
        ..config.train
    };
    let outcome = train_head(backbone, head, &data, &train)?;
    Ok(ToyTrainResult {
        target,
        outcome,
        coverage: truncation.as_ref().map(|(_, c)| *c),
        keep: truncation.map(|(k, _)| k),
        dataset: data,
    })
}
