//! Seeded toy models: a small MLP target that supplies ground-truth
//! next-token distributions, and a drafter backbone that produces the hidden
//! states the draft heads project.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{normalize, DecodeTemperature, LogitVector, ProbDist, TokenId, Vocabulary};
use crate::error::{LabError, Result};
use crate::heads::FullHead;
use crate::linalg::{dot, Matrix};
use crate::seed::rng_for;

/// The last `c` tokens of `context`, left-padded with token 0.
pub fn context_window(context: &[TokenId], c: usize) -> Result<Vec<TokenId>> {
    if context.is_empty() {
        return Err(LabError::InvalidContext(
            "context must contain at least one token".into(),
        ));
    }
    let tail = &context[context.len().saturating_sub(c)..];
    let mut window = vec![TokenId(0); c - tail.len()];
    window.extend_from_slice(tail);
    Ok(window)
}

fn check_tokens(context: &[TokenId], vocab: Vocabulary) -> Result<()> {
    match context.iter().find(|t| !vocab.contains(**t)) {
        Some(t) => Err(LabError::InvalidContext(format!(
            "token {t} outside vocabulary of size {}",
            vocab.size()
        ))),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetConfig {
    pub vocab_size: usize,
    pub d_t: usize,
    pub d_h: usize,
    pub context: usize,
    /// Multiplier on the output logits. The uniform initialization alone
    /// gives nearly flat next-token distributions.
    pub logit_scale: f64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_t: 32,
            d_h: 64,
            context: 4,
            logit_scale: 8.0,
        }
    }
}

/// Two-layer MLP over the mean-pooled embedding of a `c`-token window:
/// `z = scale · W2 · tanh(W1 · mean(E[window]))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTargetModel {
    pub vocab: Vocabulary,
    /// `V × d_t`
    pub embed: Matrix,
    /// `d_h × d_t`
    pub mlp_w1: Matrix,
    /// `V × d_h`
    pub mlp_w2: Matrix,
    pub context_window: usize,
    pub logit_scale: f64,
    pub seed: u64,
}

impl ToyTargetModel {
    /// Parameters are `U(±1/√fan_in)`; embedding rows have fan-in 1.
    pub fn new(config: &TargetConfig, seed: u64) -> Result<Self> {
        let vocab = Vocabulary::new(config.vocab_size)?;
        if config.d_t == 0 || config.d_h == 0 || config.context == 0 {
            return Err(LabError::InvalidArgument("target dimensions must be positive".into()));
        }
        if !(config.logit_scale.is_finite() && config.logit_scale > 0.0) {
            return Err(LabError::InvalidArgument("logit_scale must be positive".into()));
        }
        let mut rng = rng_for(seed, "toy-target");
        let v = vocab.size();
        let embed = Matrix::uniform(v, config.d_t, 1.0, &mut rng);
        let mlp_w1 = Matrix::uniform(config.d_h, config.d_t, 1.0 / (config.d_t as f64).sqrt(), &mut rng);
        let mlp_w2 = Matrix::uniform(v, config.d_h, 1.0 / (config.d_h as f64).sqrt(), &mut rng);
        Ok(Self {
            vocab,
            embed,
            mlp_w1,
            mlp_w2,
            context_window: config.context,
            logit_scale: config.logit_scale,
            seed,
        })
    }

    pub fn config(&self) -> TargetConfig {
        TargetConfig {
            vocab_size: self.vocab.size(),
            d_t: self.embed.cols(),
            d_h: self.mlp_w1.rows(),
            context: self.context_window,
            logit_scale: self.logit_scale,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    /// Post-nonlinearity activation for a context.
    pub fn activation(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        check_tokens(context, self.vocab)?;
        let window = context_window(context, self.context_window)?;
        let d_t = self.embed.cols();
        let mut pooled = vec![0.0; d_t];
        for t in &window {
            for (p, e) in pooled.iter_mut().zip(self.embed.row(t.index())) {
                *p += e;
            }
        }
        let c = window.len() as f64;
        pooled.iter_mut().for_each(|p| *p /= c);
        Ok(self.mlp_w1.matvec(&pooled).into_iter().map(f64::tanh).collect())
    }

    pub fn logits(&self, context: &[TokenId]) -> Result<LogitVector> {
        let a = self.activation(context)?;
        let z = (0..self.mlp_w2.rows())
            .map(|i| self.logit_scale * dot(self.mlp_w2.row(i), &a))
            .collect();
        Ok(LogitVector::dense(z))
    }

    pub fn next_dist(&self, context: &[TokenId], temperature: DecodeTemperature) -> Result<ProbDist> {
        normalize(&self.logits(context)?, temperature)
    }
}

pub fn target_next_dist(
    model: &ToyTargetModel,
    context: &[TokenId],
    temperature: DecodeTemperature,
) -> Result<ProbDist> {
    model.next_dist(context, temperature)
}

/// Autoregressive sample of `num_tokens` tokens, starting from the context
/// `[0]`. Deterministic per `rng_seed`.
pub fn sample_corpus(
    model: &ToyTargetModel,
    num_tokens: usize,
    temperature: DecodeTemperature,
    rng_seed: u64,
) -> Result<Vec<TokenId>> {
    if num_tokens == 0 {
        return Err(LabError::InvalidArgument("num_tokens must be at least 1".into()));
    }
    let mut rng = rng_for(rng_seed, "corpus");
    let c = model.context_window;
    let mut window = vec![TokenId(0)];
    let mut out = Vec::with_capacity(num_tokens);
    for _ in 0..num_tokens {
        let p = model.next_dist(&window, temperature)?;
        let t = if temperature.is_greedy() {
            p.argmax()
        } else {
            p.sample(&mut rng)
        };
        out.push(t);
        window.push(t);
        if window.len() > c {
            window.remove(0);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d: usize,
    pub context: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d: 64,
            context: 4,
        }
    }
}

/// Intermediate values of one backbone forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct BackboneTrace {
    pub window: Vec<TokenId>,
    /// Concatenated window embeddings, length `c·d`.
    pub input: Vec<f64>,
    pub hidden: Vec<f64>,
}

/// `h = tanh(mix · concat(E[window]))`.
#[derive(Debug, Clone, PartialEq)]
pub struct DrafterBackbone {
    pub vocab: Vocabulary,
    /// `V × d`
    pub embed: Matrix,
    /// `d × (c·d)`
    pub mix: Matrix,
    pub context_window: usize,
    pub seed: u64,
}

impl DrafterBackbone {
    pub fn new(config: &BackboneConfig, seed: u64) -> Result<Self> {
        let vocab = Vocabulary::new(config.vocab_size)?;
        if config.d == 0 || config.context == 0 {
            return Err(LabError::InvalidArgument("backbone dimensions must be positive".into()));
        }
        let mut rng = rng_for(seed, "drafter-backbone");
        Ok(Self::random(vocab, config.d, config.context, seed, &mut rng))
    }

    fn random<R: Rng + ?Sized>(vocab: Vocabulary, d: usize, c: usize, seed: u64, rng: &mut R) -> Self {
        let embed = Matrix::uniform(vocab.size(), d, 1.0, rng);
        let mix = Matrix::uniform(d, c * d, 1.0 / ((c * d) as f64).sqrt(), rng);
        Self {
            vocab,
            embed,
            mix,
            context_window: c,
            seed,
        }
    }

    pub fn from_parts(embed: Matrix, mix: Matrix, context_window: usize, seed: u64) -> Result<Self> {
        let vocab = Vocabulary::new(embed.rows())?;
        let d = embed.cols();
        if mix.rows() != d || mix.cols() != context_window * d {
            return Err(LabError::dims("backbone mix columns", context_window * d, mix.cols()));
        }
        Ok(Self {
            vocab,
            embed,
            mix,
            context_window,
            seed,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    pub fn forward_trace(&self, context: &[TokenId]) -> Result<BackboneTrace> {
        check_tokens(context, self.vocab)?;
        let window = context_window(context, self.context_window)?;
        let mut input = Vec::with_capacity(self.mix.cols());
        for t in &window {
            input.extend_from_slice(self.embed.row(t.index()));
        }
        let hidden = self.mix.matvec(&input).into_iter().map(f64::tanh).collect();
        Ok(BackboneTrace { window, input, hidden })
    }

    pub fn hidden(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(context)?.hidden)
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.embed.data_mut().iter_mut().for_each(|x| *x = 0.0);
        out.mix.data_mut().iter_mut().for_each(|x| *x = 0.0);
        out
    }
}

pub fn drafter_hidden(backbone: &DrafterBackbone, context: &[TokenId]) -> Result<Vec<f64>> {
    backbone.hidden(context)
}

/// A backbone and full head that reproduce `target` exactly (up to
/// floating-point summation order). Requires drafter width `d = d_h ≥ d_t`.
pub fn self_drafter(target: &ToyTargetModel) -> Result<(DrafterBackbone, FullHead)> {
    let d_t = target.embed.cols();
    let d = target.mlp_w1.rows();
    if d < d_t {
        return Err(LabError::InvalidArgument(format!(
            "self-drafting needs d_h ({d}) >= d_t ({d_t})"
        )));
    }
    let v = target.vocab_size();
    let c = target.context_window;
    let embed = Matrix::from_fn(v, d, |i, j| if j < d_t { target.embed.get(i, j) } else { 0.0 });
    let mix = Matrix::from_fn(d, c * d, |i, j| {
        let k = j % d;
        if k < d_t {
            target.mlp_w1.get(i, k) / c as f64
        } else {
            0.0
        }
    });
    let backbone = DrafterBackbone::from_parts(embed, mix, c, target.seed)?;
    let head = FullHead::new(target.mlp_w2.map(|w| target.logit_scale * w))?;
    Ok((backbone, head))
}
