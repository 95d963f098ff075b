//! Chain drafting, rejection-sampling verification and acceptance
//! accounting.
//!
//! One speculative round drafts `n` tokens autoregressively from the
//! drafter, replays the target on every drafted prefix (the simulated
//! parallel verification pass), then walks the chain: position `i` is
//! accepted with probability `min(1, p_i(v_i) / q_i(v_i))`. The first
//! rejection samples a replacement from `norm(max(p_i - q_i, 0))` and ends
//! the round; if every position is accepted a bonus token is drawn from
//! `p_{n+1}`. Under greedy decoding a position is accepted iff the drafted
//! token equals the target argmax.

use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::dist::{normalize, overlap, DecodeTemperature, ProbDist, TokenId, PROB_TOLERANCE};
use crate::error::{LabError, Result};
use crate::heads::{DraftHead, HeadSpec};
use crate::linalg::Scalar;
use crate::models::{self_drafter, BackboneConfig, DrafterBackbone, TargetConfig, ToyTargetModel};
use crate::seed::{derive_seed, rng_for, LabRng};

/// Anything that yields a next-token distribution for a context.
pub trait NextTokenModel: Send + Sync {
    fn vocab_size(&self) -> usize;
    fn next_dist(&self, context: &[TokenId], temperature: DecodeTemperature) -> Result<ProbDist>;
}

impl NextTokenModel for ToyTargetModel {
    fn vocab_size(&self) -> usize {
        ToyTargetModel::vocab_size(self)
    }

    fn next_dist(&self, context: &[TokenId], temperature: DecodeTemperature) -> Result<ProbDist> {
        ToyTargetModel::next_dist(self, context, temperature)
    }
}

/// A drafter: backbone hidden state followed by a draft head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadDrafter<T = f64> {
    pub backbone: DrafterBackbone,
    pub head: DraftHead<T>,
}

impl<T: Scalar> HeadDrafter<T> {
    pub fn new(backbone: DrafterBackbone, head: DraftHead<T>) -> Result<Self> {
        BorrowedDrafter::new(&backbone, &head)?;
        Ok(Self { backbone, head })
    }
}

impl<T: Scalar> NextTokenModel for HeadDrafter<T> {
    fn vocab_size(&self) -> usize {
        self.backbone.vocab_size()
    }

    fn next_dist(&self, context: &[TokenId], temperature: DecodeTemperature) -> Result<ProbDist> {
        let h = self.backbone.hidden(context)?;
        normalize(&self.head.forward(&h)?, temperature)
    }
}

/// One verified speculative round.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecRoundTrace {
    /// Drafted tokens with the draft distribution each was sampled from.
    pub drafted: Vec<(TokenId, ProbDist)>,
    pub accepted_count: usize,
    /// Residual replacement on rejection, or the token drawn from `p_{n+1}`.
    pub bonus: TokenId,
    /// One flag per verified position; only the last may be `false`.
    pub positionwise_accept: Vec<bool>,
}

impl SpecRoundTrace {
    /// Tokens this round appends to the sequence.
    pub fn emitted(&self) -> Vec<TokenId> {
        let mut out: Vec<TokenId> = self.drafted[..self.accepted_count].iter().map(|(t, _)| *t).collect();
        out.push(self.bonus);
        out
    }
}

/// Drafts `n` tokens autoregressively, appending each to the context before
/// the next step.
pub fn draft_chain_with<D: NextTokenModel + ?Sized, R: Rng + ?Sized>(
    drafter: &D,
    context: &[TokenId],
    n: usize,
    temperature: DecodeTemperature,
    rng: &mut R,
) -> Result<Vec<(TokenId, ProbDist)>> {
    let mut ctx = context.to_vec();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let q = drafter.next_dist(&ctx, temperature)?;
        let t = if temperature.is_greedy() {
            q.argmax()
        } else {
            q.sample(rng)
        };
        ctx.push(t);
        out.push((t, q));
    }
    Ok(out)
}

pub fn draft_chain<T: Scalar, R: Rng + ?Sized>(
    backbone: &DrafterBackbone,
    head: &DraftHead<T>,
    context: &[TokenId],
    n: usize,
    temperature: DecodeTemperature,
    rng: &mut R,
) -> Result<Vec<(TokenId, ProbDist)>> {
    if n == 0 {
        return Err(LabError::InvalidArgument("draft length n must be at least 1".into()));
    }
    draft_chain_with(&BorrowedDrafter::new(backbone, head)?, context, n, temperature, rng)
}

/// A drafter over borrowed parts, so large heads are never copied.
pub(crate) struct BorrowedDrafter<'a, T> {
    pub backbone: &'a DrafterBackbone,
    pub head: &'a DraftHead<T>,
}

impl<'a, T: Scalar> BorrowedDrafter<'a, T> {
    pub fn new(backbone: &'a DrafterBackbone, head: &'a DraftHead<T>) -> Result<Self> {
        if head.vocab_size() != backbone.vocab_size() {
            return Err(LabError::dims(
                "head vocabulary",
                backbone.vocab_size(),
                head.vocab_size(),
            ));
        }
        if head.hidden_dim() != backbone.hidden_dim() {
            return Err(LabError::dims(
                "head hidden size",
                backbone.hidden_dim(),
                head.hidden_dim(),
            ));
        }
        Ok(Self { backbone, head })
    }
}

impl<T: Scalar> NextTokenModel for BorrowedDrafter<'_, T> {
    fn vocab_size(&self) -> usize {
        self.backbone.vocab_size()
    }

    fn next_dist(&self, context: &[TokenId], temperature: DecodeTemperature) -> Result<ProbDist> {
        let h = self.backbone.hidden(context)?;
        normalize(&self.head.forward(&h)?, temperature)
    }
}

/// `norm(max(p - q, 0))`, falling back to `p` when the residual mass is
/// below 1e-12.
pub fn residual(p: &ProbDist, q: &ProbDist) -> Result<ProbDist> {
    if p.len() != q.len() {
        return Err(LabError::dims("residual", p.len(), q.len()));
    }
    let diff: Vec<f64> = p.probs().iter().zip(q.probs()).map(|(a, b)| (a - b).max(0.0)).collect();
    let mass: f64 = diff.iter().sum();
    let alpha = overlap(p, q)?;
    if (mass - (1.0 - alpha)).abs() > PROB_TOLERANCE {
        return Err(LabError::Numerical(format!(
            "residual mass {mass} inconsistent with overlap {alpha}"
        )));
    }
    if mass < 1e-12 {
        return Ok(p.clone());
    }
    Ok(ProbDist::from_normalized(diff.into_iter().map(|x| x / mass).collect()))
}

/// Verifies a drafted chain against `n + 1` target distributions
/// (`p_list[n]` supplies the bonus when every draft is accepted).
pub fn verify<R: Rng + ?Sized>(
    p_list: &[ProbDist],
    drafted: Vec<(TokenId, ProbDist)>,
    temperature: DecodeTemperature,
    rng: &mut R,
) -> Result<SpecRoundTrace> {
    let n = drafted.len();
    if p_list.len() != n + 1 {
        return Err(LabError::dims("target distributions (n + 1)", n + 1, p_list.len()));
    }
    let v = p_list[0].len();
    for (p, (_, q)) in p_list.iter().zip(&drafted) {
        if p.len() != v || q.len() != v {
            return Err(LabError::dims("distribution length", v, q.len().min(p.len())));
        }
    }
    let mut flags = Vec::with_capacity(n);
    for (i, (token, q)) in drafted.iter().enumerate() {
        let p = &p_list[i];
        if temperature.is_greedy() {
            let target = p.argmax();
            if *token == target {
                flags.push(true);
                continue;
            }
            flags.push(false);
            return Ok(SpecRoundTrace {
                accepted_count: i,
                bonus: target,
                positionwise_accept: flags,
                drafted,
            });
        }
        let qv = q.prob(*token);
        if qv <= 0.0 {
            return Err(LabError::DrafterSupportViolation {
                position: i,
                token: token.0,
            });
        }
        let u: f64 = rng.gen();
        if u * qv < p.prob(*token) {
            flags.push(true);
            continue;
        }
        flags.push(false);
        let bonus = residual(p, q)?.sample(rng);
        return Ok(SpecRoundTrace {
            accepted_count: i,
            bonus,
            positionwise_accept: flags,
            drafted,
        });
    }
    let last = &p_list[n];
    let bonus = if temperature.is_greedy() {
        last.argmax()
    } else {
        last.sample(rng)
    };
    Ok(SpecRoundTrace {
        accepted_count: n,
        bonus,
        positionwise_accept: flags,
        drafted,
    })
}

/// Exact single-step output distribution of rejection sampling:
/// `q(v)·min(1, p(v)/q(v)) + (1 - α)·residual(v)`.
pub fn exact_output_dist(p: &ProbDist, q: &ProbDist) -> Result<ProbDist> {
    let alpha = overlap(p, q)?;
    let accepted: Vec<f64> = p
        .probs()
        .iter()
        .zip(q.probs())
        .map(|(&pv, &qv)| if qv > 0.0 { qv * (pv / qv).min(1.0) } else { 0.0 })
        .collect();
    if 1.0 - alpha <= 0.0 {
        return Ok(ProbDist::from_normalized(accepted));
    }
    let res = residual(p, q)?;
    Ok(ProbDist::from_normalized(
        accepted
            .iter()
            .zip(res.probs())
            .map(|(a, r)| a + (1.0 - alpha) * r)
            .collect(),
    ))
}

/// Drafted/accepted counters. Merging is associative and commutative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AcceptanceStats {
    pub total_drafted: u64,
    pub total_accepted: u64,
    pub rounds: u64,
    pub n: u64,
}

impl AcceptanceStats {
    pub fn new(n: usize) -> Self {
        Self {
            n: n as u64,
            ..Self::default()
        }
    }

    /// Every round counts `n` drafted tokens, whatever the rejection point.
    pub fn record(&mut self, trace: &SpecRoundTrace) {
        self.rounds += 1;
        self.total_drafted += self.n;
        self.total_accepted += trace.accepted_count as u64;
    }

    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.n != other.n && self.rounds > 0 && other.rounds > 0 {
            return Err(LabError::InvalidArgument(format!(
                "cannot merge stats with n = {} and n = {}",
                self.n, other.n
            )));
        }
        Ok(Self {
            total_drafted: self.total_drafted + other.total_drafted,
            total_accepted: self.total_accepted + other.total_accepted,
            rounds: self.rounds + other.rounds,
            n: self.n.max(other.n),
        })
    }
}

/// Average acceptance length `τ = n · accepted / drafted + 1`.
pub fn acceptance_length(stats: &AcceptanceStats) -> Result<f64> {
    if stats.total_drafted == 0 {
        return Err(LabError::DivisionByZero("no drafted tokens"));
    }
    Ok(stats.n as f64 * stats.total_accepted as f64 / stats.total_drafted as f64 + 1.0)
}

/// Everything one round produced, including the replayed target
/// distributions.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub trace: SpecRoundTrace,
    pub p_list: Vec<ProbDist>,
}

/// Runs speculative rounds of a drafter against a target.
pub struct SpecDecoder<'a> {
    pub target: &'a dyn NextTokenModel,
    pub drafter: &'a dyn NextTokenModel,
    pub n: usize,
    pub temperature: DecodeTemperature,
}

impl<'a> SpecDecoder<'a> {
    pub fn new(
        target: &'a dyn NextTokenModel,
        drafter: &'a dyn NextTokenModel,
        n: usize,
        temperature: DecodeTemperature,
    ) -> Result<Self> {
        if n == 0 {
            return Err(LabError::InvalidArgument("draft length n must be at least 1".into()));
        }
        if target.vocab_size() != drafter.vocab_size() {
            return Err(LabError::dims(
                "drafter vocabulary",
                target.vocab_size(),
                drafter.vocab_size(),
            ));
        }
        Ok(Self {
            target,
            drafter,
            n,
            temperature,
        })
    }

    pub fn round<R: Rng + ?Sized>(&self, context: &[TokenId], rng: &mut R) -> Result<RoundOutcome> {
        let drafted = draft_chain_with(self.drafter, context, self.n, self.temperature, rng)?;
        let mut ctx = context.to_vec();
        let mut p_list = Vec::with_capacity(self.n + 1);
        p_list.push(self.target.next_dist(&ctx, self.temperature)?);
        for (t, _) in &drafted {
            ctx.push(*t);
            p_list.push(self.target.next_dist(&ctx, self.temperature)?);
        }
        let trace = verify(&p_list, drafted, self.temperature, rng)?;
        Ok(RoundOutcome { trace, p_list })
    }
}

/// Per-position counters of a simulation (positions are 1-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionReport {
    pub position: usize,
    /// Rounds in which this position was verified.
    pub reached: u64,
    pub accepted: u64,
    /// `accepted / reached`.
    pub acceptance_rate: f64,
    /// Mean overlap `Σ min(p, q)` over the contexts where the position was reached.
    pub mean_alpha: f64,
    /// Mean target mass on the draft support over the same contexts.
    pub mean_coverage: f64,
    /// Reached positions whose target argmax had zero draft probability.
    pub argmax_outside_support: u64,
    pub accepted_argmax_outside_support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub method: String,
    pub seed: u64,
    pub n: usize,
    pub temperature: f64,
    pub rounds: u64,
    pub tau: f64,
    pub stats: AcceptanceStats,
    pub positions: Vec<PositionReport>,
}

#[derive(Debug, Clone, Default)]
struct PositionAccum {
    reached: u64,
    accepted: u64,
    alpha_sum: f64,
    coverage_sum: f64,
    outside: u64,
    outside_accepted: u64,
}

/// Context tokens kept between rounds; larger than any model window.
const HISTORY: usize = 32;

/// Runs `rounds` speculative rounds on one continuing sequence.
pub fn simulate(
    target: &dyn NextTokenModel,
    drafter: &dyn NextTokenModel,
    method: &str,
    n: usize,
    rounds: u64,
    temperature: DecodeTemperature,
    seed: u64,
) -> Result<SimReport> {
    if rounds == 0 {
        return Err(LabError::InvalidArgument("rounds must be at least 1".into()));
    }
    let decoder = SpecDecoder::new(target, drafter, n, temperature)?;
    let mut rng: LabRng = rng_for(seed, "simulation");
    let v = target.vocab_size();
    let mut seq = vec![TokenId::from_index(rng.gen_range(0..v))];
    let mut stats = AcceptanceStats::new(n);
    let mut acc = vec![PositionAccum::default(); n];
    for _ in 0..rounds {
        let out = decoder.round(&seq, &mut rng)?;
        for (i, &ok) in out.trace.positionwise_accept.iter().enumerate() {
            let p = &out.p_list[i];
            let q = &out.trace.drafted[i].1;
            let slot = &mut acc[i];
            slot.reached += 1;
            slot.accepted += ok as u64;
            slot.alpha_sum += overlap(p, q)?;
            slot.coverage_sum += p
                .probs()
                .iter()
                .zip(q.probs())
                .filter(|(_, &qv)| qv > 0.0)
                .map(|(pv, _)| pv)
                .sum::<f64>();
            if q.prob(p.argmax()) == 0.0 {
                slot.outside += 1;
                slot.outside_accepted += ok as u64;
            }
        }
        stats.record(&out.trace);
        seq.extend(out.trace.emitted());
        if seq.len() > HISTORY {
            seq.drain(..seq.len() - HISTORY);
        }
    }
    let positions = acc
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let reached = a.reached.max(1) as f64;
            PositionReport {
                position: i + 1,
                reached: a.reached,
                accepted: a.accepted,
                acceptance_rate: a.accepted as f64 / reached,
                mean_alpha: a.alpha_sum / reached,
                mean_coverage: a.coverage_sum / reached,
                argmax_outside_support: a.outside,
                accepted_argmax_outside_support: a.outside_accepted,
            }
        })
        .collect();
    Ok(SimReport {
        method: method.to_string(),
        seed,
        n,
        temperature: temperature.value(),
        rounds,
        tau: acceptance_length(&stats)?,
        stats,
        positions,
    })
}

/// How the drafter's head is obtained in a [`SimConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HeadSource {
    /// `{"kind": ..., "checkpoint": "path"}`
    Checkpoint { kind: String, checkpoint: PathBuf },
    /// `{"kind": "self"}`: a drafter that mirrors the target exactly.
    /// `{"kind": "full" | ...params}`: a freshly initialized head.
    Spec(HeadSpecOrSelf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HeadSpecOrSelf {
    SelfDraft(SelfTag),
    Spec(HeadSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelfTag {
    pub kind: SelfKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelfKind {
    #[serde(rename = "self")]
    SelfDraft,
}

fn default_n() -> usize {
    6
}

fn default_rounds() -> u64 {
    10_000
}

fn default_temperature() -> DecodeTemperature {
    DecodeTemperature::UNIT
}

fn default_head() -> HeadSource {
    HeadSource::Spec(HeadSpecOrSelf::Spec(HeadSpec::Full))
}

/// On-disk simulation configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub vocab_size: Option<usize>,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_rounds")]
    pub rounds: u64,
    #[serde(default = "default_temperature")]
    pub temperature: DecodeTemperature,
    #[serde(default = "default_head")]
    pub head: HeadSource,
    #[serde(default)]
    pub target_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub drafter_checkpoint: Option<PathBuf>,
    /// Used when no target checkpoint is given.
    #[serde(default)]
    pub target: Option<TargetConfig>,
    /// Used when no drafter checkpoint is given.
    #[serde(default)]
    pub drafter_d: Option<usize>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            vocab_size: None,
            n: default_n(),
            rounds: default_rounds(),
            temperature: default_temperature(),
            head: default_head(),
            target_checkpoint: None,
            drafter_checkpoint: None,
            target: None,
            drafter_d: None,
        }
    }
}

/// A simulation with its models loaded.
pub struct SimSetup {
    pub target: ToyTargetModel,
    pub drafter: HeadDrafter,
    pub method: String,
}

impl SimConfig {
    /// Loads or builds the target and drafter this config describes.
    /// Relative checkpoint paths resolve against `base_dir`.
    pub fn resolve(&self, base_dir: &std::path::Path) -> Result<SimSetup> {
        if self.n == 0 {
            return Err(LabError::InvalidArgument("n must be at least 1".into()));
        }
        let path = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base_dir.join(p) };
        let target = match &self.target_checkpoint {
            Some(p) => checkpoint::load_target(&Checkpoint::read(&path(p))?)?,
            None => {
                let mut cfg = self.target.unwrap_or_default();
                if let Some(v) = self.vocab_size {
                    cfg.vocab_size = v;
                }
                ToyTargetModel::new(&cfg, derive_seed(self.seed, "target-model"))?
            }
        };
        if let Some(v) = self.vocab_size {
            if v != target.vocab_size() {
                return Err(LabError::dims("target vocabulary", v, target.vocab_size()));
            }
        }
        let v = target.vocab_size();
        let (drafter, method) = match &self.head {
            HeadSource::Spec(HeadSpecOrSelf::SelfDraft(_)) => {
                let (backbone, head) = self_drafter(&target)?;
                (HeadDrafter::new(backbone, DraftHead::Full(head))?, "self".to_string())
            }
            other => {
                let backbone = match &self.drafter_checkpoint {
                    Some(p) => checkpoint::load_backbone(&Checkpoint::read(&path(p))?)?,
                    None => DrafterBackbone::new(
                        &BackboneConfig {
                            vocab_size: v,
                            d: self.drafter_d.unwrap_or(BackboneConfig::default().d),
                            context: target.context_window,
                        },
                        derive_seed(self.seed, "drafter-backbone"),
                    )?,
                };
                let head = match other {
                    HeadSource::Checkpoint { kind, checkpoint: p } => {
                        let head = checkpoint::load_head(&Checkpoint::read(&path(p))?)?;
                        if head.kind().as_str() != kind {
                            return Err(LabError::Checkpoint(format!(
                                "config says head kind {kind}, checkpoint holds {}",
                                head.kind()
                            )));
                        }
                        head
                    }
                    HeadSource::Spec(HeadSpecOrSelf::Spec(spec)) => {
                        let mut rng = rng_for(self.seed, "untrained-head");
                        DraftHead::init(spec, v, backbone.hidden_dim(), &mut rng)?
                    }
                    HeadSource::Spec(HeadSpecOrSelf::SelfDraft(_)) => unreachable!(),
                };
                let method = head.kind().to_string();
                (HeadDrafter::new(backbone, head)?, method)
            }
        };
        if drafter.backbone.vocab_size() != v {
            return Err(LabError::dims("drafter vocabulary", v, drafter.backbone.vocab_size()));
        }
        Ok(SimSetup {
            target,
            drafter,
            method,
        })
    }
}

/// Resolves a config and runs it.
pub fn run_simulation(config: &SimConfig, base_dir: &std::path::Path) -> Result<SimReport> {
    let setup = config.resolve(base_dir)?;
    simulate(
        &setup.target,
        &setup.drafter,
        &setup.method,
        config.n,
        config.rounds,
        config.temperature,
        config.seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::TargetConfig;

    fn pd(v: &[f64]) -> ProbDist {
        ProbDist::new(v.to_vec()).unwrap()
    }

    #[test]
    fn identical_distributions_accept_everything() {
        let mut rng = rng_for(1, "verify");
        let p = pd(&[0.2, 0.3, 0.5]);
        for _ in 0..200 {
            let drafted: Vec<_> = (0..4).map(|_| (p.sample(&mut rng), p.clone())).collect();
            let p_list = vec![p.clone(); 5];
            let trace = verify(&p_list, drafted, DecodeTemperature::UNIT, &mut rng).unwrap();
            assert_eq!(trace.accepted_count, 4);
            assert!(trace.positionwise_accept.iter().all(|&x| x));
        }
    }

    #[test]
    fn greedy_rejection_emits_target_argmax() {
        let mut rng = rng_for(2, "verify");
        let p = ProbDist::point_mass(3, TokenId(2));
        let q = ProbDist::point_mass(3, TokenId(0));
        let trace = verify(
            &[p.clone(), p.clone()],
            vec![(TokenId(0), q)],
            DecodeTemperature::GREEDY,
            &mut rng,
        )
        .unwrap();
        assert_eq!(trace.accepted_count, 0);
        assert_eq!(trace.bonus, TokenId(2));
        assert_eq!(trace.positionwise_accept, vec![false]);
    }

    #[test]
    fn residual_closed_form() {
        let p = pd(&[0.5, 0.5]);
        let q = pd(&[0.9, 0.1]);
        assert_eq!(residual(&p, &q).unwrap().probs(), &[0.0, 1.0]);
        // the rejected branch can only ever emit token 1
        let mut rng = rng_for(3, "verify");
        let mut rejections = 0;
        for _ in 0..2000 {
            let trace = verify(
                &[p.clone(), p.clone()],
                vec![(TokenId(0), q.clone())],
                DecodeTemperature::UNIT,
                &mut rng,
            )
            .unwrap();
            if trace.accepted_count == 0 {
                rejections += 1;
                assert_eq!(trace.bonus, TokenId(1));
            }
        }
        // rejection probability 1 - 5/9
        assert!((rejections as f64 / 2000.0 - 4.0 / 9.0).abs() < 0.05);
    }

    #[test]
    fn residual_falls_back_to_target() {
        let p = pd(&[0.25, 0.75]);
        assert_eq!(residual(&p, &p).unwrap(), p);
    }

    #[test]
    fn zero_draft_mass_is_a_support_violation() {
        let mut rng = rng_for(4, "verify");
        let p = pd(&[0.5, 0.5]);
        let q = pd(&[1.0, 0.0]);
        let err = verify(
            &[p.clone(), p],
            vec![(TokenId(1), q)],
            DecodeTemperature::UNIT,
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            LabError::DrafterSupportViolation { position: 0, token: 1 }
        ));
    }

    #[test]
    fn verify_needs_n_plus_one_targets() {
        let mut rng = rng_for(5, "verify");
        let p = pd(&[0.5, 0.5]);
        assert!(verify(&[p.clone()], vec![(TokenId(0), p)], DecodeTemperature::UNIT, &mut rng).is_err());
    }

    #[test]
    fn tau_arithmetic() {
        let s = AcceptanceStats {
            total_drafted: 6000,
            total_accepted: 3000,
            rounds: 1000,
            n: 6,
        };
        assert_eq!(acceptance_length(&s).unwrap(), 4.0);
        let none = AcceptanceStats { total_accepted: 0, ..s };
        assert_eq!(acceptance_length(&none).unwrap(), 1.0);
        let all = AcceptanceStats {
            total_accepted: 6000,
            ..s
        };
        assert_eq!(acceptance_length(&all).unwrap(), 7.0);
        assert!(matches!(
            acceptance_length(&AcceptanceStats::new(6)),
            Err(LabError::DivisionByZero(_))
        ));
    }

    #[test]
    fn stats_merge_is_commutative() {
        let a = AcceptanceStats {
            total_drafted: 12,
            total_accepted: 5,
            rounds: 2,
            n: 6,
        };
        let b = AcceptanceStats {
            total_drafted: 30,
            total_accepted: 29,
            rounds: 5,
            n: 6,
        };
        assert_eq!(a.merge(&b).unwrap(), b.merge(&a).unwrap());
        let c = AcceptanceStats { n: 3, ..b };
        assert!(a.merge(&c).is_err());
    }

    #[test]
    fn exact_output_examples() {
        let p = pd(&[0.5, 0.5]);
        let q = pd(&[0.9, 0.1]);
        let out = exact_output_dist(&p, &q).unwrap();
        assert!((out.probs()[0] - 0.5).abs() < 1e-15);
        assert!((out.probs()[1] - 0.5).abs() < 1e-15);
        assert_eq!(exact_output_dist(&p, &p).unwrap(), p);
        let p = pd(&[0.0, 0.3, 0.7]);
        let q = ProbDist::point_mass(3, TokenId(0));
        assert_eq!(exact_output_dist(&p, &q).unwrap(), p);
    }

    fn tiny_setup(seed: u64) -> (ToyTargetModel, HeadDrafter) {
        let cfg = TargetConfig {
            vocab_size: 16,
            d_t: 8,
            d_h: 8,
            context: 2,
            logit_scale: 4.0,
        };
        let target = ToyTargetModel::new(&cfg, seed).unwrap();
        let backbone = DrafterBackbone::new(
            &BackboneConfig {
                vocab_size: 16,
                d: 8,
                context: 2,
            },
            seed + 1,
        )
        .unwrap();
        let mut rng = rng_for(seed, "head");
        let head = DraftHead::init(&HeadSpec::Full, 16, 8, &mut rng).unwrap();
        (target, HeadDrafter::new(backbone, head).unwrap())
    }

    #[test]
    fn chain_drafting_basics() {
        let (_, drafter) = tiny_setup(1);
        let mut rng = rng_for(1, "draft");
        let ctx = [TokenId(3)];
        let one = draft_chain(
            &drafter.backbone,
            &drafter.head,
            &ctx,
            1,
            DecodeTemperature::UNIT,
            &mut rng,
        )
        .unwrap();
        assert_eq!(one.len(), 1);
        assert!(one[0].1.prob(one[0].0) > 0.0);
        let greedy = draft_chain(
            &drafter.backbone,
            &drafter.head,
            &ctx,
            4,
            DecodeTemperature::GREEDY,
            &mut rng,
        )
        .unwrap();
        assert!(greedy.iter().all(|(t, q)| *t == q.argmax()));
        let a = draft_chain(
            &drafter.backbone,
            &drafter.head,
            &ctx,
            5,
            DecodeTemperature::UNIT,
            &mut rng_for(9, "d"),
        )
        .unwrap();
        let b = draft_chain(
            &drafter.backbone,
            &drafter.head,
            &ctx,
            5,
            DecodeTemperature::UNIT,
            &mut rng_for(9, "d"),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn simulation_is_deterministic_and_chain_stops() {
        let (target, drafter) = tiny_setup(2);
        let a = simulate(&target, &drafter, "full", 3, 500, DecodeTemperature::UNIT, 11).unwrap();
        let b = simulate(&target, &drafter, "full", 3, 500, DecodeTemperature::UNIT, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.tau >= 1.0 && a.tau <= 4.0);
        // reached counts are non-increasing along the chain
        for w in a.positions.windows(2) {
            assert!(w[1].reached <= w[0].reached);
            assert_eq!(w[1].reached, w[0].accepted);
        }
        assert!(simulate(&target, &drafter, "full", 3, 0, DecodeTemperature::UNIT, 11).is_err());
    }

    #[test]
    fn self_drafting_accepts_everything() {
        let cfg = SimConfig {
            n: 4,
            rounds: 300,
            head: HeadSource::Spec(HeadSpecOrSelf::SelfDraft(SelfTag {
                kind: SelfKind::SelfDraft,
            })),
            target: Some(TargetConfig {
                vocab_size: 64,
                ..TargetConfig::default()
            }),
            ..SimConfig::default()
        };
        let report = run_simulation(&cfg, std::path::Path::new(".")).unwrap();
        assert!((report.tau - 5.0).abs() < 0.01, "tau = {}", report.tau);
    }

    #[test]
    fn sim_config_parses_head_forms() {
        let a: SimConfig = serde_json::from_str(r#"{"head": {"kind": "self"}}"#).unwrap();
        assert!(matches!(a.head, HeadSource::Spec(HeadSpecOrSelf::SelfDraft(_))));
        let b: SimConfig = serde_json::from_str(r#"{"head": {"kind": "slimspec", "r": 8}}"#).unwrap();
        assert_eq!(
            b.head,
            HeadSource::Spec(HeadSpecOrSelf::Spec(HeadSpec::SlimSpec { r: 8 }))
        );
        let c: SimConfig = serde_json::from_str(r#"{"head": {"kind": "full", "checkpoint": "head.json"}}"#).unwrap();
        assert!(matches!(c.head, HeadSource::Checkpoint { .. }));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn dist_strategy(v: usize) -> impl Strategy<Value = ProbDist> {
            prop::collection::vec(0.0f64..1.0, v).prop_map(|w| {
                let w: Vec<f64> = w.iter().map(|x| x + 1e-3).collect();
                let s: f64 = w.iter().sum();
                ProbDist::new(w.iter().map(|x| x / s).collect()).unwrap()
            })
        }

        proptest! {
            #[test]
            fn chain_stops_at_first_rejection(
                ps in prop::collection::vec(dist_strategy(6), 2..8),
                qs in prop::collection::vec(dist_strategy(6), 7),
                greedy in any::<bool>(),
                seed in any::<u64>(),
            ) {
                let n = ps.len() - 1;
                let t = if greedy { DecodeTemperature::GREEDY } else { DecodeTemperature::UNIT };
                let mut rng = rng_for(seed, "prop-verify");
                let drafted: Vec<_> = qs[..n].iter().map(|q| (q.sample(&mut rng), q.clone())).collect();
                let trace = verify(&ps, drafted, t, &mut rng).unwrap();
                let flags = &trace.positionwise_accept;
                prop_assert!(flags.windows(2).all(|w| w[0] || !w[1]));
                prop_assert_eq!(flags.iter().filter(|&&a| a).count(), trace.accepted_count);
                prop_assert!(trace.accepted_count <= n && flags.len() <= n);
            }
        }
    }
}
