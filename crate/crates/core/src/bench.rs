//! Wall-clock measurement of head latency and of the drafting step.
//!
//! Every timed region runs on the calling thread; callers must not run
//! other work concurrently.

use std::hint::black_box;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{normalize, DecodeTemperature, LogitVector, TokenId};
use crate::engine::{verify, BorrowedDrafter};
use crate::error::{LabError, Result};
use crate::heads::{DraftHead, HeadKind, HeadSpec};
use crate::linalg::Scalar;
use crate::models::{DrafterBackbone, ToyTargetModel};
use crate::perfmodel::TimingBreakdown;
use crate::seed::{derive_seed, rng_for};

pub const MIN_REPS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingSample {
    pub median_s: f64,
    pub p10_s: f64,
    pub p90_s: f64,
    pub reps: usize,
    pub warmup_reps: usize,
    pub batch: usize,
    pub v: usize,
    pub d: usize,
    /// Folded from the outputs so the timed work cannot be elided.
    pub checksum: f64,
}

/// Linear-interpolation percentile of sorted data, `q ∈ [0, 1]`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn median(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    percentile(&s, 0.5)
}

fn check_reps(reps: usize) -> Result<()> {
    if reps < MIN_REPS {
        return Err(LabError::InvalidArgument(format!(
            "reps must be at least {MIN_REPS}, got {reps}"
        )));
    }
    Ok(())
}

fn fold(z: &LogitVector) -> f64 {
    let vals = z.values();
    [vals[0], vals[vals.len() / 2], vals[vals.len() - 1]]
        .iter()
        .filter(|x| x.is_finite())
        .sum()
}

/// Median, p10 and p90 of the forward pass over a seeded batch of hidden
/// vectors; `warmup` untimed passes come first.
pub fn measure_head<T: Scalar>(
    head: &DraftHead<T>,
    batch: usize,
    reps: usize,
    warmup: usize,
    seed: u64,
) -> Result<TimingSample> {
    check_reps(reps)?;
    if batch == 0 {
        return Err(LabError::InvalidArgument("batch must be positive".into()));
    }
    let d = head.hidden_dim();
    let mut rng = rng_for(seed, "bench-hidden");
    let hs: Vec<Vec<f64>> = (0..batch)
        .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let run = |hs: &[Vec<f64>]| -> Result<f64> {
        let out = if hs.len() == 1 {
            vec![head.forward(&hs[0])?]
        } else {
            head.forward_batch(hs)?
        };
        Ok(black_box(&out).iter().map(fold).sum())
    };
    let mut checksum = 0.0;
    for _ in 0..warmup {
        checksum += run(&hs)?;
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        checksum += run(black_box(&hs))?;
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok(TimingSample {
        median_s: percentile(&times, 0.5),
        p10_s: percentile(&times, 0.1),
        p90_s: percentile(&times, 0.9),
        reps,
        warmup_reps: warmup,
        batch,
        v: head.vocab_size(),
        d,
        checksum,
    })
}

/// `T_head^M / T_head^Full` as a ratio of medians.
pub fn nu_of(head_sample: &TimingSample, full_sample: &TimingSample) -> Result<f64> {
    let (a, b) = (head_sample, full_sample);
    if (a.v, a.d, a.batch) != (b.v, b.d, b.batch) {
        return Err(LabError::InvalidArgument(format!(
            "samples measured at different settings: (V, d, batch) = ({}, {}, {}) vs ({}, {}, {})",
            a.v, a.d, a.batch, b.v, b.d, b.batch
        )));
    }
    if !(b.median_s > 0.0) {
        return Err(LabError::DivisionByZero("full-head median latency"));
    }
    Ok(a.median_s / b.median_s)
}

#[derive(Default)]
struct PhaseTimes {
    backbone: f64,
    head: f64,
}

/// Drafts `n` tokens, timing the backbone and the head phase separately
/// when `phases` is given. The head phase covers the logits, the draft
/// distribution and the token choice: all of it is `O(V)` work that shrinks
/// with the head.
fn timed_draft<T: Scalar, R: Rng>(
    drafter: &BorrowedDrafter<'_, T>,
    context: &[TokenId],
    n: usize,
    rng: &mut R,
    mut phases: Option<&mut PhaseTimes>,
) -> Result<Vec<(TokenId, crate::dist::ProbDist)>> {
    let mut ctx = context.to_vec();
    let mut drafted = Vec::with_capacity(n);
    for _ in 0..n {
        let t0 = phases.is_some().then(Instant::now);
        let h = drafter.backbone.hidden(&ctx)?;
        let t1 = phases.is_some().then(Instant::now);
        let q = normalize(&drafter.head.forward(black_box(&h))?, DecodeTemperature::UNIT)?;
        let tok = q.sample(rng);
        if let (Some(p), Some(t0), Some(t1)) = (phases.as_deref_mut(), t0, t1) {
            let t2 = Instant::now();
            p.backbone += (t1 - t0).as_secs_f64();
            p.head += (t2 - t1).as_secs_f64();
        }
        ctx.push(tok);
        drafted.push((tok, q));
    }
    Ok(drafted)
}

/// Median wall time of drafting `n` tokens as one timed region.
pub fn measure_draft<T: Scalar>(
    backbone: &DrafterBackbone,
    head: &DraftHead<T>,
    context: &[TokenId],
    n: usize,
    reps: usize,
    seed: u64,
) -> Result<TimingSample> {
    check_reps(reps)?;
    let drafter = BorrowedDrafter::new(backbone, head)?;
    let mut rng = rng_for(seed, "bench-draft");
    let mut times = Vec::with_capacity(reps);
    let mut checksum = 0.0;
    for _ in 0..=reps {
        let start = Instant::now();
        let drafted = timed_draft(&drafter, context, n, &mut rng, None)?;
        times.push(start.elapsed().as_secs_f64());
        checksum += black_box(&drafted).iter().map(|(t, _)| t.0 as f64).sum::<f64>();
    }
    // The first pass is warmup.
    times.remove(0);
    times.sort_by(f64::total_cmp);
    Ok(TimingSample {
        median_s: percentile(&times, 0.5),
        p10_s: percentile(&times, 0.1),
        p90_s: percentile(&times, 0.9),
        reps,
        warmup_reps: 1,
        batch: 1,
        v: head.vocab_size(),
        d: head.hidden_dim(),
        checksum,
    })
}

/// Times full speculative rounds and splits each into backbone, head and
/// verification phases (medians over `reps`); the overhead is the median
/// round time minus the parts, floored at 0.
pub fn decompose_draft<T: Scalar>(
    backbone: &DrafterBackbone,
    head: &DraftHead<T>,
    target: &ToyTargetModel,
    context: &[TokenId],
    n: usize,
    reps: usize,
    seed: u64,
) -> Result<TimingBreakdown> {
    check_reps(reps)?;
    if target.vocab_size() != head.vocab_size() {
        return Err(LabError::dims(
            "target vocabulary",
            head.vocab_size(),
            target.vocab_size(),
        ));
    }
    let drafter = BorrowedDrafter::new(backbone, head)?;
    let mut rng = rng_for(seed, "bench-decompose");
    let (mut bb, mut hd, mut vf, mut total) = (vec![], vec![], vec![], vec![]);
    for rep in 0..=reps {
        let mut phases = PhaseTimes::default();
        let start = Instant::now();
        let drafted = timed_draft(&drafter, context, n, &mut rng, Some(&mut phases))?;
        let tv = Instant::now();
        let mut ctx = context.to_vec();
        let mut p_list = Vec::with_capacity(n + 1);
        for i in 0..=n {
            p_list.push(target.next_dist(&ctx, DecodeTemperature::UNIT)?);
            if i < n {
                ctx.push(drafted[i].0);
            }
        }
        let trace = verify(&p_list, drafted, DecodeTemperature::UNIT, &mut rng)?;
        let end = Instant::now();
        black_box(trace);
        if rep == 0 {
            continue;
        }
        bb.push(phases.backbone);
        hd.push(phases.head);
        vf.push((end - tv).as_secs_f64());
        total.push((end - start).as_secs_f64());
    }
    let (t_backbone, t_head, t_verify) = (median(&bb), median(&hd), median(&vf));
    let t_overhead = (median(&total) - t_backbone - t_head - t_verify).max(0.0);
    TimingBreakdown::new(t_overhead, t_verify, t_backbone, t_head)
}

/// A head design in a benchmark grid, sized relative to `(V, d)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BenchHead {
    Full,
    #[serde(rename = "slimspec")]
    SlimSpec {
        rank_divisor: usize,
    },
    Truncated {
        /// `V_tr / V`.
        fraction: f64,
    },
    Routed {
        rank_divisor: usize,
        k: usize,
    },
}

impl BenchHead {
    pub fn kind(&self) -> HeadKind {
        match self {
            BenchHead::Full => HeadKind::Full,
            BenchHead::SlimSpec { .. } => HeadKind::SlimSpec,
            BenchHead::Truncated { .. } => HeadKind::Truncated,
            BenchHead::Routed { .. } => HeadKind::Routed,
        }
    }

    pub fn spec(&self, v: usize, d: usize) -> Result<HeadSpec> {
        let rank = |div: usize| {
            if div == 0 || d % div != 0 || d / div == 0 {
                Err(LabError::InvalidArgument(format!(
                    "rank divisor {div} does not divide d = {d}"
                )))
            } else {
                Ok(d / div)
            }
        };
        Ok(match *self {
            BenchHead::Full => HeadSpec::Full,
            BenchHead::SlimSpec { rank_divisor } => HeadSpec::SlimSpec { r: rank(rank_divisor)? },
            BenchHead::Truncated { fraction } => {
                if !(fraction > 0.0 && fraction <= 1.0) {
                    return Err(LabError::InvalidArgument(format!(
                        "truncated fraction {fraction} not in (0, 1]"
                    )));
                }
                let v_tr = ((v as f64 * fraction).round() as usize).max(1);
                HeadSpec::Truncated {
                    index_map: (0..v_tr).map(TokenId::from_index).collect(),
                }
            }
            BenchHead::Routed { rank_divisor, k } => HeadSpec::Routed {
                r: rank(rank_divisor)?,
                k,
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub vocab_size: usize,
    pub hidden_dims: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    pub heads: Vec<BenchHead>,
    pub reps: usize,
    pub warmup: usize,
    pub precision: Precision,
    /// Draft-step decomposition per head kind; skipped when `null`.
    pub decomposition: Option<DecompositionConfig>,
}

/// Settings for [`run_decomposition`]: a small backbone of width
/// `backbone_d` drafting `n` tokens, so the head dominates as it does at
/// scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecompositionConfig {
    pub backbone_d: usize,
    pub n: usize,
    pub reps: usize,
}

impl Default for DecompositionConfig {
    fn default() -> Self {
        Self {
            backbone_d: 64,
            n: 6,
            reps: 15,
        }
    }
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            vocab_size: 131072,
            hidden_dims: vec![1024, 2048],
            batch_sizes: vec![1, 64],
            heads: vec![
                BenchHead::Full,
                BenchHead::SlimSpec { rank_divisor: 4 },
                BenchHead::SlimSpec { rank_divisor: 8 },
                BenchHead::SlimSpec { rank_divisor: 16 },
                BenchHead::Truncated { fraction: 0.5 },
                BenchHead::Routed {
                    rank_divisor: 8,
                    k: 1024,
                },
            ],
            reps: 30,
            warmup: 3,
            precision: Precision::F32,
            decomposition: Some(DecompositionConfig::default()),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        check_reps(self.reps)?;
        if self.vocab_size < 2 || self.hidden_dims.is_empty() || self.batch_sizes.is_empty() || self.heads.is_empty() {
            return Err(LabError::InvalidArgument(
                "bench grid needs vocab_size >= 2 and non-empty hidden_dims, batch_sizes and heads".into(),
            ));
        }
        if self.hidden_dims.contains(&0) || self.batch_sizes.contains(&0) {
            return Err(LabError::InvalidArgument(
                "hidden dims and batch sizes must be positive".into(),
            ));
        }
        for &d in &self.hidden_dims {
            for h in &self.heads {
                let spec = h.spec(self.vocab_size, d)?;
                if let HeadSpec::SlimSpec { r } = spec {
                    if r >= d {
                        return Err(LabError::InvalidArgument(format!(
                            "slimspec rank {r} must be below d = {d}"
                        )));
                    }
                }
                if let HeadSpec::Routed { k, .. } = spec {
                    if k == 0 || k > self.vocab_size {
                        return Err(LabError::InvalidArgument(format!("routed k = {k} outside 1..=V")));
                    }
                }
            }
        }
        if let Some(dc) = &self.decomposition {
            check_reps(dc.reps)?;
            if dc.backbone_d == 0 {
                return Err(LabError::InvalidArgument(
                    "decomposition backbone_d must be positive".into(),
                ));
            }
            for h in &self.heads {
                h.spec(self.vocab_size, dc.backbone_d)?;
            }
        }
        Ok(())
    }
}

/// One line of the bench CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub kind: HeadKind,
    pub v: usize,
    pub d: usize,
    /// `r` for slimspec, `V_tr` for truncated, `k` for routed, `V` for full.
    pub r_or_vtr_or_k: u64,
    pub batch: usize,
    pub reps: usize,
    pub median_s: f64,
    pub p10_s: f64,
    pub p90_s: f64,
    pub flops: u64,
    pub nu: f64,
}

fn row(head_shape: crate::heads::HeadShape, s: &TimingSample, nu: f64) -> BenchRow {
    BenchRow {
        kind: head_shape.kind(),
        v: s.v,
        d: s.d,
        r_or_vtr_or_k: head_shape.size_param(),
        batch: s.batch,
        reps: s.reps,
        median_s: s.median_s,
        p10_s: s.p10_s,
        p90_s: s.p90_s,
        flops: head_shape.flops().macs,
        nu,
    }
}

fn run_grid_point<T: Scalar>(
    config: &BenchConfig,
    d: usize,
    batch: usize,
    seed: u64,
    rows: &mut Vec<BenchRow>,
) -> Result<()> {
    let v = config.vocab_size;
    let mut rng = rng_for(seed, &format!("bench-head-{d}"));
    let measure = |head: &DraftHead<T>| measure_head(head, batch, config.reps, config.warmup, seed);
    let full: DraftHead<T> = DraftHead::init(&HeadSpec::Full, v, d, &mut rng)?;
    let baseline = measure(&full)?;
    // The full row is a second, independent measurement against the baseline.
    for _ in config.heads.iter().filter(|h| **h == BenchHead::Full) {
        let s = measure(&full)?;
        rows.push(row(full.shape(), &s, nu_of(&s, &baseline)?));
    }
    drop(full);
    for h in config.heads.iter().filter(|h| **h != BenchHead::Full) {
        let head: DraftHead<T> = DraftHead::init(&h.spec(v, d)?, v, d, &mut rng)?;
        let s = measure(&head)?;
        rows.push(row(head.shape(), &s, nu_of(&s, &baseline)?));
    }
    Ok(())
}

/// Runs every `(d, batch)` grid point; one row per configured head, with ν
/// against a full head measured first at the same point.
pub fn run_bench(config: &BenchConfig, seed: u64, mut progress: impl FnMut(&BenchRow)) -> Result<Vec<BenchRow>> {
    config.validate()?;
    let mut rows = Vec::new();
    for &d in &config.hidden_dims {
        for &batch in &config.batch_sizes {
            let start = rows.len();
            match config.precision {
                Precision::F32 => run_grid_point::<f32>(config, d, batch, seed, &mut rows)?,
                Precision::F64 => run_grid_point::<f64>(config, d, batch, seed, &mut rows)?,
            }
            rows[start..].iter().for_each(&mut progress);
        }
    }
    Ok(rows)
}

/// One line of the decomposition CSV. `kappa` is that of the full head and
/// repeats on every row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionRow {
    pub kind: HeadKind,
    pub v: usize,
    pub d: usize,
    pub r_or_vtr_or_k: u64,
    pub n: usize,
    pub reps: usize,
    pub t_overhead: f64,
    pub t_verify: f64,
    pub t_backbone: f64,
    pub t_head: f64,
    pub t_draft: f64,
    pub total: f64,
    pub kappa: f64,
}

fn decompose_all<T: Scalar>(
    config: &BenchConfig,
    dc: &DecompositionConfig,
    seed: u64,
) -> Result<Vec<DecompositionRow>> {
    let v = config.vocab_size;
    let target = ToyTargetModel::new(
        &crate::models::TargetConfig {
            vocab_size: v,
            ..Default::default()
        },
        derive_seed(seed, "bench-target"),
    )?;
    let backbone = DrafterBackbone::new(
        &crate::models::BackboneConfig {
            vocab_size: v,
            d: dc.backbone_d,
            context: target.context_window,
        },
        derive_seed(seed, "bench-backbone"),
    )?;
    let context: Vec<TokenId> = (1..=target.context_window)
        .map(|i| TokenId::from_index(i % v))
        .collect();
    let mut rng = rng_for(seed, "bench-decomposition-heads");
    let mut heads = vec![BenchHead::Full];
    heads.extend(config.heads.iter().copied().filter(|h| *h != BenchHead::Full));
    let mut rows = Vec::with_capacity(heads.len());
    let mut kappa_full = f64::NAN;
    for h in heads {
        let head: DraftHead<T> = DraftHead::init(&h.spec(v, dc.backbone_d)?, v, dc.backbone_d, &mut rng)?;
        let t = decompose_draft(&backbone, &head, &target, &context, dc.n, dc.reps, seed)?;
        if h == BenchHead::Full {
            kappa_full = crate::perfmodel::kappa(&t)?;
        }
        let shape = head.shape();
        rows.push(DecompositionRow {
            kind: shape.kind(),
            v,
            d: dc.backbone_d,
            r_or_vtr_or_k: shape.size_param(),
            n: dc.n,
            reps: dc.reps,
            t_overhead: t.t_overhead,
            t_verify: t.t_verify,
            t_backbone: t.t_backbone,
            t_head: t.t_head,
            t_draft: t.t_draft(),
            total: t.total(),
            kappa: kappa_full,
        });
    }
    if !config.heads.contains(&BenchHead::Full) {
        rows.remove(0);
    }
    Ok(rows)
}

/// Decomposes one speculative round for every configured head kind (plus
/// a full head for κ); empty when the config has no decomposition.
pub fn run_decomposition(config: &BenchConfig, seed: u64) -> Result<Vec<DecompositionRow>> {
    config.validate()?;
    let Some(dc) = &config.decomposition else {
        return Ok(Vec::new());
    };
    match config.precision {
        Precision::F32 => decompose_all::<f32>(config, dc, seed),
        Precision::F64 => decompose_all::<f64>(config, dc, seed),
    }
}
