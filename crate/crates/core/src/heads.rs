//! The four draft LM-head designs and their FLOP models.
//!
//! Every head maps a drafter hidden state `h ∈ R^d` to logits over the full
//! vocabulary. Heads that only score a subset of tokens (truncated, routed)
//! return a [`LogitVector`] whose off-support entries are `-inf`, so the
//! verifier sees exactly zero draft probability there.
//!
//! | kind      | MACs per drafted token |
//! |-----------|------------------------|
//! | full      | `V·d`                  |
//! | slimspec  | `r·d + V·r`            |
//! | truncated | `V_tr·d`               |
//! | routed    | `r·d + V·r + k·d`      |

use std::cmp::Ordering;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{embed_support, LogitVector, SparseLogits, TokenId};
use crate::error::{LabError, Result};
use crate::linalg::{dot, Matrix, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Full,
    SlimSpec,
    Truncated,
    Routed,
}

impl HeadKind {
    pub const ALL: [HeadKind; 4] = [
        HeadKind::Full,
        HeadKind::SlimSpec,
        HeadKind::Truncated,
        HeadKind::Routed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Full => "full",
            HeadKind::SlimSpec => "slimspec",
            HeadKind::Truncated => "truncated",
            HeadKind::Routed => "routed",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Multiply-accumulate count of one head forward pass per drafted token.
/// Biases and the softmax are not counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FlopCount {
    pub macs: u64,
}

/// Dimensions of a head, enough to evaluate its FLOP formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadShape {
    Full { v: u64, d: u64 },
    SlimSpec { v: u64, d: u64, r: u64 },
    Truncated { v: u64, d: u64, v_tr: u64 },
    Routed { v: u64, d: u64, r: u64, k: u64 },
}

impl HeadShape {
    pub fn flops(self) -> FlopCount {
        let macs = match self {
            HeadShape::Full { v, d } => v * d,
            HeadShape::SlimSpec { v, d, r } => r * d + v * r,
            HeadShape::Truncated { d, v_tr, .. } => v_tr * d,
            HeadShape::Routed { v, d, r, k } => r * d + v * r + k * d,
        };
        FlopCount { macs }
    }

    pub fn kind(self) -> HeadKind {
        match self {
            HeadShape::Full { .. } => HeadKind::Full,
            HeadShape::SlimSpec { .. } => HeadKind::SlimSpec,
            HeadShape::Truncated { .. } => HeadKind::Truncated,
            HeadShape::Routed { .. } => HeadKind::Routed,
        }
    }

    /// The kind-specific size parameter: `r`, `V_tr` or `k` (`V` for full).
    pub fn size_param(self) -> u64 {
        match self {
            HeadShape::Full { v, .. } => v,
            HeadShape::SlimSpec { r, .. } => r,
            HeadShape::Truncated { v_tr, .. } => v_tr,
            HeadShape::Routed { k, .. } => k,
        }
    }
}

/// SlimSpec cost relative to the full head, `(r·d + V·r) / (V·d)`.
pub fn flop_ratio(v: u64, d: u64, r: u64) -> f64 {
    (r * d + v * r) as f64 / (v * d) as f64
}

/// Construction recipe for an untrained head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum HeadSpec {
    Full,
    SlimSpec { r: usize },
    Truncated { index_map: Vec<TokenId> },
    Routed { r: usize, k: usize },
}

impl HeadSpec {
    pub fn kind(&self) -> HeadKind {
        match self {
            HeadSpec::Full => HeadKind::Full,
            HeadSpec::SlimSpec { .. } => HeadKind::SlimSpec,
            HeadSpec::Truncated { .. } => HeadKind::Truncated,
            HeadSpec::Routed { .. } => HeadKind::Routed,
        }
    }
}

fn to_scalar<T: Scalar>(h: &[f64]) -> Vec<T> {
    h.iter().map(|&x| T::from_f64(x)).collect()
}

fn to_f64<T: Scalar>(z: &[T]) -> Vec<f64> {
    z.iter().map(|x| x.to_f64()).collect()
}

fn check_hidden(h_len: usize, d: usize) -> Result<()> {
    if h_len != d {
        return Err(LabError::dims("hidden vector", d, h_len));
    }
    Ok(())
}

/// Splits a row-major `rows × batch` buffer into per-example columns.
fn columns<T: Scalar>(buf: &[T], rows: usize, batch: usize) -> Vec<Vec<T>> {
    (0..batch)
        .map(|j| (0..rows).map(|i| buf[i * batch + j]).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullHead<T = f64> {
    pub weight: Matrix<T>,
}

impl<T: Scalar> FullHead<T> {
    pub fn new(weight: Matrix<T>) -> Result<Self> {
        if !weight.is_finite() {
            return Err(LabError::InvalidArgument(
                "full head weight has non-finite entries".into(),
            ));
        }
        Ok(Self { weight })
    }

    pub fn random<R: Rng + ?Sized>(v: usize, d: usize, rng: &mut R) -> Self {
        Self {
            weight: Matrix::uniform(v, d, 1.0 / (d as f64).sqrt(), rng),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.weight.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, h: &[f64]) -> Result<LogitVector> {
        check_hidden(h.len(), self.hidden_dim())?;
        let z = self.weight.matvec(&to_scalar::<T>(h));
        Ok(LogitVector::dense(to_f64(&z)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlimSpecHead<T = f64> {
    /// `V × r`
    pub w_up: Matrix<T>,
    /// `r × d`
    pub w_down: Matrix<T>,
}

impl<T: Scalar> SlimSpecHead<T> {
    /// Requires `r < d`.
    pub fn new(w_up: Matrix<T>, w_down: Matrix<T>) -> Result<Self> {
        let head = Self::new_allow_full_rank(w_up, w_down)?;
        if head.rank() >= head.hidden_dim() {
            return Err(LabError::InvalidArgument(format!(
                "slimspec rank {} must be below hidden size {}",
                head.rank(),
                head.hidden_dim()
            )));
        }
        Ok(head)
    }

    /// Like [`SlimSpecHead::new`] but also accepts `r == d`, which is only
    /// useful for checking equivalence with a full head.
    pub fn new_allow_full_rank(w_up: Matrix<T>, w_down: Matrix<T>) -> Result<Self> {
        if w_up.cols() != w_down.rows() {
            return Err(LabError::dims("slimspec rank", w_up.cols(), w_down.rows()));
        }
        if w_down.rows() == 0 || w_down.rows() > w_down.cols() {
            return Err(LabError::InvalidArgument(format!(
                "slimspec rank {} must be in 1..={}",
                w_down.rows(),
                w_down.cols()
            )));
        }
        if !(w_up.is_finite() && w_down.is_finite()) {
            return Err(LabError::InvalidArgument(
                "slimspec factors have non-finite entries".into(),
            ));
        }
        Ok(Self { w_up, w_down })
    }

    /// `w_down ~ U(±1/√d)`, `w_up ~ U(±1/√r)`.
    pub fn random<R: Rng + ?Sized>(v: usize, d: usize, r: usize, rng: &mut R) -> Result<Self> {
        let w_down = Matrix::uniform(r, d, 1.0 / (d as f64).sqrt(), rng);
        let w_up = Matrix::uniform(v, r, 1.0 / (r as f64).sqrt(), rng);
        Self::new_allow_full_rank(w_up, w_down)
    }

    pub fn rank(&self) -> usize {
        self.w_down.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.w_up.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_down.cols()
    }

    /// `W_up · (W_down · h)`; the `V × d` product is never formed.
    pub fn forward(&self, h: &[f64]) -> Result<LogitVector> {
        check_hidden(h.len(), self.hidden_dim())?;
        let compressed = self.w_down.matvec(&to_scalar::<T>(h));
        let z = self.w_up.matvec(&compressed);
        Ok(LogitVector::dense(to_f64(&z)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedHead<T = f64> {
    /// `V_tr × d`, row `j` scores token `index_map[j]`.
    pub weight: Matrix<T>,
    pub index_map: Vec<TokenId>,
    vocab_size: usize,
}

impl<T: Scalar> TruncatedHead<T> {
    pub fn new(weight: Matrix<T>, index_map: Vec<TokenId>, vocab_size: usize) -> Result<Self> {
        validate_index_map(&index_map, vocab_size)?;
        if weight.rows() != index_map.len() {
            return Err(LabError::dims("truncated head rows", index_map.len(), weight.rows()));
        }
        if !weight.is_finite() {
            return Err(LabError::InvalidArgument(
                "truncated head weight has non-finite entries".into(),
            ));
        }
        Ok(Self {
            weight,
            index_map,
            vocab_size,
        })
    }

    pub fn random<R: Rng + ?Sized>(index_map: Vec<TokenId>, vocab_size: usize, d: usize, rng: &mut R) -> Result<Self> {
        let weight = Matrix::uniform(index_map.len(), d, 1.0 / (d as f64).sqrt(), rng);
        Self::new(weight, index_map, vocab_size)
    }

    /// Gathers the rows of a full head for the kept tokens.
    pub fn from_full(full: &FullHead<T>, index_map: Vec<TokenId>) -> Result<Self> {
        validate_index_map(&index_map, full.vocab_size())?;
        let d = full.hidden_dim();
        let mut data = Vec::with_capacity(index_map.len() * d);
        for t in &index_map {
            data.extend_from_slice(full.weight.row(t.index()));
        }
        Self::new(
            Matrix::from_vec(index_map.len(), d, data)?,
            index_map,
            full.vocab_size(),
        )
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn truncated_size(&self) -> usize {
        self.index_map.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.weight.cols()
    }

    /// The `V_tr` logits over the kept tokens.
    pub fn forward_sparse(&self, h: &[f64]) -> Result<SparseLogits> {
        check_hidden(h.len(), self.hidden_dim())?;
        let z = self.weight.matvec(&to_scalar::<T>(h));
        Ok(SparseLogits {
            vocab_size: self.vocab_size,
            support: self.index_map.clone(),
            values: to_f64(&z),
        })
    }

    pub fn forward(&self, h: &[f64]) -> Result<LogitVector> {
        embed_support(&self.forward_sparse(h)?)
    }
}

pub(crate) fn validate_index_map(index_map: &[TokenId], vocab_size: usize) -> Result<()> {
    if index_map.is_empty() {
        return Err(LabError::InvalidSupport("truncated vocabulary is empty".into()));
    }
    if index_map.windows(2).any(|w| w[0] >= w[1]) {
        return Err(LabError::InvalidSupport("index map must be strictly increasing".into()));
    }
    if let Some(last) = index_map.last() {
        if last.index() >= vocab_size {
            return Err(LabError::InvalidSupport(format!(
                "token {last} outside vocabulary of size {vocab_size}"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutedHead<T = f64> {
    /// `r × d`
    pub router_down: Matrix<T>,
    /// `V × r`
    pub router_up: Matrix<T>,
    /// `V × d` exact-logit weights, independent of the router.
    pub weight: Matrix<T>,
    pub k: usize,
}

impl<T: Scalar> RoutedHead<T> {
    pub fn new(router_down: Matrix<T>, router_up: Matrix<T>, weight: Matrix<T>, k: usize) -> Result<Self> {
        if router_up.cols() != router_down.rows() {
            return Err(LabError::dims("router rank", router_up.cols(), router_down.rows()));
        }
        if router_down.cols() != weight.cols() {
            return Err(LabError::dims("router hidden size", weight.cols(), router_down.cols()));
        }
        if router_up.rows() != weight.rows() {
            return Err(LabError::dims("router vocabulary", weight.rows(), router_up.rows()));
        }
        if k == 0 || k > weight.rows() {
            return Err(LabError::InvalidArgument(format!(
                "routed k must be in 1..={}, got {k}",
                weight.rows()
            )));
        }
        if !(router_down.is_finite() && router_up.is_finite() && weight.is_finite()) {
            return Err(LabError::InvalidArgument("routed head has non-finite entries".into()));
        }
        Ok(Self {
            router_down,
            router_up,
            weight,
            k,
        })
    }

    pub fn random<R: Rng + ?Sized>(v: usize, d: usize, r: usize, k: usize, rng: &mut R) -> Result<Self> {
        let router_down = Matrix::uniform(r, d, 1.0 / (d as f64).sqrt(), rng);
        let router_up = Matrix::uniform(v, r, 1.0 / (r as f64).sqrt(), rng);
        let weight = Matrix::uniform(v, d, 1.0 / (d as f64).sqrt(), rng);
        Self::new(router_down, router_up, weight, k)
    }

    pub fn vocab_size(&self) -> usize {
        self.weight.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn rank(&self) -> usize {
        self.router_down.rows()
    }

    /// Router scores `router_up · (router_down · h)` over the full vocabulary.
    pub fn router_scores(&self, h: &[f64]) -> Result<Vec<f64>> {
        check_hidden(h.len(), self.hidden_dim())?;
        let hs = to_scalar::<T>(h);
        let compressed = self.router_down.matvec(&hs);
        Ok(to_f64(&self.router_up.matvec(&compressed)))
    }

    pub fn forward(&self, h: &[f64]) -> Result<LogitVector> {
        let scores = self.router_scores(h)?;
        let support = top_k(&scores, self.k);
        let hs = to_scalar::<T>(h);
        let values = support
            .iter()
            .map(|t| dot(self.weight.row(t.index()), &hs).to_f64())
            .collect();
        embed_support(&SparseLogits {
            vocab_size: self.vocab_size(),
            support,
            values,
        })
    }
}

/// Indices of the `k` largest scores (ties to the lower id), ascending.
pub fn top_k(scores: &[f64], k: usize) -> Vec<TokenId> {
    let k = k.min(scores.len());
    if k == scores.len() {
        return (0..scores.len()).map(TokenId::from_index).collect();
    }
    let mut idx: Vec<u32> = (0..scores.len() as u32).collect();
    let by_rank = |a: &u32, b: &u32| -> Ordering {
        scores[*b as usize]
            .partial_cmp(&scores[*a as usize])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    if k > 0 {
        idx.select_nth_unstable_by(k - 1, by_rank);
    }
    idx.truncate(k);
    idx.sort_unstable();
    idx.into_iter().map(TokenId).collect()
}

/// A draft LM head of any of the four designs.
#[derive(Debug, Clone, PartialEq)]
pub enum DraftHead<T = f64> {
    Full(FullHead<T>),
    SlimSpec(SlimSpecHead<T>),
    Truncated(TruncatedHead<T>),
    Routed(RoutedHead<T>),
}

impl<T: Scalar> DraftHead<T> {
    /// Untrained head with seeded uniform initialization.
    pub fn init<R: Rng + ?Sized>(spec: &HeadSpec, v: usize, d: usize, rng: &mut R) -> Result<Self> {
        Ok(match spec {
            HeadSpec::Full => DraftHead::Full(FullHead::random(v, d, rng)),
            HeadSpec::SlimSpec { r } => DraftHead::SlimSpec(SlimSpecHead::random(v, d, *r, rng)?),
            HeadSpec::Truncated { index_map } => {
                DraftHead::Truncated(TruncatedHead::random(index_map.clone(), v, d, rng)?)
            }
            HeadSpec::Routed { r, k } => DraftHead::Routed(RoutedHead::random(v, d, *r, *k, rng)?),
        })
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            DraftHead::Full(_) => HeadKind::Full,
            DraftHead::SlimSpec(_) => HeadKind::SlimSpec,
            DraftHead::Truncated(_) => HeadKind::Truncated,
            DraftHead::Routed(_) => HeadKind::Routed,
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            DraftHead::Full(h) => h.vocab_size(),
            DraftHead::SlimSpec(h) => h.vocab_size(),
            DraftHead::Truncated(h) => h.vocab_size(),
            DraftHead::Routed(h) => h.vocab_size(),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        match self {
            DraftHead::Full(h) => h.hidden_dim(),
            DraftHead::SlimSpec(h) => h.hidden_dim(),
            DraftHead::Truncated(h) => h.hidden_dim(),
            DraftHead::Routed(h) => h.hidden_dim(),
        }
    }

    pub fn shape(&self) -> HeadShape {
        let v = self.vocab_size() as u64;
        let d = self.hidden_dim() as u64;
        match self {
            DraftHead::Full(_) => HeadShape::Full { v, d },
            DraftHead::SlimSpec(h) => HeadShape::SlimSpec {
                v,
                d,
                r: h.rank() as u64,
            },
            DraftHead::Truncated(h) => HeadShape::Truncated {
                v,
                d,
                v_tr: h.truncated_size() as u64,
            },
            DraftHead::Routed(h) => HeadShape::Routed {
                v,
                d,
                r: h.rank() as u64,
                k: h.k as u64,
            },
        }
    }

    pub fn flops(&self) -> FlopCount {
        self.shape().flops()
    }

    pub fn forward(&self, h: &[f64]) -> Result<LogitVector> {
        match self {
            DraftHead::Full(head) => head.forward(h),
            DraftHead::SlimSpec(head) => head.forward(h),
            DraftHead::Truncated(head) => head.forward(h),
            DraftHead::Routed(head) => head.forward(h),
        }
    }

    /// Forward pass over a batch. Dense heads stream each weight row once
    /// for the whole batch; the routed head selects per example.
    pub fn forward_batch(&self, hs: &[Vec<f64>]) -> Result<Vec<LogitVector>> {
        let d = self.hidden_dim();
        for h in hs {
            check_hidden(h.len(), d)?;
        }
        let batch = hs.len();
        let xs: Vec<Vec<T>> = hs.iter().map(|h| to_scalar(h)).collect();
        match self {
            DraftHead::Full(head) => {
                let out = head.weight.matmul_batch(&xs);
                Ok(columns(&out, head.vocab_size(), batch)
                    .into_iter()
                    .map(|z| LogitVector::dense(to_f64(&z)))
                    .collect())
            }
            DraftHead::SlimSpec(head) => {
                let compressed = columns(&head.w_down.matmul_batch(&xs), head.rank(), batch);
                let out = head.w_up.matmul_batch(&compressed);
                Ok(columns(&out, head.vocab_size(), batch)
                    .into_iter()
                    .map(|z| LogitVector::dense(to_f64(&z)))
                    .collect())
            }
            DraftHead::Truncated(head) => {
                let out = head.weight.matmul_batch(&xs);
                columns(&out, head.truncated_size(), batch)
                    .into_iter()
                    .map(|z| {
                        embed_support(&SparseLogits {
                            vocab_size: head.vocab_size(),
                            support: head.index_map.clone(),
                            values: to_f64(&z),
                        })
                    })
                    .collect()
            }
            DraftHead::Routed(head) => hs.iter().map(|h| head.forward(h)).collect(),
        }
    }

    /// Named parameter matrices in checkpoint order.
    pub fn matrices(&self) -> Vec<(&'static str, &Matrix<T>)> {
        match self {
            DraftHead::Full(h) => vec![("weight", &h.weight)],
            DraftHead::SlimSpec(h) => vec![("w_up", &h.w_up), ("w_down", &h.w_down)],
            DraftHead::Truncated(h) => vec![("weight", &h.weight)],
            DraftHead::Routed(h) => vec![
                ("router_down", &h.router_down),
                ("router_up", &h.router_up),
                ("weight", &h.weight),
            ],
        }
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix<T>> {
        match self {
            DraftHead::Full(h) => vec![&mut h.weight],
            DraftHead::SlimSpec(h) => vec![&mut h.w_up, &mut h.w_down],
            DraftHead::Truncated(h) => vec![&mut h.weight],
            DraftHead::Routed(h) => vec![&mut h.router_down, &mut h.router_up, &mut h.weight],
        }
    }

    /// Same head with every parameter set to zero; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for m in out.matrices_mut() {
            m.data_mut().iter_mut().for_each(|x| *x = T::ZERO);
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> DraftHead<U> {
        match self {
            DraftHead::Full(h) => DraftHead::Full(FullHead {
                weight: h.weight.cast(),
            }),
            DraftHead::SlimSpec(h) => DraftHead::SlimSpec(SlimSpecHead {
                w_up: h.w_up.cast(),
                w_down: h.w_down.cast(),
            }),
            DraftHead::Truncated(h) => DraftHead::Truncated(TruncatedHead {
                weight: h.weight.cast(),
                index_map: h.index_map.clone(),
                vocab_size: h.vocab_size,
            }),
            DraftHead::Routed(h) => DraftHead::Routed(RoutedHead {
                router_down: h.router_down.cast(),
                router_up: h.router_up.cast(),
                weight: h.weight.cast(),
                k: h.k,
            }),
        }
    }
}

pub fn full_forward<T: Scalar>(head: &FullHead<T>, h: &[f64]) -> Result<LogitVector> {
    head.forward(h)
}

pub fn slimspec_forward<T: Scalar>(head: &SlimSpecHead<T>, h: &[f64]) -> Result<LogitVector> {
    head.forward(h)
}

pub fn truncated_forward<T: Scalar>(head: &TruncatedHead<T>, h: &[f64]) -> Result<LogitVector> {
    head.forward(h)
}

pub fn routed_forward<T: Scalar>(head: &RoutedHead<T>, h: &[f64]) -> Result<LogitVector> {
    head.forward(h)
}

pub fn head_flops<T: Scalar>(head: &DraftHead<T>) -> FlopCount {
    head.flops()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{normalize, DecodeTemperature};
    use crate::seed::rng_for;

    fn naive_product(w: &Matrix<f64>, h: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; w.rows()];
        for i in 0..w.rows() {
            for j in 0..w.cols() {
                out[i] += w.get(i, j) * h[j];
            }
        }
        out
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
    }

    fn hidden(d: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_for(seed, "hidden");
        (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn full_identity_and_zero() {
        let h = vec![0.5, -2.0, 3.0];
        let head = FullHead::new(Matrix::<f64>::identity(3)).unwrap();
        assert_eq!(full_forward(&head, &h).unwrap().values(), &h[..]);
        let zero = FullHead::new(Matrix::<f64>::zeros(4, 3)).unwrap();
        assert_eq!(full_forward(&zero, &h).unwrap().values(), &[0.0; 4]);
    }

    #[test]
    fn full_matches_naive_product() {
        let mut rng = rng_for(3, "full");
        let head = FullHead::<f64>::random(37, 19, &mut rng);
        let h = hidden(19, 3);
        let want = naive_product(&head.weight, &h);
        let got = full_forward(&head, &h).unwrap();
        for (a, b) in got.values().iter().zip(&want) {
            assert!(rel_close(*a, *b, 1e-12), "{a} vs {b}");
        }
    }

    #[test]
    fn full_rejects_wrong_hidden() {
        let mut rng = rng_for(3, "full");
        let head = FullHead::<f64>::random(5, 4, &mut rng);
        assert!(matches!(
            head.forward(&[1.0; 3]),
            Err(LabError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn slimspec_identity_factors() {
        let h = vec![1.0, -1.0, 0.25];
        let head = SlimSpecHead::new_allow_full_rank(Matrix::<f64>::identity(3), Matrix::identity(3)).unwrap();
        assert_eq!(slimspec_forward(&head, &h).unwrap().values(), &h[..]);
        // r == d is refused by the strict constructor
        assert!(SlimSpecHead::new(Matrix::<f64>::identity(3), Matrix::identity(3)).is_err());
    }

    #[test]
    fn slimspec_rank_one_closed_form() {
        let u = vec![1.0, 2.0, -1.0, 0.5];
        let w = vec![0.5, -0.25, 2.0];
        let h = vec![2.0, 4.0, 1.0];
        let head = SlimSpecHead::new(
            Matrix::from_vec(4, 1, u.clone()).unwrap(),
            Matrix::from_vec(1, 3, w.clone()).unwrap(),
        )
        .unwrap();
        let s: f64 = w.iter().zip(&h).map(|(a, b)| a * b).sum();
        let want: Vec<f64> = u.iter().map(|x| x * s).collect();
        assert_eq!(head.forward(&h).unwrap().values(), &want[..]);
    }

    #[test]
    fn slimspec_matches_materialized_product() {
        for case in 0..100u64 {
            let mut rng = rng_for(case, "slimspec-oracle");
            let (v, d, r) = (50, 16, 1 + (case as usize % 15));
            let head = SlimSpecHead::<f64>::random(v, d, r, &mut rng).unwrap();
            let h = hidden(d, case);
            let dense = head.w_up.matmul(&head.w_down).unwrap();
            let want = naive_product(&dense, &h);
            let got = head.forward(&h).unwrap();
            for (a, b) in got.values().iter().zip(&want) {
                assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "case {case}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn truncated_without_truncation_equals_full() {
        let mut rng = rng_for(4, "trunc");
        let full = FullHead::<f64>::random(6, 5, &mut rng);
        let all: Vec<TokenId> = (0..6).map(TokenId::from_index).collect();
        let tr = TruncatedHead::from_full(&full, all).unwrap();
        let h = hidden(5, 4);
        assert_eq!(tr.forward(&h).unwrap().values(), full.forward(&h).unwrap().values());
    }

    #[test]
    fn truncated_gathers_rows() {
        let mut rng = rng_for(5, "trunc");
        let full = FullHead::<f64>::random(4, 3, &mut rng);
        let tr = TruncatedHead::from_full(&full, vec![TokenId(1), TokenId(3)]).unwrap();
        let h = hidden(3, 5);
        let zf = full.forward(&h).unwrap();
        let zt = truncated_forward(&tr, &h).unwrap();
        assert_eq!(zt.values()[1], zf.values()[1]);
        assert_eq!(zt.values()[3], zf.values()[3]);
        assert_eq!(zt.values()[0], f64::NEG_INFINITY);
        let q = normalize(&zt, DecodeTemperature::UNIT).unwrap();
        assert_eq!(q.probs()[0], 0.0);
        assert_eq!(q.probs()[2], 0.0);
    }

    #[test]
    fn truncated_singleton_is_point_mass() {
        let mut rng = rng_for(6, "trunc");
        let tr = TruncatedHead::<f64>::random(vec![TokenId(2)], 5, 3, &mut rng).unwrap();
        let q = normalize(&tr.forward(&hidden(3, 6)).unwrap(), DecodeTemperature::UNIT).unwrap();
        assert_eq!(q, crate::dist::ProbDist::point_mass(5, TokenId(2)));
    }

    #[test]
    fn truncated_rejects_bad_index_map() {
        let m = Matrix::<f64>::zeros(2, 3);
        assert!(TruncatedHead::new(m.clone(), vec![TokenId(2), TokenId(1)], 4).is_err());
        assert!(TruncatedHead::new(m.clone(), vec![TokenId(1), TokenId(4)], 4).is_err());
        assert!(TruncatedHead::new(m, vec![TokenId(1)], 4).is_err());
    }

    #[test]
    fn routed_full_k_equals_full() {
        let mut rng = rng_for(7, "routed");
        let head = RoutedHead::<f64>::random(9, 4, 2, 9, &mut rng).unwrap();
        let full = FullHead::new(head.weight.clone()).unwrap();
        let h = hidden(4, 7);
        let z = routed_forward(&head, &h).unwrap();
        assert!(z.support().is_none());
        assert_eq!(z.values(), full.forward(&h).unwrap().values());
    }

    #[test]
    fn routed_top1_is_router_argmax() {
        let mut rng = rng_for(8, "routed");
        let head = RoutedHead::<f64>::random(12, 4, 2, 1, &mut rng).unwrap();
        let h = hidden(4, 8);
        let s = head.router_scores(&h).unwrap();
        let best = crate::dist::argmax_lowest(&s);
        assert_eq!(
            head.forward(&h).unwrap().support(),
            Some(&[TokenId::from_index(best)][..])
        );
    }

    #[test]
    fn routed_matches_full_sort_oracle() {
        for seed in 0..20 {
            let mut rng = rng_for(seed, "routed-oracle");
            let head = RoutedHead::<f64>::random(6, 4, 2, 3, &mut rng).unwrap();
            let h = hidden(4, seed);
            let s = head.router_scores(&h).unwrap();
            // oracle: stable sort of all ids by descending score
            let mut order: Vec<usize> = (0..6).collect();
            order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap());
            let mut want: Vec<usize> = order[..3].to_vec();
            want.sort();
            let z = head.forward(&h).unwrap();
            let got: Vec<usize> = z.support().unwrap().iter().map(|t| t.index()).collect();
            assert_eq!(got, want);
            let full = naive_product(&head.weight, &h);
            for &v in &want {
                assert!(rel_close(z.values()[v], full[v], 1e-12));
            }
        }
    }

    #[test]
    fn routed_logits_bit_identical_to_full() {
        let mut rng = rng_for(9, "routed");
        let head = RoutedHead::<f64>::random(40, 13, 3, 7, &mut rng).unwrap();
        let full = FullHead::new(head.weight.clone()).unwrap();
        let h = hidden(13, 9);
        let z = head.forward(&h).unwrap();
        let zf = full.forward(&h).unwrap();
        for t in z.support().unwrap() {
            assert_eq!(z.values()[t.index()].to_bits(), zf.values()[t.index()].to_bits());
        }
    }

    #[test]
    fn top_k_ties_prefer_low_ids() {
        let s = [1.0, 2.0, 2.0, 2.0, 0.0];
        assert_eq!(top_k(&s, 2), vec![TokenId(1), TokenId(2)]);
        assert_eq!(top_k(&s, 5).len(), 5);
    }

    #[test]
    fn flop_table_values() {
        assert_eq!(HeadShape::Full { v: 100_000, d: 4096 }.flops().macs, 409_600_000);
        assert_eq!(
            HeadShape::SlimSpec {
                v: 100_000,
                d: 4096,
                r: 512
            }
            .flops()
            .macs,
            53_297_152
        );
        assert_eq!(
            HeadShape::Truncated {
                v: 100_000,
                d: 4096,
                v_tr: 64_000
            }
            .flops()
            .macs,
            262_144_000
        );
    }

    #[test]
    fn flop_ratio_values() {
        assert!((flop_ratio(100_000, 4096, 512) - 0.130_12).abs() < 1e-15);
        assert_eq!(flop_ratio(4, 2, 1), 0.75);
        assert!((flop_ratio(1000, 64, 64) - (1.0 + 64.0 / 1000.0)).abs() < 1e-15);
    }

    #[test]
    fn slimspec_cheaper_below_crossover() {
        let (v, d) = (1000u64, 64u64);
        for r in 1..=d {
            let slim = HeadShape::SlimSpec { v, d, r }.flops().macs;
            let full = HeadShape::Full { v, d }.flops().macs;
            // r < d·V/(V+d)  <=>  r·(V+d) < V·d
            assert_eq!(slim < full, r * (v + d) < v * d, "r = {r}");
        }
    }

    #[test]
    fn batch_forward_matches_single() {
        let mut rng = rng_for(10, "batch");
        let hs: Vec<Vec<f64>> = (0..3).map(|i| hidden(8, 100 + i)).collect();
        let heads: Vec<DraftHead<f64>> = vec![
            DraftHead::init(&HeadSpec::Full, 20, 8, &mut rng).unwrap(),
            DraftHead::init(&HeadSpec::SlimSpec { r: 3 }, 20, 8, &mut rng).unwrap(),
            DraftHead::init(
                &HeadSpec::Truncated {
                    index_map: vec![TokenId(0), TokenId(5), TokenId(19)],
                },
                20,
                8,
                &mut rng,
            )
            .unwrap(),
            DraftHead::init(&HeadSpec::Routed { r: 2, k: 4 }, 20, 8, &mut rng).unwrap(),
        ];
        for head in &heads {
            let batch = head.forward_batch(&hs).unwrap();
            for (h, z) in hs.iter().zip(&batch) {
                assert_eq!(z, &head.forward(h).unwrap(), "{}", head.kind());
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn truncated_mass_stays_on_index_map(
                seed in any::<u64>(),
                mask in prop::collection::vec(any::<bool>(), 24),
                h in prop::collection::vec(-3.0f64..3.0, 6),
                temp in 0.0f64..2.0,
            ) {
                let mut keep: Vec<TokenId> = (0..24).filter(|&i| mask[i]).map(TokenId::from_index).collect();
                if keep.is_empty() { keep.push(TokenId(7)); }
                let mut rng = rng_for(seed, "prop-truncated");
                let head: DraftHead = DraftHead::init(&HeadSpec::Truncated { index_map: keep.clone() }, 24, 6, &mut rng).unwrap();
                let q = normalize(&head.forward(&h).unwrap(), DecodeTemperature::new(temp).unwrap()).unwrap();
                for (i, &x) in q.probs().iter().enumerate() {
                    if keep.binary_search(&TokenId::from_index(i)).is_err() {
                        prop_assert_eq!(x, 0.0);
                    }
                }
            }

            #[test]
            fn routed_support_logits_are_full_logits(
                seed in any::<u64>(),
                k in 1usize..30,
                h in prop::collection::vec(-3.0f64..3.0, 8),
            ) {
                let mut rng = rng_for(seed, "prop-routed");
                let DraftHead::Routed(head) = DraftHead::<f64>::init(&HeadSpec::Routed { r: 3, k }, 30, 8, &mut rng).unwrap() else {
                    unreachable!()
                };
                let full = FullHead::new(head.weight.clone()).unwrap();
                let dense = full_forward(&full, &h).unwrap();
                let s = routed_forward(&head, &h).unwrap().restrict();
                prop_assert_eq!(s.support.len(), k);
                for (t, z) in s.support.iter().zip(&s.values) {
                    prop_assert_eq!(z.to_bits(), dense.values()[t.index()].to_bits());
                }
            }

            #[test]
            fn slimspec_below_crossover_is_cheaper(v in 1u64..1_000_000, d in 1u64..8192, r in 1u64..8192) {
                let slim = HeadShape::SlimSpec { v, d, r }.flops().macs;
                let full = HeadShape::Full { v, d }.flops().macs;
                prop_assert_eq!(slim < full, (r as u128) * ((v + d) as u128) < (v as u128) * (d as u128));
            }
        }
    }
}
