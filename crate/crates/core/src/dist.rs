//! Vocabularies, logits, probability distributions and the conversions
//! between them. All distribution math is `f64`.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Sum-to-one tolerance for a valid [`ProbDist`].
pub const PROB_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn from_index(i: usize) -> Self {
        TokenId(i as u32)
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
}

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(LabError::InvalidArgument(format!(
                "vocabulary size must be at least 2, got {size}"
            )));
        }
        if size > u32::MAX as usize {
            return Err(LabError::InvalidArgument(format!("vocabulary size {size} too large")));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn token(&self, id: usize) -> Result<TokenId> {
        if id < self.size {
            Ok(TokenId::from_index(id))
        } else {
            Err(LabError::InvalidArgument(format!(
                "token {id} outside vocabulary of size {}",
                self.size
            )))
        }
    }

    pub fn contains(&self, t: TokenId) -> bool {
        t.index() < self.size
    }
}

/// Sampling temperature. Zero means greedy decoding.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct DecodeTemperature(f64);

impl DecodeTemperature {
    pub const GREEDY: Self = DecodeTemperature(0.0);
    pub const UNIT: Self = DecodeTemperature(1.0);

    pub fn new(t: f64) -> Result<Self> {
        if t.is_finite() && t >= 0.0 {
            Ok(Self(t))
        } else {
            Err(LabError::InvalidArgument(format!(
                "temperature must be finite and >= 0, got {t}"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_greedy(self) -> bool {
        self.0 == 0.0
    }
}

impl TryFrom<f64> for DecodeTemperature {
    type Error = LabError;
    fn try_from(t: f64) -> Result<Self> {
        Self::new(t)
    }
}

impl From<DecodeTemperature> for f64 {
    fn from(t: DecodeTemperature) -> f64 {
        t.0
    }
}

/// Pre-softmax scores over the full vocabulary. When `support` is present,
/// every entry outside it is `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector {
    values: Vec<f64>,
    support: Option<Vec<TokenId>>,
}

impl LogitVector {
    /// Full-support logits.
    pub fn dense(values: Vec<f64>) -> Self {
        Self { values, support: None }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Declared support, `None` meaning the full vocabulary.
    pub fn support(&self) -> Option<&[TokenId]> {
        self.support.as_deref()
    }

    pub fn in_support(&self, t: TokenId) -> bool {
        match &self.support {
            None => t.index() < self.values.len(),
            Some(s) => s.binary_search(&t).is_ok(),
        }
    }

    /// Values on the support only, in support order.
    pub fn restrict(&self) -> SparseLogits {
        match &self.support {
            None => SparseLogits {
                vocab_size: self.values.len(),
                support: (0..self.values.len()).map(TokenId::from_index).collect(),
                values: self.values.clone(),
            },
            Some(s) => SparseLogits {
                vocab_size: self.values.len(),
                support: s.clone(),
                values: s.iter().map(|t| self.values[t.index()]).collect(),
            },
        }
    }
}

/// Logits computed only on a subset of the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseLogits {
    pub vocab_size: usize,
    pub support: Vec<TokenId>,
    pub values: Vec<f64>,
}

/// Places sparse logits into a full-vocabulary vector, `-inf` off support.
/// On-support values are copied bit-exactly.
pub fn embed_support(sparse: &SparseLogits) -> Result<LogitVector> {
    if sparse.support.len() != sparse.values.len() {
        return Err(LabError::dims(
            "sparse logits",
            sparse.support.len(),
            sparse.values.len(),
        ));
    }
    let mut values = vec![f64::NEG_INFINITY; sparse.vocab_size];
    let mut seen = vec![false; sparse.vocab_size];
    for (&t, &z) in sparse.support.iter().zip(&sparse.values) {
        let i = t.index();
        if i >= sparse.vocab_size {
            return Err(LabError::InvalidSupport(format!(
                "token {t} outside vocabulary of size {}",
                sparse.vocab_size
            )));
        }
        if seen[i] {
            return Err(LabError::InvalidSupport(format!("duplicate token {t}")));
        }
        seen[i] = true;
        values[i] = z;
    }
    let mut support = sparse.support.clone();
    support.sort_unstable();
    let support = if support.len() == sparse.vocab_size {
        None
    } else {
        Some(support)
    };
    Ok(LogitVector { values, support })
}

/// A dense probability distribution over `[0, V)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist {
    probs: Vec<f64>,
}

impl ProbDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(LabError::EmptySupport);
        }
        let mut total = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if !(p.is_finite() && p >= 0.0) {
                return Err(LabError::Numerical(format!("probability {p} at token {i}")));
            }
            total += p;
        }
        if (total - 1.0).abs() > PROB_TOLERANCE {
            return Err(LabError::Numerical(format!("probabilities sum to {total}")));
        }
        Ok(Self { probs })
    }

    /// Point mass on `t`.
    pub fn point_mass(vocab_size: usize, t: TokenId) -> Self {
        let mut probs = vec![0.0; vocab_size];
        probs[t.index()] = 1.0;
        Self { probs }
    }

    pub fn uniform(vocab_size: usize) -> Self {
        Self {
            probs: vec![1.0 / vocab_size as f64; vocab_size],
        }
    }

    pub(crate) fn from_normalized(probs: Vec<f64>) -> Self {
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    #[inline]
    pub fn prob(&self, t: TokenId) -> f64 {
        self.probs[t.index()]
    }

    /// Highest-probability token, lowest id on ties.
    pub fn argmax(&self) -> TokenId {
        TokenId::from_index(argmax_lowest(&self.probs))
    }

    /// Total mass on a set of tokens.
    pub fn mass_on(&self, tokens: &[TokenId]) -> f64 {
        tokens.iter().map(|&t| self.prob(t)).sum()
    }

    /// Tokens with non-zero probability, ascending.
    pub fn support(&self) -> Vec<TokenId> {
        self.probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(i, _)| TokenId::from_index(i))
            .collect()
    }

    /// Inverse-CDF sample. Zero-mass tokens are never returned.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenId {
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        let mut last_positive = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                cum += p;
                last_positive = i;
                if u < cum {
                    return TokenId::from_index(i);
                }
            }
        }
        TokenId::from_index(last_positive)
    }

    pub fn total_variation(&self, other: &ProbDist) -> Result<f64> {
        check_len(self, other)?;
        Ok(0.5
            * self
                .probs
                .iter()
                .zip(&other.probs)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>())
    }
}

pub(crate) fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Converts logits to a distribution. Greedy temperature gives a point mass
/// on the lowest-id argmax; otherwise a max-subtracted softmax of `z / t`.
pub fn normalize(logits: &LogitVector, temperature: DecodeTemperature) -> Result<ProbDist> {
    let z = logits.values();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(LabError::EmptySupport);
    }
    if temperature.is_greedy() {
        return Ok(ProbDist::point_mass(z.len(), TokenId::from_index(argmax_lowest(z))));
    }
    let t = temperature.value();
    let mut probs: Vec<f64> = z
        .iter()
        .map(|&x| {
            if x == f64::NEG_INFINITY {
                0.0
            } else {
                ((x - max) / t).exp()
            }
        })
        .collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    Ok(ProbDist::from_normalized(probs))
}

fn check_len(p: &ProbDist, q: &ProbDist) -> Result<()> {
    if p.len() != q.len() {
        return Err(LabError::dims("distribution length", p.len(), q.len()));
    }
    Ok(())
}

/// Distributional overlap `Σ_v min(p(v), q(v))`, the per-position
/// acceptance probability of rejection sampling.
pub fn overlap(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    check_len(p, q)?;
    let a: f64 = p.probs.iter().zip(&q.probs).map(|(a, b)| a.min(*b)).sum();
    Ok(a.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;
    use proptest::prelude::*;

    fn t(x: f64) -> DecodeTemperature {
        DecodeTemperature::new(x).unwrap()
    }

    #[test]
    fn normalize_symmetric_pair() {
        let p = normalize(&LogitVector::dense(vec![0.0, 0.0]), t(1.0)).unwrap();
        assert_eq!(p.probs(), &[0.5, 0.5]);
    }

    #[test]
    fn normalize_ln2() {
        let p = normalize(&LogitVector::dense(vec![2f64.ln(), 0.0]), t(1.0)).unwrap();
        assert!((p.probs()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.probs()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn normalize_greedy_point_mass() {
        let p = normalize(&LogitVector::dense(vec![1.0, 3.0, 2.0]), DecodeTemperature::GREEDY).unwrap();
        assert_eq!(p.probs(), &[0.0, 1.0, 0.0]);
        // ties go to the lowest id
        let p = normalize(&LogitVector::dense(vec![3.0, 1.0, 3.0]), DecodeTemperature::GREEDY).unwrap();
        assert_eq!(p.argmax(), TokenId(0));
    }

    #[test]
    fn normalize_rejects_empty_support() {
        let z = LogitVector::dense(vec![f64::NEG_INFINITY; 3]);
        assert!(matches!(normalize(&z, t(1.0)), Err(LabError::EmptySupport)));
        assert!(matches!(
            normalize(&z, DecodeTemperature::GREEDY),
            Err(LabError::EmptySupport)
        ));
    }

    #[test]
    fn normalize_zero_at_neg_inf() {
        let z = LogitVector::dense(vec![f64::NEG_INFINITY, 1.0, 0.0]);
        let p = normalize(&z, t(0.7)).unwrap();
        assert_eq!(p.probs()[0], 0.0);
    }

    #[test]
    fn embed_support_places_values() {
        let s = SparseLogits {
            vocab_size: 4,
            support: vec![TokenId(1), TokenId(3)],
            values: vec![1.0, 2.0],
        };
        let z = embed_support(&s).unwrap();
        assert_eq!(z.values(), &[f64::NEG_INFINITY, 1.0, f64::NEG_INFINITY, 2.0]);
        assert_eq!(z.support(), Some(&[TokenId(1), TokenId(3)][..]));
    }

    #[test]
    fn embed_support_full_range_is_identity() {
        let vals = vec![0.3, -1.0, 2.5];
        let s = SparseLogits {
            vocab_size: 3,
            support: (0..3).map(TokenId::from_index).collect(),
            values: vals.clone(),
        };
        let z = embed_support(&s).unwrap();
        assert_eq!(z.values(), &vals[..]);
        assert!(z.support().is_none());
    }

    #[test]
    fn embed_support_singleton_normalizes_to_point_mass() {
        let s = SparseLogits {
            vocab_size: 3,
            support: vec![TokenId(0)],
            values: vec![0.0],
        };
        let p = normalize(&embed_support(&s).unwrap(), t(1.0)).unwrap();
        assert_eq!(p.probs(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn embed_support_rejects_bad_ids() {
        let dup = SparseLogits {
            vocab_size: 3,
            support: vec![TokenId(1), TokenId(1)],
            values: vec![0.0, 0.0],
        };
        assert!(matches!(embed_support(&dup), Err(LabError::InvalidSupport(_))));
        let oob = SparseLogits {
            vocab_size: 3,
            support: vec![TokenId(3)],
            values: vec![0.0],
        };
        assert!(matches!(embed_support(&oob), Err(LabError::InvalidSupport(_))));
    }

    #[test]
    fn overlap_examples() {
        let p = ProbDist::new(vec![0.5, 0.5]).unwrap();
        let q = ProbDist::new(vec![0.9, 0.1]).unwrap();
        assert!((overlap(&p, &q).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(overlap(&p, &p).unwrap(), 1.0);
        let a = ProbDist::new(vec![1.0, 0.0]).unwrap();
        let b = ProbDist::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(overlap(&a, &b).unwrap(), 0.0);
        let c = ProbDist::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert!(matches!(overlap(&p, &c), Err(LabError::DimensionMismatch { .. })));
    }

    #[test]
    fn probdist_validation() {
        assert!(ProbDist::new(vec![0.5, 0.6]).is_err());
        assert!(ProbDist::new(vec![-0.1, 1.1]).is_err());
        assert!(ProbDist::new(vec![0.5, 0.5 + 1e-12]).is_ok());
    }

    #[test]
    fn sampling_skips_zero_mass() {
        let p = ProbDist::new(vec![0.0, 0.25, 0.0, 0.75]).unwrap();
        let mut rng = rng_for(0, "sample");
        for _ in 0..1000 {
            let s = p.sample(&mut rng);
            assert!(s == TokenId(1) || s == TokenId(3));
        }
    }

    fn logits_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-20.0f64..20.0, 2..40)
    }

    proptest! {
        #[test]
        fn normalize_is_shift_invariant(z in logits_strategy(), c in -50.0f64..50.0, temp in 0.1f64..3.0) {
            let p = normalize(&LogitVector::dense(z.clone()), t(temp)).unwrap();
            let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
            let q = normalize(&LogitVector::dense(shifted), t(temp)).unwrap();
            for (a, b) in p.probs().iter().zip(q.probs()) {
                prop_assert!((a - b).abs() <= 1e-12 * a.max(*b));
            }
            prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < PROB_TOLERANCE);
        }

        #[test]
        fn truncated_overlap_bounded_by_coverage(
            z in logits_strategy(),
            w in prop::collection::vec(0.0f64..1.0, 40),
            mask in prop::collection::vec(any::<bool>(), 40),
        ) {
            let v = z.len();
            let p = normalize(&LogitVector::dense(z), t(1.0)).unwrap();
            let mut keep: Vec<TokenId> = (0..v).filter(|&i| mask[i]).map(TokenId::from_index).collect();
            if keep.is_empty() { keep.push(TokenId(0)); }
            let raw: Vec<f64> = keep.iter().map(|t| w[t.index()] + 1e-3).collect();
            let total: f64 = raw.iter().sum();
            let mut q = vec![0.0; v];
            for (t, r) in keep.iter().zip(&raw) { q[t.index()] = r / total; }
            let q = ProbDist::new(q).unwrap();
            prop_assert!(overlap(&p, &q).unwrap() <= p.mass_on(&keep) + 1e-12);
        }

        #[test]
        fn embed_restrict_round_trip(z in logits_strategy(), mask in prop::collection::vec(any::<bool>(), 40)) {
            let v = z.len();
            let mut support: Vec<TokenId> = (0..v).filter(|&i| mask[i]).map(TokenId::from_index).collect();
            if support.is_empty() { support.push(TokenId(0)); }
            let values: Vec<f64> = support.iter().map(|t| z[t.index()]).collect();
            let sparse = SparseLogits { vocab_size: v, support, values };
            let back = embed_support(&sparse).unwrap().restrict();
            prop_assert_eq!(back, sparse);
        }
    }
}
