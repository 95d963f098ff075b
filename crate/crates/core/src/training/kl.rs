//! Forward-KL objective and the masked target used with truncated heads.

use crate::dist::{normalize, DecodeTemperature, LogitVector, ProbDist, TokenId};
use crate::error::{LabError, Result};

/// `log q` for logits at unit temperature; `-inf` off support.
fn log_softmax(z: &[f64]) -> Result<Vec<f64>> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(LabError::EmptySupport);
    }
    let lse = max + z.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    Ok(z.iter().map(|&x| x - lse).collect())
}

fn check_support(p: &ProbDist, z: &LogitVector) -> Result<()> {
    if p.len() != z.len() {
        return Err(LabError::dims("KL operands", p.len(), z.len()));
    }
    for (i, (&pv, &zv)) in p.probs().iter().zip(z.values()).enumerate() {
        if pv > 0.0 && zv == f64::NEG_INFINITY {
            return Err(LabError::InfiniteKl {
                token: i as u32,
                mass: pv,
            });
        }
    }
    Ok(())
}

/// `KL(p ‖ softmax(z)) = Σ p(v) log(p(v) / q(v))`, with `0·log 0 = 0`.
pub fn kl_loss(p: &ProbDist, q_logits: &LogitVector) -> Result<f64> {
    check_support(p, q_logits)?;
    let log_q = log_softmax(q_logits.values())?;
    let loss = p
        .probs()
        .iter()
        .zip(&log_q)
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &lq)| pv * (pv.ln() - lq))
        .sum::<f64>();
    Ok(loss.max(0.0))
}

/// Gradient of [`kl_loss`] with respect to the logits: `q - p`.
/// Entries off the draft support are zero.
pub fn kl_grad(p: &ProbDist, q_logits: &LogitVector) -> Result<Vec<f64>> {
    check_support(p, q_logits)?;
    let q = normalize(q_logits, DecodeTemperature::UNIT)?;
    Ok(q.probs().iter().zip(p.probs()).map(|(qv, pv)| qv - pv).collect())
}

fn validate_keep(keep: &[TokenId], v: usize) -> Result<()> {
    if keep.is_empty() {
        return Err(LabError::InvalidSupport("keep set is empty".into()));
    }
    if keep.windows(2).any(|w| w[0] >= w[1]) {
        return Err(LabError::InvalidSupport("keep set must be strictly increasing".into()));
    }
    if keep.last().is_some_and(|t| t.index() >= v) {
        return Err(LabError::InvalidSupport(format!(
            "keep set exceeds vocabulary of size {v}"
        )));
    }
    Ok(())
}

/// `softmax(m ⊙ z)` where the mask sends logits outside `keep` to `-inf`.
pub fn masked_target(p_logits: &LogitVector, keep: &[TokenId]) -> Result<ProbDist> {
    validate_keep(keep, p_logits.len())?;
    let mut masked = vec![f64::NEG_INFINITY; p_logits.len()];
    for t in keep {
        masked[t.index()] = p_logits.values()[t.index()];
    }
    normalize(&LogitVector::dense(masked), DecodeTemperature::UNIT)
}

/// Masking applied to an already-normalized distribution:
/// `p(v) / Σ_keep p` on `keep`, zero elsewhere.
pub fn mask_probs(p: &ProbDist, keep: &[TokenId]) -> Result<ProbDist> {
    validate_keep(keep, p.len())?;
    let coverage = p.mass_on(keep);
    if coverage <= 0.0 {
        return Err(LabError::Numerical("target has no mass on the keep set".into()));
    }
    let mut out = vec![0.0; p.len()];
    for t in keep {
        out[t.index()] = p.prob(*t) / coverage;
    }
    Ok(ProbDist::from_normalized(out))
}
