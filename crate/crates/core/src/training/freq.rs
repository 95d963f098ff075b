//! Token frequency statistics and frequency-ranked vocabulary truncation.

use serde::{Deserialize, Serialize};

use crate::dist::TokenId;
use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreqStats {
    pub counts: Vec<u64>,
    pub total: u64,
}

impl FreqStats {
    pub fn vocab_size(&self) -> usize {
        self.counts.len()
    }

    pub fn merge(&self, other: &FreqStats) -> Result<FreqStats> {
        if self.counts.len() != other.counts.len() {
            return Err(LabError::dims("frequency stats", self.counts.len(), other.counts.len()));
        }
        Ok(FreqStats {
            counts: self.counts.iter().zip(&other.counts).map(|(a, b)| a + b).collect(),
            total: self.total + other.total,
        })
    }

    /// Token ids by descending count, ties to the lower id.
    pub fn ranking(&self) -> Vec<TokenId> {
        let mut ids: Vec<usize> = (0..self.counts.len()).collect();
        ids.sort_by(|&a, &b| self.counts[b].cmp(&self.counts[a]).then(a.cmp(&b)));
        ids.into_iter().map(TokenId::from_index).collect()
    }

    /// Share of the stream covered by the `size` most frequent tokens.
    pub fn coverage(&self, size: usize) -> f64 {
        let mut sorted = self.counts.clone();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        sorted.iter().take(size).sum::<u64>() as f64 / self.total as f64
    }

    /// Smallest truncated-vocabulary size whose empirical coverage reaches
    /// `target`.
    pub fn size_for_coverage(&self, target: f64) -> Result<usize> {
        if !(target > 0.0 && target <= 1.0) {
            return Err(LabError::InvalidArgument(format!(
                "coverage must be in (0, 1], got {target}"
            )));
        }
        let mut sorted = self.counts.clone();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        let mut acc = 0u64;
        for (i, c) in sorted.iter().enumerate() {
            acc += c;
            if acc as f64 >= target * self.total as f64 {
                return Ok(i + 1);
            }
        }
        Ok(self.counts.len())
    }
}

pub fn collect_freq_stats(stream: &[TokenId], vocab_size: usize) -> Result<FreqStats> {
    if stream.is_empty() {
        return Err(LabError::InvalidArgument("token stream is empty".into()));
    }
    let mut counts = vec![0u64; vocab_size];
    for t in stream {
        let slot = counts
            .get_mut(t.index())
            .ok_or_else(|| LabError::InvalidArgument(format!("token {t} outside vocabulary of size {vocab_size}")))?;
        *slot += 1;
    }
    Ok(FreqStats {
        counts,
        total: stream.len() as u64,
    })
}

/// The `size` most frequent tokens, returned in ascending id order.
pub fn select_truncated_vocab(stats: &FreqStats, size: usize) -> Result<Vec<TokenId>> {
    if size == 0 || size > stats.vocab_size() {
        return Err(LabError::InvalidArgument(format!(
            "truncated size must be in 1..={}, got {size}",
            stats.vocab_size()
        )));
    }
    let mut kept = stats.ranking();
    kept.truncate(size);
    kept.sort_unstable();
    Ok(kept)
}
