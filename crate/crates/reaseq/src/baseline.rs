//! Decayed co-occurrence next-item model.
//!
//! Fitting scans each sequence with a window: every ordered pair within the
//! window adds `lambda^(gap-1)` to the predecessor's successor count.
//! Scoring walks the last `window` context items with the same decay and
//! Laplace-smooths over the whole vocabulary, so unseen transitions keep
//! nonzero probability. Cheap, deterministic, and strong enough to flag
//! positions where the observed continuation looks unlikely.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::types::ItemId;

#[derive(Clone, Debug)]
pub struct CoocModel {
    window: usize,
    lambda: f64,
    alpha: f64,
    /// Sorted distinct ids; Laplace smoothing runs over exactly this set.
    vocab: Vec<ItemId>,
    counts: BTreeMap<ItemId, BTreeMap<ItemId, f64>>,
    row_sums: BTreeMap<ItemId, f64>,
}

impl CoocModel {
    pub fn fit(
        sequences: &[Vec<ItemId>],
        window: usize,
        lambda: f64,
        alpha: f64,
        vocab: Vec<ItemId>,
    ) -> Result<Self> {
        if window == 0 {
            return Err(Error::config("window must be positive"));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::config("lambda must be in [0, 1]"));
        }
        if alpha <= 0.0 {
            return Err(Error::config("alpha must be positive"));
        }
        let mut vocab = vocab;
        vocab.sort_unstable();
        vocab.dedup();
        if vocab.is_empty() {
            return Err(Error::config("vocabulary is empty"));
        }
        let mut counts: BTreeMap<ItemId, BTreeMap<ItemId, f64>> = BTreeMap::new();
        let mut row_sums: BTreeMap<ItemId, f64> = BTreeMap::new();
        for seq in sequences {
            for u in 0..seq.len() {
                for v in (u + 1)..seq.len().min(u + 1 + window) {
                    let w = lambda.powi((v - u - 1) as i32);
                    *counts.entry(seq[u]).or_default().entry(seq[v]).or_default() += w;
                    *row_sums.entry(seq[u]).or_default() += w;
                }
            }
        }
        Ok(CoocModel {
            window,
            lambda,
            alpha,
            vocab,
            counts,
            row_sums,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn count(&self, from: ItemId, to: ItemId) -> f64 {
        self.counts
            .get(&from)
            .and_then(|m| m.get(&to))
            .copied()
            .unwrap_or(0.0)
    }

    /// Context items that still matter, most recent first, with their decay.
    fn recency<'a>(&self, context: &'a [ItemId]) -> impl Iterator<Item = (ItemId, f64)> + 'a {
        let lambda = self.lambda;
        context
            .iter()
            .rev()
            .take(self.window)
            .enumerate()
            .map(move |(j, &id)| (id, lambda.powi(j as i32)))
    }

    /// Unnormalized score of `item` following `context`.
    pub fn score(&self, context: &[ItemId], item: ItemId) -> f64 {
        self.recency(context)
            .map(|(from, w)| w * self.count(from, item))
            .sum()
    }

    fn denominator(&self, context: &[ItemId]) -> f64 {
        let mass: f64 = self
            .recency(context)
            .map(|(from, w)| w * self.row_sums.get(&from).copied().unwrap_or(0.0))
            .sum();
        mass + self.alpha * self.vocab.len() as f64
    }

    /// Laplace-smoothed probability that `item` comes next.
    pub fn next_prob(&self, context: &[ItemId], item: ItemId) -> f64 {
        (self.score(context, item) + self.alpha) / self.denominator(context)
    }

    /// 1-based rank of `item` among the vocabulary by next-probability.
    /// Equal scores break toward the smaller id, which therefore ranks ahead.
    pub fn rank_of(&self, context: &[ItemId], item: ItemId) -> usize {
        let s = self.score(context, item);
        // Only successors of recent context items can score above zero.
        let mut scored: BTreeMap<ItemId, f64> = BTreeMap::new();
        for (from, w) in self.recency(context) {
            if let Some(row) = self.counts.get(&from) {
                for (&to, &c) in row {
                    *scored.entry(to).or_default() += w * c;
                }
            }
        }
        let higher = scored.values().filter(|&&v| v > s).count();
        let ties_ahead = if s > 0.0 {
            scored
                .iter()
                .filter(|&(&y, &v)| v == s && y < item)
                .count()
        } else {
            // All zero scorers tie; vocab ids below this one minus the ones
            // that actually scored.
            let below = self.vocab.partition_point(|&y| y < item);
            let scored_below = scored.keys().filter(|&&y| y < item).count();
            below - scored_below
        };
        1 + higher + ties_ahead
    }
}
