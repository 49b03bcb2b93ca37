//! Beyond-log gap location and fill-token sequence construction.
//!
//! Two-stage location: rules first (a big time delta, a primary-category
//! change, their conjunction, or their union), then a model filter keeping
//! only pairs whose observed continuation ranks far down the co-occurrence
//! model's prediction list. Surviving pairs are `P_U`: suspected genuine
//! gaps, which become unlabeled fill slots.
//!
//! Independently, `P_L` marks observed positions whose item demonstrably
//! helps predict its successor (probability gain over leaving it out). Those
//! items can be masked during training while retaining their ground truth,
//! giving the fill model supervision without any external labels. A position
//! claimed by both sets stays with `P_U`: a genuine gap outranks a proxy
//! label.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::baseline::CoocModel;
use crate::error::{Error, Result};
use crate::types::{ItemId, UserId};
use crate::worldgen::{HiddenTruth, UserSequence};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocationScheme {
    Td,
    Cd,
    TdAndCd,
    TdUnionCd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocatorConfig {
    /// Seconds; gaps longer than this trip the time rule.
    pub tau_time: f64,
    /// Continuations ranked deeper than this count as surprising.
    pub n_rank: usize,
    /// Minimum probability gain for a position to earn a training label.
    pub tau_coh: f64,
    pub scheme: LocationScheme,
}

impl Default for LocatorConfig {
    fn default() -> Self {
        LocatorConfig {
            tau_time: 3600.0,
            n_rank: 50,
            tau_coh: 0.1,
            scheme: LocationScheme::TdAndCd,
        }
    }
}

impl LocatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_time > 0.0) {
            return Err(Error::config("tau_time must be positive"));
        }
        if self.n_rank == 0 {
            return Err(Error::config("n_rank must be at least 1"));
        }
        if !(self.tau_coh > 0.0) {
            return Err(Error::config("tau_coh must be positive"));
        }
        Ok(())
    }
}

/// Quantile of all inter-event gaps across observed sequences, in seconds.
/// The default locator threshold is the 0.95 quantile: ordinary in-session
/// and between-session gaps sit below it, censored spans above.
pub fn tau_time_percentile(seqs: &[UserSequence], quantile: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&quantile) {
        return Err(Error::config("quantile must be in [0, 1]"));
    }
    let mut gaps: Vec<u64> = Vec::new();
    for seq in seqs {
        for pair in seq.events.windows(2) {
            gaps.push(pair[1].ts - pair[0].ts);
        }
    }
    if gaps.is_empty() {
        return Err(Error::data("no inter-event gaps to take a quantile of"));
    }
    gaps.sort_unstable();
    let idx = ((gaps.len() - 1) as f64 * quantile).round() as usize;
    Ok(gaps[idx] as f64)
}

/// Rule-based candidates: after-positions `t` such that the pair
/// `(t, t+1)` passes the configured scheme. Sequences with fewer than two
/// events yield nothing.
pub fn rule_filter(
    seq: &UserSequence,
    categories: &BTreeMap<ItemId, String>,
    cfg: &LocatorConfig,
) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (t, pair) in seq.events.windows(2).enumerate() {
        let dt = (pair[1].ts - pair[0].ts) as f64;
        let td = dt > cfg.tau_time;
        let cat = |id: ItemId| -> Result<&String> {
            categories
                .get(&id)
                .ok_or_else(|| Error::data(format!("item {id} has no category")))
        };
        let cd = cat(pair[0].item_id)? != cat(pair[1].item_id)?;
        let hit = match cfg.scheme {
            LocationScheme::Td => td,
            LocationScheme::Cd => cd,
            LocationScheme::TdAndCd => td && cd,
            LocationScheme::TdUnionCd => td || cd,
        };
        if hit {
            out.push(t);
        }
    }
    Ok(out)
}

/// Stage two: keep a candidate pair only when the observed continuation
/// ranks deeper than `n_rank` in the model's prediction list.
pub fn model_filter(
    candidates: &[usize],
    items: &[ItemId],
    model: &CoocModel,
    n_rank: usize,
) -> Vec<usize> {
    candidates
        .iter()
        .copied()
        .filter(|&t| model.rank_of(&items[..=t], items[t + 1]) > n_rank)
        .collect()
}

/// Probability gain of keeping `items[t]` when predicting `items[t+1]`.
pub fn prob_gain(items: &[ItemId], t: usize, model: &CoocModel) -> f64 {
    model.next_prob(&items[..=t], items[t + 1]) - model.next_prob(&items[..t], items[t + 1])
}

/// Labeled positions: `t` where the item demonstrably explains its
/// successor (gain above `tau_coh`), minus anything `p_u` already claims.
/// Sequences shorter than three events are skipped.
pub fn label_positions(
    items: &[ItemId],
    model: &CoocModel,
    tau_coh: f64,
    p_u: &[usize],
) -> Vec<usize> {
    if items.len() < 3 {
        return Vec::new();
    }
    let claimed: BTreeSet<usize> = p_u.iter().flat_map(|&t| [t, t + 1]).collect();
    (0..items.len() - 1)
        .filter(|&t| !claimed.contains(&t) && prob_gain(items, t, model) > tau_coh)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocatedUser {
    pub user_id: UserId,
    /// Suspected genuine gaps; a value `t` means "between t and t+1".
    pub p_u: Vec<usize>,
    /// Observed positions that can be masked with known ground truth.
    pub p_l: Vec<usize>,
}

pub fn locate(
    seqs: &[UserSequence],
    categories: &BTreeMap<ItemId, String>,
    model: &CoocModel,
    cfg: &LocatorConfig,
) -> Result<Vec<LocatedUser>> {
    cfg.validate()?;
    seqs.iter()
        .map(|seq| {
            let items: Vec<ItemId> = seq.events.iter().map(|e| e.item_id).collect();
            let candidates = rule_filter(seq, categories, cfg)?;
            let p_u = model_filter(&candidates, &items, model, cfg.n_rank);
            let p_l = label_positions(&items, model, cfg.tau_coh, &p_u);
            Ok(LocatedUser {
                user_id: seq.user_id,
                p_u,
                p_l,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "slot", rename_all = "lowercase")]
pub enum TokenSlot {
    Obs { item_id: ItemId },
    Fill,
    Mask { item_id: ItemId },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub user_id: UserId,
    pub slots: Vec<TokenSlot>,
}

impl TokenSeq {
    pub fn observed_items(&self) -> Vec<ItemId> {
        self.slots
            .iter()
            .filter_map(|s| match s {
                TokenSlot::Obs { item_id } => Some(*item_id),
                _ => None,
            })
            .collect()
    }
}

/// Fill-augmented training sequences: items at `p_l` become maskable slots
/// that keep their ground truth; a fill slot lands between every `p_u` pair.
/// Observed order is untouched.
pub fn build_token_sequences(
    seqs: &[UserSequence],
    located: &[LocatedUser],
) -> Result<Vec<TokenSeq>> {
    if seqs.len() != located.len() {
        return Err(Error::data(format!(
            "{} sequences but {} location records",
            seqs.len(),
            located.len()
        )));
    }
    let mut out = Vec::with_capacity(seqs.len());
    for (seq, loc) in seqs.iter().zip(located) {
        if seq.user_id != loc.user_id {
            return Err(Error::data(format!(
                "sequence user {} does not match location record user {}",
                seq.user_id, loc.user_id
            )));
        }
        let len = seq.events.len();
        let p_u: BTreeSet<usize> = loc.p_u.iter().copied().collect();
        let p_l: BTreeSet<usize> = loc.p_l.iter().copied().collect();
        if let Some(&t) = p_l.iter().find(|&&t| t >= len) {
            return Err(Error::data(format!("labeled position {t} out of range")));
        }
        if let Some(&t) = p_u.iter().find(|&&t| t + 1 >= len) {
            return Err(Error::data(format!("gap position {t} out of range")));
        }
        if let Some(&t) = p_l.iter().find(|&&t| p_u.contains(&t) || (t > 0 && p_u.contains(&(t - 1)))) {
            return Err(Error::data(format!(
                "position {t} is claimed by both a gap and a label"
            )));
        }
        let mut slots = Vec::with_capacity(len + p_u.len());
        for (t, ev) in seq.events.iter().enumerate() {
            if p_l.contains(&t) {
                slots.push(TokenSlot::Mask { item_id: ev.item_id });
            } else {
                slots.push(TokenSlot::Obs { item_id: ev.item_id });
            }
            if p_u.contains(&t) {
                slots.push(TokenSlot::Fill);
            }
        }
        out.push(TokenSeq {
            user_id: seq.user_id,
            slots,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocationReport {
    pub flagged: usize,
    pub hits: usize,
    pub truth_gaps: usize,
    pub precision: f64,
    pub recall: f64,
}

/// Scores located gaps against planted truth. A flagged position hits when
/// some hidden run sits exactly after that observed index.
pub fn location_metrics(located: &[LocatedUser], truth: &[HiddenTruth]) -> LocationReport {
    let by_user: BTreeMap<UserId, BTreeSet<usize>> = truth
        .iter()
        .map(|t| {
            (
                t.user_id,
                t.gaps.iter().map(|g| g.after_index).collect::<BTreeSet<_>>(),
            )
        })
        .collect();
    let mut flagged = 0usize;
    let mut hits = 0usize;
    let mut recalled = 0usize;
    for loc in located {
        let gaps = by_user.get(&loc.user_id);
        flagged += loc.p_u.len();
        if let Some(gaps) = gaps {
            let flagged_set: BTreeSet<usize> = loc.p_u.iter().copied().collect();
            hits += loc.p_u.iter().filter(|t| gaps.contains(t)).count();
            recalled += gaps.iter().filter(|g| flagged_set.contains(g)).count();
        }
    }
    let truth_gaps: usize = truth.iter().map(|t| t.gaps.len()).sum();
    LocationReport {
        flagged,
        hits,
        truth_gaps,
        precision: if flagged > 0 { hits as f64 / flagged as f64 } else { 0.0 },
        recall: if truth_gaps > 0 { recalled as f64 / truth_gaps as f64 } else { 0.0 },
    }
}
