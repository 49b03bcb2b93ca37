//! Offline evaluation: retrieval hit rates, same-SPU retrieval, in-batch
//! perplexity/accuracy for fill predictions, AUC/GAUC for ranking, and
//! report tables.
//!
//! In-batch softmax here uses raw cosine (no temperature), so the numbers
//! are comparable across models regardless of how they were trained.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::embedding::RepTable;
use crate::error::{Error, Result};
use crate::nn::cosine;
use crate::types::ItemId;

/// One retrieval impression: what the user saw, and what they clicked.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RetrievalCase {
    pub history: Vec<ItemId>,
    pub target: ItemId,
}

fn top_k(query: &[f32], pool: &RepTable, k: usize, exclude: Option<ItemId>) -> Vec<ItemId> {
    let ids = pool.ids();
    let mut scored: Vec<(f32, ItemId)> = (0..pool.len())
        .filter(|&i| Some(ids[i]) != exclude)
        .map(|i| (cosine(query, pool.row(i), 1e-12), ids[i]))
        .collect();
    // Ties break toward the smaller item id so ranking is reproducible.
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.truncate(k);
    scored.into_iter().map(|(_, id)| id).collect()
}

/// Hit rate where each history item retrieves its `k` nearest pool items
/// and the impression hits when the clicked target lands in the union.
/// An empty history counts as a miss.
pub fn hr_at_k(cases: &[RetrievalCase], pool: &RepTable, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    if cases.is_empty() {
        return Err(Error::data("no retrieval cases"));
    }
    let mut neighbor_cache: BTreeMap<ItemId, Vec<ItemId>> = BTreeMap::new();
    let mut hits = 0usize;
    for case in cases {
        let mut hit = false;
        for &item in &case.history {
            let neighbors = match neighbor_cache.get(&item) {
                Some(n) => n,
                None => {
                    let rep = pool.get(item)?;
                    let n = top_k(rep, pool, k, None);
                    neighbor_cache.entry(item).or_insert(n)
                }
            };
            if neighbors.contains(&case.target) {
                hit = true;
                break;
            }
        }
        hits += hit as usize;
    }
    Ok(hits as f64 / cases.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmHrReport {
    /// None when every query was a singleton.
    pub hit_rate: Option<f64>,
    pub evaluated: usize,
    pub singletons: usize,
}

/// Same-SPU hit rate: each item queries the pool (itself excluded) and hits
/// when any of its `k` nearest neighbors shares its SPU id. Items whose SPU
/// has no other member cannot hit by construction and sit outside the
/// denominator.
pub fn sm_hr_at_k(spus: &BTreeMap<ItemId, u64>, pool: &RepTable, k: usize) -> Result<SmHrReport> {
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    let mut spu_sizes: BTreeMap<u64, usize> = BTreeMap::new();
    for id in pool.ids() {
        let spu = spus
            .get(id)
            .ok_or_else(|| Error::data(format!("item {id} has no SPU id")))?;
        *spu_sizes.entry(*spu).or_insert(0) += 1;
    }
    let mut evaluated = 0usize;
    let mut singletons = 0usize;
    let mut hits = 0usize;
    for (i, &id) in pool.ids().iter().enumerate() {
        let spu = spus[&id];
        if spu_sizes[&spu] < 2 {
            singletons += 1;
            continue;
        }
        evaluated += 1;
        let neighbors = top_k(pool.row(i), pool, k, Some(id));
        if neighbors.iter().any(|n| spus[n] == spu) {
            hits += 1;
        }
    }
    Ok(SmHrReport {
        hit_rate: (evaluated > 0).then(|| hits as f64 / evaluated as f64),
        evaluated,
        singletons,
    })
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum SlotKind {
    Mask,
    Fill,
}

/// One sequence's evaluation payload: predictions at maskable slots with
/// their ground-truth reps, predictions at fill slots, and the sequence's
/// shared negatives (one per other batch sequence).
#[derive(Clone, Debug, Default)]
pub struct SeqEval {
    pub mask_preds: Vec<Vec<f32>>,
    pub mask_truths: Vec<Vec<f32>>,
    pub fill_preds: Vec<Vec<f32>>,
    pub negatives: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IbReport {
    pub ppl: f64,
    pub acc: f64,
    pub scored_slots: usize,
    pub skipped_slots: usize,
    pub sequences: usize,
}

fn slot_log_prob_and_hit(pred: &[f32], pos: &[f32], negatives: &[Vec<f32>]) -> (f64, bool) {
    let s_pos = cosine(pred, pos, 1e-12) as f64;
    let neg_sims: Vec<f64> = negatives
        .iter()
        .map(|n| cosine(pred, n, 1e-12) as f64)
        .collect();
    let max_neg = neg_sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let m = s_pos.max(max_neg);
    let z: f64 = (s_pos - m).exp() + neg_sims.iter().map(|s| (s - m).exp()).sum::<f64>();
    (s_pos - m - z.ln(), s_pos > max_neg)
}

/// In-batch perplexity and accuracy over a softmax of cosines against one
/// positive and the sequence's negatives. Per-sequence values first, then an
/// arithmetic mean over sequences that scored at least one slot. Under
/// `Fill`, the positive is the same sequence's nearest maskable ground
/// truth; fill slots with no ground truth in reach are skipped and counted.
pub fn ib_metrics(batch: &[SeqEval], kind: SlotKind) -> Result<IbReport> {
    let k = batch
        .first()
        .map(|s| s.negatives.len())
        .ok_or_else(|| Error::data("empty evaluation batch"))?;
    if k == 0 {
        return Err(Error::data("need at least one negative per sequence"));
    }
    if batch.iter().any(|s| s.negatives.len() != k) {
        return Err(Error::data("negative count differs across sequences"));
    }
    let mut seq_ppl = Vec::new();
    let mut seq_acc = Vec::new();
    let mut scored_slots = 0usize;
    let mut skipped_slots = 0usize;
    for seq in batch {
        let mut log_probs = Vec::new();
        let mut hit_count = 0usize;
        match kind {
            SlotKind::Mask => {
                if seq.mask_preds.len() != seq.mask_truths.len() {
                    return Err(Error::data(
                        "mask predictions and truths disagree in count",
                    ));
                }
                for (pred, truth) in seq.mask_preds.iter().zip(&seq.mask_truths) {
                    let (lp, hit) = slot_log_prob_and_hit(pred, truth, &seq.negatives);
                    log_probs.push(lp);
                    hit_count += hit as usize;
                }
            }
            SlotKind::Fill => {
                for pred in &seq.fill_preds {
                    let nearest = seq
                        .mask_truths
                        .iter()
                        .max_by(|a, b| {
                            cosine(pred, a, 1e-12).total_cmp(&cosine(pred, b, 1e-12))
                        });
                    match nearest {
                        Some(truth) => {
                            let (lp, hit) = slot_log_prob_and_hit(pred, truth, &seq.negatives);
                            log_probs.push(lp);
                            hit_count += hit as usize;
                        }
                        None => skipped_slots += 1,
                    }
                }
            }
        }
        if log_probs.is_empty() {
            continue;
        }
        let n = log_probs.len();
        scored_slots += n;
        seq_ppl.push((-log_probs.iter().sum::<f64>() / n as f64).exp());
        seq_acc.push(hit_count as f64 / n as f64);
    }
    if seq_ppl.is_empty() {
        return Err(Error::data("no slot was scored"));
    }
    let sequences = seq_ppl.len();
    Ok(IbReport {
        ppl: seq_ppl.iter().sum::<f64>() / sequences as f64,
        acc: seq_acc.iter().sum::<f64>() / sequences as f64,
        scored_slots,
        skipped_slots,
        sequences,
    })
}

/// Probability a positive outranks a negative, ties counted half. Needs
/// both classes.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::data("scores and labels differ in length"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::data("AUC needs both classes"));
    }
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for t in i..=j {
            rank[order[t]] = avg;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 = (0..n).filter(|&i| labels[i]).map(|i| rank[i]).sum();
    let np = n_pos as f64;
    Ok((pos_rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

#[derive(Clone, Debug, Default)]
pub struct UserOutcomes {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

/// Impression-weighted mean of per-user AUC. Users with one class of label
/// have no defined AUC and drop out, impressions included.
pub fn gauc(users: &[UserOutcomes]) -> Result<f64> {
    let mut weighted = 0.0f64;
    let mut weight = 0.0f64;
    for user in users {
        match auc(&user.scores, &user.labels) {
            Ok(a) => {
                let w = user.scores.len() as f64;
                weighted += w * a;
                weight += w;
            }
            Err(_) => continue,
        }
    }
    if weight == 0.0 {
        return Err(Error::data("no user has both label classes"));
    }
    Ok(weighted / weight)
}

/// Unweighted mean of per-group hit rates; groups that saw no cases are
/// excluded with a warning. Reported as "macro_recall(category-mean)"
/// because the usual definition varies.
pub fn macro_recall(groups: &[(String, usize, usize)]) -> Result<f64> {
    let mut rates = Vec::new();
    for (name, hits, total) in groups {
        if *total == 0 {
            log::warn!("macro recall: group {name} has no cases, excluded");
            continue;
        }
        rates.push(*hits as f64 / *total as f64);
    }
    if rates.is_empty() {
        return Err(Error::data("macro recall: every group was empty"));
    }
    Ok(rates.iter().sum::<f64>() / rates.len() as f64)
}

/// One row of a report table: a named configuration with its metric values
/// and supporting counts (for example fills vs observed slots).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub values: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, u64>,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in &self.values {
            if !v.is_finite() {
                return Err(Error::data(format!("metric {key} is not finite: {v}")));
            }
        }
        Ok(())
    }
}

/// Aligned text table over the union of all value and count columns.
pub fn render_table(rows: &[MetricReport]) -> String {
    let mut columns: Vec<String> = Vec::new();
    for row in rows {
        for key in row.values.keys().chain(row.counts.keys()) {
            if !columns.contains(key) {
                columns.push(key.clone());
            }
        }
    }
    let mut widths: Vec<usize> = columns.iter().map(|c| c.len()).collect();
    let name_width = rows
        .iter()
        .map(|r| r.name.len())
        .chain(["variant".len()])
        .max()
        .unwrap_or(7);
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|row| {
            columns
                .iter()
                .enumerate()
                .map(|(i, col)| {
                    let cell = if let Some(v) = row.values.get(col) {
                        format!("{v:.4}")
                    } else if let Some(c) = row.counts.get(col) {
                        c.to_string()
                    } else {
                        "-".to_string()
                    };
                    widths[i] = widths[i].max(cell.len());
                    cell
                })
                .collect()
        })
        .collect();
    let mut out = String::new();
    out.push_str(&format!("{:<name_width$}", "variant"));
    for (i, col) in columns.iter().enumerate() {
        out.push_str(&format!("  {:>width$}", col, width = widths[i]));
    }
    out.push('\n');
    for (row, row_cells) in rows.iter().zip(&cells) {
        out.push_str(&format!("{:<name_width$}", row.name));
        for (i, cell) in row_cells.iter().enumerate() {
            out.push_str(&format!("  {:>width$}", cell, width = widths[i]));
        }
        out.push('\n');
    }
    out
}
