//! Bidirectional fill model: a small transformer trained to reconstruct
//! masked history slots from both directions, then used to synthesize
//! vectors for located gaps.
//!
//! Item representations stay frozen throughout; the model owns only an
//! input adapter, the transformer stack, a shared special-slot embedding
//! (used for both maskable and fill slots), positional embeddings, and an
//! output projection back into representation space. Predictions are
//! unit-normalized so cosine against the catalog is meaningful.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::RepTable;
use crate::error::{Error, Result};
use crate::locator::{TokenSeq, TokenSlot};
use crate::metrics::{ib_metrics, IbReport, SeqEval, SlotKind};
use crate::nn::{
    adam_step, collect_grads, l2_normalize, linear, linear_forward, load_params,
    multi_head_attention, Grads, MhaVars, OptimConfig, ParamStore, Tape, Tensor, Var,
};
use crate::rng::stream_rng;
use crate::types::{ItemId, UserId};

const LN_EPS: f32 = 1e-5;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    InfonceCos,
    CosPointwise,
    MsePointwise,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TConditioning {
    None,
    ScalarEmbedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DllmConfig {
    /// Width of the frozen item representations.
    pub input_dim: usize,
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub temperature: f32,
    pub batch_size: usize,
    pub k_negatives: usize,
    pub steps: usize,
    /// Steps between held-out evaluations; 0 disables periodic eval.
    pub eval_every: usize,
    pub variant: LossVariant,
    pub t_conditioning: TConditioning,
    pub seed: u64,
    pub optim: OptimConfig,
}

impl Default for DllmConfig {
    fn default() -> Self {
        DllmConfig {
            input_dim: 32,
            model_dim: 32,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 128,
            temperature: 0.07,
            batch_size: 64,
            k_negatives: 63,
            steps: 1200,
            eval_every: 500,
            variant: LossVariant::InfonceCos,
            t_conditioning: TConditioning::None,
            seed: 17,
            optim: OptimConfig {
                learning_rate: 3e-3,
                warmup_steps: 100,
                total_steps: 1200,
                min_lr_fraction: 0.1,
                ..OptimConfig::default()
            },
        }
    }
}

impl DllmConfig {
    /// Full-size configuration: wider model, four layers, eight heads,
    /// in-batch negatives from a 3200-sequence batch.
    pub fn paper() -> Self {
        DllmConfig {
            input_dim: 128,
            model_dim: 128,
            n_layers: 4,
            n_heads: 8,
            batch_size: 3200,
            k_negatives: 3199,
            temperature: 0.07,
            steps: 2000,
            optim: OptimConfig {
                learning_rate: 0.0075,
                warmup_steps: 100,
                total_steps: 2000,
                min_lr_fraction: 0.1,
                ..OptimConfig::default()
            },
            ..DllmConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.n_heads == 0 || self.model_dim % self.n_heads != 0 {
            return Err(Error::config(format!(
                "model_dim {} must divide into {} heads",
                self.model_dim, self.n_heads
            )));
        }
        if self.k_negatives == 0 {
            return Err(Error::config("k_negatives must be at least 1"));
        }
        if self.input_dim == 0 || self.max_seq_len == 0 || self.batch_size == 0 || self.steps == 0
        {
            return Err(Error::config(
                "input_dim, max_seq_len, batch_size and steps must be positive",
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        self.optim.validate()
    }
}

pub fn init_dllm_params(cfg: &DllmConfig) -> ParamStore {
    let mut rng = stream_rng(cfg.seed, "dllm/init");
    let mut params = ParamStore::new();
    let (d, m) = (cfg.input_dim, cfg.model_dim);
    params.insert_linear_init("adapter.w", vec![d, m], d, &mut rng);
    params.insert_zeros("adapter.b", vec![m]);
    params.insert_linear_init("pos", vec![cfg.max_seq_len, m], m, &mut rng);
    params.insert_linear_init("fill", vec![1, m], m, &mut rng);
    if cfg.t_conditioning == TConditioning::ScalarEmbedding {
        params.insert_linear_init("t_embed", vec![1, m], m, &mut rng);
    }
    for l in 0..cfg.n_layers {
        let name = |s: &str| format!("block{l}.{s}");
        params.insert(name("ln1.g"), Tensor::filled(vec![m], 1.0));
        params.insert_zeros(name("ln1.b"), vec![m]);
        for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
            params.insert_linear_init(name(w), vec![m, m], m, &mut rng);
        }
        params.insert(name("ln2.g"), Tensor::filled(vec![m], 1.0));
        params.insert_zeros(name("ln2.b"), vec![m]);
        params.insert_linear_init(name("ffn.w1"), vec![m, 4 * m], m, &mut rng);
        params.insert_zeros(name("ffn.b1"), vec![4 * m]);
        params.insert_linear_init(name("ffn.w2"), vec![4 * m, m], 4 * m, &mut rng);
        params.insert_zeros(name("ffn.b2"), vec![m]);
    }
    params.insert("final_ln.g", Tensor::filled(vec![m], 1.0));
    params.insert_zeros("final_ln.b", vec![m]);
    params.insert_linear_init("out.w", vec![m, d], m, &mut rng);
    params.insert_zeros("out.b", vec![d]);
    params
}

/// Projects one frozen representation into model space.
pub fn adapt_input(h: &[f32], params: &ParamStore) -> Result<Vec<f32>> {
    let w = params.get("adapter.w")?;
    if h.len() != w.rows() {
        return Err(Error::config(format!(
            "representation of width {} against adapter input {}",
            h.len(),
            w.rows()
        )));
    }
    let x = Tensor::new(vec![1, h.len()], h.to_vec())?;
    let b = params.get("adapter.b").ok();
    Ok(linear_forward(&x, w, b)?.into_data())
}

/// Independently re-masks each maskable slot with probability `t`; revealed
/// slots act as observed items this step. Fill and observed slots never
/// change.
pub fn dynamic_mask(tseq: &TokenSeq, t: f64, rng: &mut ChaCha20Rng) -> TokenSeq {
    TokenSeq {
        user_id: tseq.user_id,
        slots: tseq
            .slots
            .iter()
            .map(|slot| match slot {
                TokenSlot::Mask { item_id } => {
                    if rng.gen::<f64>() < t {
                        TokenSlot::Mask { item_id: *item_id }
                    } else {
                        TokenSlot::Obs { item_id: *item_id }
                    }
                }
                other => other.clone(),
            })
            .collect(),
    }
}

fn truncated(slots: &[TokenSlot], max_len: usize) -> &[TokenSlot] {
    if slots.len() > max_len {
        log::warn!(
            "sequence of {} slots truncated to the most recent {max_len}",
            slots.len()
        );
        &slots[slots.len() - max_len..]
    } else {
        slots
    }
}

fn var(vars: &BTreeMap<String, Var>, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::config(format!("params lack {name}")))
}

struct SeqForward {
    /// Unit-row predictions in representation space, [len, input_dim].
    preds: Var,
    /// Final hidden states before projection, [len, model_dim].
    hidden: Var,
    mask_rows: Vec<usize>,
    mask_truths: Vec<ItemId>,
}

fn forward_on_tape(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &DllmConfig,
    reps: &RepTable,
    slots: &[TokenSlot],
    t: f32,
) -> Result<SeqForward> {
    let slots = truncated(slots, cfg.max_seq_len);
    let len = slots.len();
    if len == 0 {
        return Err(Error::data("empty token sequence"));
    }
    let (d, m) = (cfg.input_dim, cfg.model_dim);
    let mut item_rows = Tensor::zeros(vec![len, d]);
    let mut keep = Tensor::zeros(vec![len, m]);
    let mut special = Tensor::zeros(vec![len, m]);
    let mut mask_rows = Vec::new();
    let mut mask_truths = Vec::new();
    for (i, slot) in slots.iter().enumerate() {
        match slot {
            TokenSlot::Obs { item_id } => {
                item_rows.row_mut(i).copy_from_slice(reps.get(*item_id)?);
                keep.row_mut(i).fill(1.0);
            }
            TokenSlot::Mask { item_id } => {
                special.row_mut(i).fill(1.0);
                mask_rows.push(i);
                mask_truths.push(*item_id);
            }
            TokenSlot::Fill => {
                special.row_mut(i).fill(1.0);
            }
        }
    }
    let x_items = tape.constant(item_rows);
    let adapted = linear(tape, x_items, var(vars, "adapter.w")?, Some(var(vars, "adapter.b")?))?;
    let keep_c = tape.constant(keep);
    let kept = tape.mul(adapted, keep_c)?;
    let fill_rows_tiled = tape.tile_row(var(vars, "fill")?, len)?;
    let special_c = tape.constant(special);
    let specials = tape.mul(fill_rows_tiled, special_c)?;
    let mut x = tape.add(kept, specials)?;
    let positions: Vec<usize> = (0..len).collect();
    let pos = tape.gather_rows(var(vars, "pos")?, &positions)?;
    x = tape.add(x, pos)?;
    if cfg.t_conditioning == TConditioning::ScalarEmbedding {
        let te = tape.tile_row(var(vars, "t_embed")?, len)?;
        let te = tape.scale(te, t);
        x = tape.add(x, te)?;
    }
    for l in 0..cfg.n_layers {
        let p = |s: &str| var(vars, &format!("block{l}.{s}"));
        let h = {
            let g = p("ln1.g")?;
            let b = p("ln1.b")?;
            tape.layer_norm(x, g, b, LN_EPS)?
        };
        let w = MhaVars {
            wq: p("attn.wq")?,
            wk: p("attn.wk")?,
            wv: p("attn.wv")?,
            wo: p("attn.wo")?,
        };
        let mha = multi_head_attention(tape, h, h, h, &w, cfg.n_heads)?;
        x = tape.add(x, mha.out)?;
        let h2 = {
            let g = p("ln2.g")?;
            let b = p("ln2.b")?;
            tape.layer_norm(x, g, b, LN_EPS)?
        };
        let f1 = linear(tape, h2, p("ffn.w1")?, Some(p("ffn.b1")?))?;
        let f1 = tape.gelu(f1);
        let f2 = linear(tape, f1, p("ffn.w2")?, Some(p("ffn.b2")?))?;
        x = tape.add(x, f2)?;
    }
    let hidden = {
        let g = var(vars, "final_ln.g")?;
        let b = var(vars, "final_ln.b")?;
        tape.layer_norm(x, g, b, LN_EPS)?
    };
    let out = linear(tape, hidden, var(vars, "out.w")?, Some(var(vars, "out.b")?))?;
    let preds = tape.l2_normalize_rows(out, 1e-9)?;
    Ok(SeqForward {
        preds,
        hidden,
        mask_rows,
        mask_truths,
    })
}

/// Forward pass over one sequence; returns (hidden states, unit predictions).
pub fn forward(
    params: &ParamStore,
    cfg: &DllmConfig,
    reps: &RepTable,
    seq: &TokenSeq,
    t: f32,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let vars = constants_of(&mut tape, params);
    let fwd = forward_on_tape(&mut tape, &vars, cfg, reps, &seq.slots, t)?;
    Ok((tape.value(fwd.hidden).clone(), tape.value(fwd.preds).clone()))
}

fn constants_of(tape: &mut Tape, params: &ParamStore) -> BTreeMap<String, Var> {
    params
        .iter()
        .map(|(name, value)| (name.to_string(), tape.constant(value.clone())))
        .collect()
}

fn unit_rep(reps: &RepTable, item: ItemId) -> Result<Vec<f32>> {
    let mut v = reps.get(item)?.to_vec();
    l2_normalize(&mut v, 1e-9);
    Ok(v)
}

/// One training sequence with its realized masking level and negatives.
#[derive(Clone, Debug)]
pub struct SeqLossSpec {
    pub seq: TokenSeq,
    /// Masking level in (0, 1]; weights the loss by 1/t.
    pub t: f64,
    /// Negative item ids, one drawn from each other batch sequence.
    pub negatives: Vec<ItemId>,
}

/// Uniformly picks one observed item from each of `k` other sequences for
/// every batch position.
pub fn sample_negatives(
    originals: &[&TokenSeq],
    k: usize,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<Vec<ItemId>>> {
    if originals.len() < 2 {
        return Err(Error::data(
            "in-batch negatives need at least two sequences",
        ));
    }
    let k = k.min(originals.len() - 1);
    let pools: Vec<Vec<ItemId>> = originals.iter().map(|s| s.observed_items()).collect();
    let mut out = Vec::with_capacity(originals.len());
    for i in 0..originals.len() {
        let mut negs = Vec::with_capacity(k);
        let mut j = (i + 1) % originals.len();
        while negs.len() < k {
            if j != i && !pools[j].is_empty() {
                negs.push(pools[j][rng.gen_range(0..pools[j].len())]);
            } else if j != i {
                log::warn!("sequence {} has no observed items to sample", originals[j].user_id);
            }
            j = (j + 1) % originals.len();
            if j == i && negs.is_empty() {
                return Err(Error::data("no other sequence has observed items"));
            }
            if j == i && negs.len() < k {
                // Fewer donors than requested: cycle again.
                j = (j + 1) % originals.len();
            }
        }
        out.push(negs);
    }
    Ok(out)
}

fn candidate_matrix(
    reps: &RepTable,
    truths: &[ItemId],
    negatives: &[ItemId],
) -> Result<Tensor> {
    let d = reps.dim();
    let k = negatives.len();
    let mut cands = Tensor::zeros(vec![truths.len() * (k + 1), d]);
    for (s, truth) in truths.iter().enumerate() {
        cands
            .row_mut(s * (k + 1))
            .copy_from_slice(&unit_rep(reps, *truth)?);
        for (j, neg) in negatives.iter().enumerate() {
            cands
                .row_mut(s * (k + 1) + j + 1)
                .copy_from_slice(&unit_rep(reps, *neg)?);
        }
    }
    Ok(cands)
}

/// Differentiable loss over a batch of masked sequences. Contrastive loss
/// averages per-sequence terms, each weighted by 1/(t · masked-count);
/// point-wise variants average their distance over every masked slot.
pub fn diffusion_loss(
    params: &ParamStore,
    cfg: &DllmConfig,
    reps: &RepTable,
    batch: &[SeqLossSpec],
) -> Result<(f64, Grads)> {
    if batch.is_empty() {
        return Err(Error::data("empty batch"));
    }
    let mut tape = Tape::new();
    let vars = load_params(&mut tape, params);
    let mut seq_terms = Vec::with_capacity(batch.len());
    let mut total_masked = 0usize;
    for spec in batch {
        if !(spec.t > 0.0 && spec.t <= 1.0) {
            return Err(Error::config(format!("masking level {} outside (0,1]", spec.t)));
        }
        let fwd = forward_on_tape(&mut tape, &vars, cfg, reps, &spec.seq.slots, spec.t as f32)?;
        if fwd.mask_rows.is_empty() {
            return Err(Error::data(format!(
                "sequence for user {} has no masked slot",
                spec.seq.user_id
            )));
        }
        let m = fwd.mask_rows.len();
        total_masked += m;
        let preds = tape.gather_rows(fwd.preds, &fwd.mask_rows)?;
        match cfg.variant {
            LossVariant::InfonceCos => {
                if spec.negatives.is_empty() {
                    return Err(Error::data(
                        "contrastive loss needs a batch of at least two sequences",
                    ));
                }
                let k = spec.negatives.len();
                let cands = candidate_matrix(reps, &fwd.mask_truths, &spec.negatives)?;
                let cands = tape.constant(cands);
                let sims = tape.dot_set(preds, cands, k + 1)?;
                let logits = tape.scale(sims, 1.0 / cfg.temperature);
                let ce = tape.cross_entropy_pos0(logits)?;
                let sum = tape.sum_all(ce);
                seq_terms.push(tape.scale(sum, (1.0 / (spec.t * m as f64)) as f32));
            }
            LossVariant::CosPointwise => {
                let targets = candidate_matrix(reps, &fwd.mask_truths, &[])?;
                let targets = tape.constant(targets);
                let sims = tape.dot_set(preds, targets, 1)?;
                let sum_cos = tape.sum_all(sims);
                // Σ (1 - cos) over this sequence's masked slots.
                seq_terms.push(tape.affine(sum_cos, -1.0, m as f32));
            }
            LossVariant::MsePointwise => {
                let targets = candidate_matrix(reps, &fwd.mask_truths, &[])?;
                let targets = tape.constant(targets);
                let diff = tape.sub(preds, targets)?;
                let sq = tape.sq_norm_rows(diff)?;
                seq_terms.push(tape.sum_all(sq));
            }
        }
    }
    let total = tape.add_n(&seq_terms)?;
    let loss = match cfg.variant {
        LossVariant::InfonceCos => tape.scale(total, 1.0 / batch.len() as f32),
        _ => tape.scale(total, 1.0 / total_masked as f32),
    };
    let pass = tape.backward(loss)?;
    let grads = collect_grads(&pass, &vars);
    Ok((tape.value(loss).data()[0] as f64, grads))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DllmTracePoint {
    pub step: usize,
    pub loss: f64,
    pub ib_mask: Option<IbReport>,
    pub ib_fill: Option<IbReport>,
}

pub struct TrainedDllm {
    pub config: DllmConfig,
    pub params: ParamStore,
    pub trace: Vec<DllmTracePoint>,
}

/// Held-out protocol: every maskable slot stays masked (full masking level),
/// negatives come from other held-out sequences under a fixed stream.
pub fn evaluate(
    params: &ParamStore,
    cfg: &DllmConfig,
    reps: &RepTable,
    seqs: &[TokenSeq],
) -> Result<(IbReport, Option<IbReport>)> {
    if seqs.len() < 2 {
        return Err(Error::data("evaluation needs at least two sequences"));
    }
    let mut rng = stream_rng(cfg.seed, "dllm/eval");
    let originals: Vec<&TokenSeq> = seqs.iter().collect();
    let k = cfg.k_negatives.min(seqs.len() - 1);
    let negatives = sample_negatives(&originals, k, &mut rng)?;
    let mut batch = Vec::with_capacity(seqs.len());
    for (seq, negs) in seqs.iter().zip(&negatives) {
        let (_, preds) = forward(params, cfg, reps, seq, 1.0)?;
        // Row indices must match the truncated view the forward pass saw.
        let slots = truncated(&seq.slots, cfg.max_seq_len);
        let mut eval = SeqEval::default();
        for (i, slot) in slots.iter().enumerate() {
            match slot {
                TokenSlot::Mask { item_id } => {
                    eval.mask_preds.push(preds.row(i).to_vec());
                    eval.mask_truths.push(unit_rep(reps, *item_id)?);
                }
                TokenSlot::Fill => eval.fill_preds.push(preds.row(i).to_vec()),
                TokenSlot::Obs { .. } => {}
            }
        }
        for neg in negs {
            eval.negatives.push(unit_rep(reps, *neg)?);
        }
        batch.push(eval);
    }
    let mask_report = ib_metrics(&batch, SlotKind::Mask)?;
    let fill_report = ib_metrics(&batch, SlotKind::Fill).ok();
    Ok((mask_report, fill_report))
}

/// Share of non-item slots among all slots, as in fill-ratio reporting.
pub fn fill_ratio(seqs: &[TokenSeq]) -> f64 {
    let mut fills = 0usize;
    let mut total = 0usize;
    for seq in seqs {
        total += seq.slots.len();
        fills += seq
            .slots
            .iter()
            .filter(|s| matches!(s, TokenSlot::Fill))
            .count();
    }
    if total == 0 {
        0.0
    } else {
        fills as f64 / total as f64
    }
}

pub fn train_dllm(
    cfg: &DllmConfig,
    reps: &RepTable,
    train_seqs: &[TokenSeq],
    eval_seqs: &[TokenSeq],
) -> Result<TrainedDllm> {
    cfg.validate()?;
    if reps.dim() != cfg.input_dim {
        return Err(Error::config(format!(
            "representations are {}-dim, config expects {}",
            reps.dim(),
            cfg.input_dim
        )));
    }
    let eligible: Vec<&TokenSeq> = train_seqs
        .iter()
        .filter(|s| s.slots.iter().any(|slot| matches!(slot, TokenSlot::Mask { .. })))
        .collect();
    if eligible.is_empty() {
        return Err(Error::data("no training sequence has a maskable slot"));
    }
    let mut params = init_dllm_params(cfg);
    let mut batch_rng = stream_rng(cfg.seed, "dllm/batches");
    let mut mask_rng = stream_rng(cfg.seed, "dllm/mask");
    let mut neg_rng = stream_rng(cfg.seed, "dllm/negatives");
    let mut trace = Vec::new();
    for step in 0..cfg.steps {
        let chosen: Vec<&TokenSeq> = if eligible.len() >= cfg.batch_size {
            let mut pool = eligible.clone();
            pool.partial_shuffle(&mut batch_rng, cfg.batch_size);
            pool.into_iter().take(cfg.batch_size).collect()
        } else {
            (0..cfg.batch_size)
                .map(|_| eligible[batch_rng.gen_range(0..eligible.len())])
                .collect()
        };
        let negatives = if cfg.variant == LossVariant::InfonceCos {
            sample_negatives(&chosen, cfg.k_negatives, &mut neg_rng)?
        } else {
            vec![Vec::new(); chosen.len()]
        };
        let mut batch = Vec::with_capacity(chosen.len());
        for (seq, negs) in chosen.iter().zip(negatives) {
            let t = 1.0 - mask_rng.gen::<f64>();
            let masked = loop {
                let candidate = dynamic_mask(seq, t, &mut mask_rng);
                if candidate
                    .slots
                    .iter()
                    .any(|s| matches!(s, TokenSlot::Mask { .. }))
                {
                    break candidate;
                }
            };
            batch.push(SeqLossSpec {
                seq: masked,
                t,
                negatives: negs,
            });
        }
        let (loss, grads) = diffusion_loss(&params, cfg, reps, &batch)?;
        adam_step(&mut params, &grads, &cfg.optim, (step + 1) as u64)?;
        let evaluate_now = cfg.eval_every > 0
            && eval_seqs.len() >= 2
            && ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps);
        let (ib_mask, ib_fill) = if evaluate_now {
            let (m, f) = evaluate(&params, cfg, reps, eval_seqs)?;
            (Some(m), f)
        } else {
            (None, None)
        };
        trace.push(DllmTracePoint {
            step: step + 1,
            loss,
            ib_mask,
            ib_fill,
        });
    }
    Ok(TrainedDllm {
        config: cfg.clone(),
        params,
        trace,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CompletedSlot {
    Item { item_id: ItemId },
    Aug { aug: Vec<f32> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletedSeq {
    pub user_id: UserId,
    pub slots: Vec<CompletedSlot>,
}

/// Replaces each fill slot with its predicted unit vector; observed items
/// pass through untouched. Inference sequences carry no maskable slots.
pub fn infer_fill(
    params: &ParamStore,
    cfg: &DllmConfig,
    reps: &RepTable,
    seq: &TokenSeq,
) -> Result<CompletedSeq> {
    if seq
        .slots
        .iter()
        .any(|s| matches!(s, TokenSlot::Mask { .. }))
    {
        return Err(Error::data(
            "inference sequences must not contain maskable slots",
        ));
    }
    let has_fill = seq.slots.iter().any(|s| matches!(s, TokenSlot::Fill));
    if !has_fill {
        return Ok(CompletedSeq {
            user_id: seq.user_id,
            slots: seq
                .slots
                .iter()
                .map(|s| match s {
                    TokenSlot::Obs { item_id } => CompletedSlot::Item { item_id: *item_id },
                    _ => unreachable!(),
                })
                .collect(),
        });
    }
    let (_, preds) = forward(params, cfg, reps, seq, 1.0)?;
    let slots = truncated(&seq.slots, cfg.max_seq_len);
    let completed = slots
        .iter()
        .enumerate()
        .map(|(i, slot)| match slot {
            TokenSlot::Obs { item_id } => CompletedSlot::Item { item_id: *item_id },
            TokenSlot::Fill => CompletedSlot::Aug {
                aug: preds.row(i).to_vec(),
            },
            TokenSlot::Mask { .. } => unreachable!(),
        })
        .collect();
    Ok(CompletedSeq {
        user_id: seq.user_id,
        slots: completed,
    })
}
