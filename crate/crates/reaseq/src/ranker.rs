//! Dual-pathway CTR model over tokenized behavior sequences.
//!
//! Scoring a candidate combines two views of the user's history. The
//! retrieval pathway picks the top-N historical slots by cosine similarity in
//! representation space, then attends over just those with the target as
//! query. The compression pathway squeezes the whole sequence into M learned
//! anchor vectors and lets the target query the anchors, so every slot keeps
//! a gradient path even when retrieval skips it. Both outputs, the target
//! features, and encoded user/context features feed a sigmoid MLP trained
//! with binary cross-entropy.
//!
//! Sequence slots arrive as [`CompletedSlot`]s: real items carry semantic-id
//! codes and side features, while fill slots synthesized upstream carry only
//! a representation-space vector and are embedded through a learned
//! "augmented" token plus a projection of that vector.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dllm::{CompletedSeq, CompletedSlot};
use crate::embedding::RepTable;
use crate::error::{Error, Result};
use crate::metrics::auc;
use crate::nn::{
    adam_step, collect_grads, cosine, linear, linear_forward, load_params, multi_head_attention,
    Grads, MhaVars, OptimConfig, ParamStore, Tape, Tensor, Var,
};
use crate::rng::stream_rng;
use crate::types::{ItemId, UserId};
use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankerConfig {
    /// Slots retrieved per candidate (N).
    pub n_retrieve: usize,
    /// Learned interest anchors (M).
    pub m_anchors: usize,
    /// Width of one semantic-id embedding.
    pub d_e: usize,
    pub sid_levels: usize,
    pub sid_codebook: usize,
    /// Item side-feature width.
    pub d_feat: usize,
    /// User profile feature width.
    pub d_user: usize,
    /// Context feature width.
    pub d_ctx: usize,
    /// Width of fill vectors; must match the representation table.
    pub fill_dim: usize,
    pub n_heads: usize,
    /// Hidden widths of the fusion head; the final entry must be 1.
    pub mlp: Vec<usize>,
    pub batch_size: usize,
    pub steps: usize,
    /// Evaluate AUC on held-out impressions every this many steps; 0 disables.
    pub eval_every: usize,
    pub seed: u64,
    pub optim: OptimConfig,
}

impl Default for RankerConfig {
    fn default() -> Self {
        RankerConfig {
            n_retrieve: 16,
            m_anchors: 4,
            d_e: 8,
            sid_levels: 3,
            sid_codebook: 64,
            d_feat: 4,
            d_user: 4,
            d_ctx: 2,
            fill_dim: 32,
            n_heads: 2,
            mlp: vec![128, 64, 1],
            batch_size: 128,
            steps: 600,
            eval_every: 100,
            seed: 29,
            optim: OptimConfig {
                learning_rate: 3e-3,
                warmup_steps: 50,
                total_steps: 600,
                min_lr_fraction: 0.1,
                ..OptimConfig::default()
            },
        }
    }
}

impl RankerConfig {
    /// Width of one sequence-slot/target row: summed sid embedding plus side
    /// features.
    pub fn d_x(&self) -> usize {
        self.d_e + self.d_feat
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_retrieve == 0 {
            return Err(Error::config("n_retrieve must be at least 1"));
        }
        if self.m_anchors == 0 {
            return Err(Error::config("m_anchors must be at least 1"));
        }
        if self.d_e == 0 || self.d_feat == 0 || self.d_user == 0 || self.d_ctx == 0 {
            return Err(Error::config("feature widths must be positive"));
        }
        if self.sid_levels == 0 || self.sid_codebook < 2 {
            return Err(Error::config(
                "semantic ids need at least one level and two codes",
            ));
        }
        if self.fill_dim == 0 {
            return Err(Error::config("fill_dim must be positive"));
        }
        if self.n_heads == 0 || self.d_x() % self.n_heads != 0 {
            return Err(Error::config(format!(
                "slot width {} not divisible into {} heads",
                self.d_x(),
                self.n_heads
            )));
        }
        if self.mlp.last() != Some(&1) {
            return Err(Error::config("mlp must end in a single logit"));
        }
        if self.mlp.iter().any(|w| *w == 0) {
            return Err(Error::config("mlp widths must be positive"));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::config("batch_size and steps must be positive"));
        }
        self.optim.validate()
    }
}

/// One labeled candidate shown to a user.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Impression {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub f_u: Vec<f32>,
    pub f_c: Vec<f32>,
    pub label: bool,
}

/// Everything item-shaped the ranker reads; all borrowed from the pipeline.
#[derive(Copy, Clone)]
pub struct RankInputs<'a> {
    /// Representation space shared by retrieval and fill vectors.
    pub reps: &'a RepTable,
    /// Semantic-id codes per item, `sid_levels` entries each.
    pub sids: &'a BTreeMap<ItemId, Vec<u32>>,
    /// Side features per item, `d_feat` wide.
    pub feats: &'a BTreeMap<ItemId, Vec<f32>>,
    /// Per-user behavior sequences, observed or fill-completed.
    pub histories: &'a [CompletedSeq],
}

pub fn init_ranker_params(cfg: &RankerConfig) -> ParamStore {
    let mut rng = stream_rng(cfg.seed, "ranker/init");
    let mut params = ParamStore::new();
    let dx = cfg.d_x();
    for level in 0..cfg.sid_levels {
        params.insert_linear_init(
            format!("sid.l{level}"),
            vec![cfg.sid_codebook, cfg.d_e],
            cfg.d_e,
            &mut rng,
        );
    }
    params.insert_linear_init("aug", vec![1, cfg.d_e], cfg.d_e, &mut rng);
    params.insert_linear_init(
        "fill_proj.w",
        vec![cfg.fill_dim, cfg.d_feat],
        cfg.fill_dim,
        &mut rng,
    );
    params.insert_zeros("fill_proj.b", vec![cfg.d_feat]);
    for block in ["esu", "compress", "extract"] {
        for w in ["wq", "wk", "wv", "wo"] {
            params.insert_linear_init(format!("{block}.{w}"), vec![dx, dx], dx, &mut rng);
        }
    }
    params.insert_linear_init("esu.default", vec![1, dx], dx, &mut rng);
    params.insert_linear_init("anchors", vec![cfg.m_anchors, dx], dx, &mut rng);
    params.insert_linear_init("user_enc.w", vec![cfg.d_user, dx], cfg.d_user, &mut rng);
    params.insert_zeros("user_enc.b", vec![dx]);
    params.insert_linear_init("ctx_enc.w", vec![cfg.d_ctx, dx], cfg.d_ctx, &mut rng);
    params.insert_zeros("ctx_enc.b", vec![dx]);
    let mut fan_in = 5 * dx;
    for (i, width) in cfg.mlp.iter().enumerate() {
        params.insert_linear_init(format!("mlp.{i}.w"), vec![fan_in, *width], fan_in, &mut rng);
        params.insert_zeros(format!("mlp.{i}.b"), vec![*width]);
        fan_in = *width;
    }
    params
}

fn var(vars: &BTreeMap<String, Var>, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::config(format!("params lack {name}")))
}

fn mha_vars(vars: &BTreeMap<String, Var>, block: &str) -> Result<MhaVars> {
    Ok(MhaVars {
        wq: var(vars, &format!("{block}.wq"))?,
        wk: var(vars, &format!("{block}.wk"))?,
        wv: var(vars, &format!("{block}.wv"))?,
        wo: var(vars, &format!("{block}.wo"))?,
    })
}

/// Positions of the `n` highest-cosine slots, ties broken toward earlier
/// positions. Shorter sequences return every position, best first.
pub fn gsu_retrieve(target: &[f32], seq: &[Vec<f32>], n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::config("retrieval depth must be at least 1"));
    }
    let mut order: Vec<(f32, usize)> = seq
        .iter()
        .enumerate()
        .map(|(i, row)| (cosine(target, row, 1e-12), i))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    order.truncate(n);
    Ok(order.into_iter().map(|(_, i)| i).collect())
}

/// Target-as-query attention over the retrieved slots; `None` stands for an
/// empty context and yields the learned default vector.
pub fn esu_attend(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &RankerConfig,
    target_x: Var,
    retrieved_x: Option<Var>,
) -> Result<Var> {
    match retrieved_x {
        Some(ctx) if tape.value(ctx).rows() > 0 => {
            let w = mha_vars(vars, "esu")?;
            Ok(multi_head_attention(tape, target_x, ctx, ctx, &w, cfg.n_heads)?.out)
        }
        _ => var(vars, "esu.default"),
    }
}

/// Soft-clusters the full sequence into the anchor rows. An empty sequence
/// leaves the anchors as they are; they are learned, so they double as the
/// no-history default.
pub fn compress_anchors(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &RankerConfig,
    seq_x: Option<Var>,
) -> Result<Var> {
    let anchors = var(vars, "anchors")?;
    match seq_x {
        Some(seq) if tape.value(seq).rows() > 0 => {
            let w = mha_vars(vars, "compress")?;
            Ok(multi_head_attention(tape, anchors, seq, seq, &w, cfg.n_heads)?.out)
        }
        _ => Ok(anchors),
    }
}

/// Target-as-query attention over the compressed anchors.
pub fn target_extract(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &RankerConfig,
    target_x: Var,
    compressed: Var,
) -> Result<Var> {
    let w = mha_vars(vars, "extract")?;
    Ok(multi_head_attention(tape, target_x, compressed, compressed, &w, cfg.n_heads)?.out)
}

fn sid_codes<'a>(inputs: &'a RankInputs, cfg: &RankerConfig, item: ItemId) -> Result<&'a [u32]> {
    let codes = inputs
        .sids
        .get(&item)
        .ok_or_else(|| Error::data(format!("item {item} has no semantic id")))?;
    if codes.len() != cfg.sid_levels {
        return Err(Error::data(format!(
            "item {item} has {} sid levels, config expects {}",
            codes.len(),
            cfg.sid_levels
        )));
    }
    if let Some(bad) = codes.iter().find(|c| **c as usize >= cfg.sid_codebook) {
        return Err(Error::data(format!(
            "item {item} sid code {bad} outside codebook of {}",
            cfg.sid_codebook
        )));
    }
    Ok(codes)
}

fn side_feats<'a>(inputs: &'a RankInputs, cfg: &RankerConfig, item: ItemId) -> Result<&'a [f32]> {
    let feats = inputs
        .feats
        .get(&item)
        .ok_or_else(|| Error::data(format!("item {item} has no side features")))?;
    if feats.len() != cfg.d_feat {
        return Err(Error::data(format!(
            "item {item} has {} side features, config expects {}",
            feats.len(),
            cfg.d_feat
        )));
    }
    Ok(feats)
}

/// Sums the per-level sid embeddings for a list of codes-per-row.
fn sid_sum(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &RankerConfig,
    codes: &[Vec<u32>],
) -> Result<Var> {
    let mut levels = Vec::with_capacity(cfg.sid_levels);
    for level in 0..cfg.sid_levels {
        let idx: Vec<usize> = codes.iter().map(|c| c[level] as usize).collect();
        let table = var(vars, &format!("sid.l{level}"))?;
        levels.push(tape.gather_rows(table, &idx)?);
    }
    tape.add_n(&levels)
}

struct HistoryX {
    /// Slot rows [t, d_x]; sid+side for items, augmented+projected for fills.
    x: Var,
    /// Representation-space vector per slot, for retrieval.
    rep_rows: Vec<Vec<f32>>,
}

fn history_x(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &RankerConfig,
    inputs: &RankInputs,
    slots: &[CompletedSlot],
) -> Result<HistoryX> {
    let t = slots.len();
    let mut codes = vec![vec![0u32; cfg.sid_levels]; t];
    let mut item_mask_e = Tensor::zeros(vec![t, cfg.d_e]);
    let mut fill_mask_e = Tensor::zeros(vec![t, cfg.d_e]);
    let mut item_mask_f = Tensor::zeros(vec![t, cfg.d_feat]);
    let mut fill_mask_f = Tensor::zeros(vec![t, cfg.d_feat]);
    let mut feat_rows = Tensor::zeros(vec![t, cfg.d_feat]);
    let mut fill_rows = Tensor::zeros(vec![t, cfg.fill_dim]);
    let mut rep_rows = Vec::with_capacity(t);
    for (i, slot) in slots.iter().enumerate() {
        match slot {
            CompletedSlot::Item { item_id } => {
                codes[i].copy_from_slice(sid_codes(inputs, cfg, *item_id)?);
                feat_rows
                    .row_mut(i)
                    .copy_from_slice(side_feats(inputs, cfg, *item_id)?);
                item_mask_e.row_mut(i).fill(1.0);
                item_mask_f.row_mut(i).fill(1.0);
                rep_rows.push(inputs.reps.get(*item_id)?.to_vec());
            }
            CompletedSlot::Aug { aug } => {
                if aug.len() != cfg.fill_dim {
                    return Err(Error::data(format!(
                        "fill vector of width {}, config expects {}",
                        aug.len(),
                        cfg.fill_dim
                    )));
                }
                fill_rows.row_mut(i).copy_from_slice(aug);
                fill_mask_e.row_mut(i).fill(1.0);
                fill_mask_f.row_mut(i).fill(1.0);
                rep_rows.push(aug.clone());
            }
        }
    }
    let sid = sid_sum(tape, vars, cfg, &codes)?;
    let item_e = tape.constant(item_mask_e);
    let sid = tape.mul(sid, item_e)?;
    let aug_tiled = tape.tile_row(var(vars, "aug")?, t)?;
    let fill_e = tape.constant(fill_mask_e);
    let aug_part = tape.mul(aug_tiled, fill_e)?;
    let e_part = tape.add(sid, aug_part)?;

    let fills = tape.constant(fill_rows);
    let projected = linear(
        tape,
        fills,
        var(vars, "fill_proj.w")?,
        Some(var(vars, "fill_proj.b")?),
    )?;
    let fill_f = tape.constant(fill_mask_f);
    let projected = tape.mul(projected, fill_f)?;
    let feats = tape.constant(feat_rows);
    let item_f = tape.constant(item_mask_f);
    let feats = tape.mul(feats, item_f)?;
    let f_part = tape.add(feats, projected)?;

    let x = tape.concat_cols(&[e_part, f_part])?;
    Ok(HistoryX { x, rep_rows })
}

fn target_x(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &RankerConfig,
    inputs: &RankInputs,
    item: ItemId,
) -> Result<Var> {
    let codes = vec![sid_codes(inputs, cfg, item)?.to_vec()];
    let sid = sid_sum(tape, vars, cfg, &codes)?;
    let feats = Tensor::new(vec![1, cfg.d_feat], side_feats(inputs, cfg, item)?.to_vec())?;
    let feats = tape.constant(feats);
    tape.concat_cols(&[sid, feats])
}

fn encode_features(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    block: &str,
    values: &[f32],
    width: usize,
) -> Result<Var> {
    if values.len() != width {
        return Err(Error::data(format!(
            "{block} features of width {}, config expects {width}",
            values.len()
        )));
    }
    let x = tape.constant(Tensor::new(vec![1, width], values.to_vec())?);
    let enc = linear(
        tape,
        x,
        var(vars, &format!("{block}.w"))?,
        Some(var(vars, &format!("{block}.b"))?),
    )?;
    Ok(tape.gelu(enc))
}

fn mlp_logit(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &RankerConfig,
    parts: &[Var],
) -> Result<Var> {
    let mut x = tape.concat_cols(parts)?;
    for i in 0..cfg.mlp.len() {
        x = linear(
            tape,
            x,
            var(vars, &format!("mlp.{i}.w"))?,
            Some(var(vars, &format!("mlp.{i}.b"))?),
        )?;
        if i + 1 < cfg.mlp.len() {
            x = tape.gelu(x);
        }
    }
    Ok(x)
}

fn impression_logit(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &RankerConfig,
    inputs: &RankInputs,
    history: Option<&[CompletedSlot]>,
    imp: &Impression,
) -> Result<Var> {
    let tx = target_x(tape, vars, cfg, inputs, imp.item_id)?;
    let (seq_x, retrieved_x) = match history {
        Some(slots) if !slots.is_empty() => {
            let hist = history_x(tape, vars, cfg, inputs, slots)?;
            let target_rep = inputs.reps.get(imp.item_id)?;
            let picked = gsu_retrieve(target_rep, &hist.rep_rows, cfg.n_retrieve)?;
            let gathered = tape.gather_rows(hist.x, &picked)?;
            (Some(hist.x), Some(gathered))
        }
        _ => (None, None),
    };
    let h_b = esu_attend(tape, vars, cfg, tx, retrieved_x)?;
    let compressed = compress_anchors(tape, vars, cfg, seq_x)?;
    let h_a = target_extract(tape, vars, cfg, tx, compressed)?;
    let f_u = encode_features(tape, vars, "user_enc", &imp.f_u, cfg.d_user)?;
    let f_c = encode_features(tape, vars, "ctx_enc", &imp.f_c, cfg.d_ctx)?;
    mlp_logit(tape, vars, cfg, &[h_b, h_a, tx, f_u, f_c])
}

fn history_map<'a>(histories: &'a [CompletedSeq]) -> BTreeMap<UserId, &'a [CompletedSlot]> {
    histories
        .iter()
        .map(|seq| (seq.user_id, seq.slots.as_slice()))
        .collect()
}

/// Mean BCE over the impressions, with gradients for every touched parameter.
pub fn ctr_loss(
    params: &ParamStore,
    cfg: &RankerConfig,
    inputs: &RankInputs,
    impressions: &[Impression],
) -> Result<(f64, Grads)> {
    if impressions.is_empty() {
        return Err(Error::data("no impressions to score"));
    }
    let by_user = history_map(inputs.histories);
    let mut tape = Tape::new();
    let vars = load_params(&mut tape, params);
    let mut logits = Vec::with_capacity(impressions.len());
    let mut labels = Vec::with_capacity(impressions.len());
    for imp in impressions {
        let history = by_user.get(&imp.user_id).copied();
        logits.push(impression_logit(
            &mut tape, &vars, cfg, inputs, history, imp,
        )?);
        labels.push(if imp.label { 1.0 } else { 0.0 });
    }
    let z = tape.concat_cols(&logits)?;
    let losses = tape.bce_with_logits(z, &labels)?;
    let loss = tape.mean_all(losses);
    let pass = tape.backward(loss)?;
    let grads = collect_grads(&pass, &vars);
    Ok((tape.value(loss).data()[0] as f64, grads))
}

/// Click probability for one impression under fixed parameters.
pub fn predict_ctr(
    params: &ParamStore,
    cfg: &RankerConfig,
    inputs: &RankInputs,
    imp: &Impression,
) -> Result<f64> {
    let by_user = history_map(inputs.histories);
    let mut tape = Tape::new();
    let vars = constants_of(&mut tape, params);
    let history = by_user.get(&imp.user_id).copied();
    let logit = impression_logit(&mut tape, &vars, cfg, inputs, history, imp)?;
    let y = tape.sigmoid(logit);
    Ok(tape.value(y).data()[0] as f64)
}

/// Scores every impression; read-only over the parameters.
pub fn score_impressions(
    params: &ParamStore,
    cfg: &RankerConfig,
    inputs: &RankInputs,
    impressions: &[Impression],
) -> Result<Vec<f64>> {
    let by_user = history_map(inputs.histories);
    impressions
        .iter()
        .map(|imp| {
            let mut tape = Tape::new();
            let vars = constants_of(&mut tape, params);
            let history = by_user.get(&imp.user_id).copied();
            let logit = impression_logit(&mut tape, &vars, cfg, inputs, history, imp)?;
            let y = tape.sigmoid(logit);
            Ok(tape.value(y).data()[0] as f64)
        })
        .collect()
}

fn constants_of(tape: &mut Tape, params: &ParamStore) -> BTreeMap<String, Var> {
    params
        .iter()
        .map(|(name, value)| (name.to_string(), tape.constant(value.clone())))
        .collect()
}

/// One scored candidate, ready for JSONL emission.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredImpression {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtrTracePoint {
    pub step: usize,
    pub loss: f64,
    pub auc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainedRanker {
    pub config: RankerConfig,
    pub params: ParamStore,
    pub trace: Vec<CtrTracePoint>,
}

/// Trains the full model with Adam on mini-batches of impressions.
pub fn train_ctr(
    cfg: &RankerConfig,
    inputs: &RankInputs,
    train: &[Impression],
    eval: &[Impression],
) -> Result<TrainedRanker> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::data("no training impressions"));
    }
    if inputs.reps.dim() != cfg.fill_dim {
        return Err(Error::config(format!(
            "representations are {}-dim, config expects fill_dim {}",
            inputs.reps.dim(),
            cfg.fill_dim
        )));
    }
    let mut params = init_ranker_params(cfg);
    let mut batch_rng = stream_rng(cfg.seed, "ranker/batches");
    let indices: Vec<usize> = (0..train.len()).collect();
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let chosen: Vec<usize> = if indices.len() >= cfg.batch_size {
            let mut pool = indices.clone();
            pool.partial_shuffle(&mut batch_rng, cfg.batch_size);
            pool.into_iter().take(cfg.batch_size).collect()
        } else {
            (0..cfg.batch_size)
                .map(|_| batch_rng.gen_range(0..indices.len()))
                .collect()
        };
        let batch: Vec<Impression> = chosen.into_iter().map(|i| train[i].clone()).collect();
        let (loss, grads) = ctr_loss(&params, cfg, inputs, &batch)?;
        adam_step(&mut params, &grads, &cfg.optim, (step + 1) as u64)?;
        let evaluate_now = cfg.eval_every > 0
            && !eval.is_empty()
            && ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps);
        let auc_now = if evaluate_now {
            let scores = score_impressions(&params, cfg, inputs, eval)?;
            let labels: Vec<bool> = eval.iter().map(|imp| imp.label).collect();
            Some(auc(&scores, &labels)?)
        } else {
            None
        };
        trace.push(CtrTracePoint {
            step: step + 1,
            loss,
            auc: auc_now,
        });
    }
    Ok(TrainedRanker {
        config: cfg.clone(),
        params,
        trace,
    })
}

/// Retrieval-pathway outputs for a batch of candidates against one sequence,
/// with key/value projections computed once over the union of retrieved slots.
#[derive(Clone, Debug)]
pub struct BatchGatherScore {
    /// Per-candidate attention outputs, [candidates, d_x].
    pub h_b: Tensor,
    /// Rows that went through the K/V projections.
    pub projected_rows: usize,
    /// Rows a per-candidate recomputation would have projected.
    pub naive_rows: usize,
}

/// Serving-path ESU: per-candidate retrieval lists over a shared sequence.
/// Candidates with an empty list get the learned default vector.
pub fn batch_gather_score(
    params: &ParamStore,
    cfg: &RankerConfig,
    seq_x: &Tensor,
    cands_x: &Tensor,
    retrieved: &[Vec<usize>],
) -> Result<BatchGatherScore> {
    let dx = cfg.d_x();
    if seq_x.cols() != dx || cands_x.cols() != dx {
        return Err(Error::shape(format!(
            "sequence and candidate rows must be {dx} wide"
        )));
    }
    if cands_x.rows() != retrieved.len() {
        return Err(Error::shape(format!(
            "{} candidates but {} retrieval lists",
            cands_x.rows(),
            retrieved.len()
        )));
    }
    if cands_x.rows() == 0 {
        return Err(Error::data("no candidates to score"));
    }
    let mut unique: Vec<usize> = retrieved.iter().flatten().copied().collect();
    unique.sort_unstable();
    unique.dedup();
    if let Some(bad) = unique.iter().find(|i| **i >= seq_x.rows()) {
        return Err(Error::data(format!(
            "retrieved slot {bad} outside sequence of {}",
            seq_x.rows()
        )));
    }
    let pos_of: BTreeMap<usize, usize> =
        unique.iter().enumerate().map(|(p, i)| (*i, p)).collect();
    let unique_x = Tensor::from_rows(
        &unique
            .iter()
            .map(|i| seq_x.row(*i).to_vec())
            .collect::<Vec<_>>(),
    )
    .unwrap_or_else(|_| Tensor::zeros(vec![0, dx]));
    let k_all = if unique.is_empty() {
        Tensor::zeros(vec![0, dx])
    } else {
        linear_forward(&unique_x, params.get("esu.wk")?, None)?
    };
    let v_all = if unique.is_empty() {
        Tensor::zeros(vec![0, dx])
    } else {
        linear_forward(&unique_x, params.get("esu.wv")?, None)?
    };
    let q_all = linear_forward(cands_x, params.get("esu.wq")?, None)?;
    let wo = params.get("esu.wo")?;
    let default = params.get("esu.default")?;
    let dh = dx / cfg.n_heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut h_b = Tensor::zeros(vec![cands_x.rows(), dx]);
    for (c, picks) in retrieved.iter().enumerate() {
        if picks.is_empty() {
            h_b.row_mut(c).copy_from_slice(default.row(0));
            continue;
        }
        let rows: Vec<usize> = picks.iter().map(|i| pos_of[i]).collect();
        let q = q_all.row(c);
        let mut ctx = vec![0.0f32; dx];
        for h in 0..cfg.n_heads {
            let lo = h * dh;
            let mut scores: Vec<f32> = rows
                .iter()
                .map(|r| {
                    let k = &k_all.row(*r)[lo..lo + dh];
                    q[lo..lo + dh]
                        .iter()
                        .zip(k)
                        .map(|(a, b)| a * b)
                        .sum::<f32>()
                        * scale
                })
                .collect();
            let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut total = 0.0f32;
            for s in &mut scores {
                *s = (*s - max).exp();
                total += *s;
            }
            for (w, r) in scores.iter().zip(&rows) {
                let v = &v_all.row(*r)[lo..lo + dh];
                for (acc, vv) in ctx[lo..lo + dh].iter_mut().zip(v) {
                    *acc += (w / total) * vv;
                }
            }
        }
        let ctx = Tensor::new(vec![1, dx], ctx)?;
        let out = linear_forward(&ctx, wo, None)?;
        h_b.row_mut(c).copy_from_slice(out.row(0));
    }
    Ok(BatchGatherScore {
        h_b,
        projected_rows: unique.len(),
        naive_rows: retrieved.iter().map(Vec::len).sum(),
    })
}
