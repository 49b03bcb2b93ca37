//! Layer builders on top of the tape, plus forward-only wrappers for callers
//! that just want a Tensor out.

use crate::error::{Error, Result};
use crate::nn::tape::{Tape, Var};
use crate::nn::tensor::Tensor;

/// x[m,k] · w[k,n] (+ b[n]). Forward only.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let mut out = x.matmul(w)?;
    if let Some(b) = b {
        if b.len() != out.cols() {
            return Err(Error::shape(format!(
                "bias of width {} on output of width {}",
                b.len(),
                out.cols()
            )));
        }
        for i in 0..out.rows() {
            for (o, bv) in out.row_mut(i).iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    Ok(out)
}

/// Tape version of `linear_forward`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}

/// Projection weights of one attention block; all [d,d], no biases.
#[derive(Copy, Clone)]
pub struct MhaVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

pub struct MhaOut {
    pub out: Var,
    /// Post-softmax attention weights per head, [m, n] each; for inspection.
    pub head_weights: Vec<Var>,
}

/// Multi-head scaled dot-product attention.
///
/// Queries/keys/values are projected, split into `n_heads` column groups,
/// scored at scale 1/sqrt(d/n_heads) with max-subtracted softmax, then the
/// concatenated head outputs go through the output projection.
pub fn multi_head_attention(
    tape: &mut Tape,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    w: &MhaVars,
    n_heads: usize,
) -> Result<MhaOut> {
    let d = tape.value(q_in).cols();
    let n_ctx = tape.value(k_in).rows();
    if n_ctx == 0 {
        return Err(Error::data("attention over an empty context".to_string()));
    }
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::config(format!(
            "model width {d} not divisible into {n_heads} heads"
        )));
    }
    if tape.value(v_in).rows() != n_ctx {
        return Err(Error::shape("keys and values disagree on rows".to_string()));
    }
    let dh = d / n_heads;
    let q = tape.matmul(q_in, w.wq)?;
    let k = tape.matmul(k_in, w.wk)?;
    let v = tape.matmul(v_in, w.wv)?;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut head_weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scaled = tape.scale(scores, scale);
        let weights = tape.softmax_rows(scaled)?;
        heads.push(tape.matmul(weights, vh)?);
        head_weights.push(weights);
    }
    let ctx = tape.concat_cols(&heads)?;
    let out = tape.matmul(ctx, w.wo)?;
    Ok(MhaOut { out, head_weights })
}

/// Forward-only attention over plain tensors; also returns per-head weights.
pub fn attention_forward(
    q_in: &Tensor,
    k_in: &Tensor,
    v_in: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
    n_heads: usize,
) -> Result<(Tensor, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let q = tape.constant(q_in.clone());
    let k = tape.constant(k_in.clone());
    let v = tape.constant(v_in.clone());
    let w = MhaVars {
        wq: tape.constant(wq.clone()),
        wk: tape.constant(wk.clone()),
        wv: tape.constant(wv.clone()),
        wo: tape.constant(wo.clone()),
    };
    let mha = multi_head_attention(&mut tape, q, k, v, &w, n_heads)?;
    let weights = mha
        .head_weights
        .iter()
        .map(|w| tape.value(*w).clone())
        .collect();
    Ok((tape.value(mha.out).clone(), weights))
}
