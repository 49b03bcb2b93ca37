//! Residual-quantized semantic IDs over item representations.
//!
//! An MLP encoder maps each item vector to a low-dimensional latent; a stack
//! of codebooks quantizes that latent level by level, each level coding the
//! residual the previous levels left behind. The decoder reconstructs the
//! item vector from the quantized latent through a straight-through
//! estimator, so encoder gradients pass the (non-differentiable)
//! quantization unchanged.
//!
//! Code indices are 1-based everywhere outside this module: 0 stays reserved
//! for padding and special tokens downstream.
//!
//! Training recomputes the quantization plan (chosen codes plus stop-grad
//! constants) every step. The loss builder takes the plan as an argument, so
//! a finite-difference check against a frozen plan sees exactly the
//! surrogate the tape differentiates.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::RepTable;
use crate::error::{Error, Result};
use crate::nn::{
    adam_step, collect_grads, gelu_scalar, linear_forward, load_params, OptimConfig, ParamStore,
    Tape, Tensor, Var,
};
use crate::rng::stream_rng;
use crate::types::ItemId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RqVaeConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub code_dim: usize,
    pub levels: usize,
    pub codebook_size: usize,
    /// Commitment weight on the encoder side of the quantization losses.
    pub beta: f32,
    pub steps: u64,
    pub batch_size: usize,
    pub kmeans_iters: usize,
    /// Codes unused for this many steps get reseeded onto live residuals.
    pub reseed_every: u64,
    pub optim: OptimConfig,
}

impl Default for RqVaeConfig {
    fn default() -> Self {
        RqVaeConfig {
            input_dim: 32,
            hidden_dim: 64,
            code_dim: 8,
            levels: 3,
            codebook_size: 64,
            beta: 0.25,
            steps: 800,
            batch_size: 64,
            kmeans_iters: 10,
            reseed_every: 50,
            optim: OptimConfig {
                learning_rate: 3e-3,
                total_steps: 800,
                ..OptimConfig::default()
            },
        }
    }
}

impl RqVaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.code_dim == 0 {
            return Err(Error::config("rq-vae dims must be positive"));
        }
        if self.levels == 0 {
            return Err(Error::config("rq-vae needs at least one level"));
        }
        if self.codebook_size == 0 {
            return Err(Error::config("codebook_size must be positive"));
        }
        if self.beta < 0.0 {
            return Err(Error::config("beta must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        self.optim.validate()
    }
}

fn codebook_name(level: usize) -> String {
    format!("codebook.{level}")
}

/// Quantizes one latent against a codebook stack. Returns 1-based code
/// indices per level and the final residual. Ties go to the lowest index.
pub fn residual_quantize(z: &[f32], codebooks: &[&Tensor]) -> Result<(Vec<u32>, Vec<f32>)> {
    let mut residual = z.to_vec();
    let mut codes = Vec::with_capacity(codebooks.len());
    for (level, book) in codebooks.iter().enumerate() {
        if book.cols() != z.len() {
            return Err(Error::shape(format!(
                "level {level} codebook is {}-wide, latent is {}-wide",
                book.cols(),
                z.len()
            )));
        }
        let mut best = 0usize;
        let mut best_d = f32::INFINITY;
        for k in 0..book.rows() {
            let row = book.row(k);
            let mut d = 0.0f32;
            for (r, c) in residual.iter().zip(row) {
                let diff = r - c;
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        for (r, c) in residual.iter_mut().zip(codebooks[level].row(best)) {
            *r -= c;
        }
        codes.push((best + 1) as u32);
    }
    Ok((codes, residual))
}

/// Frozen quantization decisions plus the stop-gradient constants the loss
/// builder treats as data.
pub struct QuantPlan {
    /// 1-based chosen codes, `[batch][level]`.
    pub codes: Vec<Vec<u32>>,
    /// Encoder output at plan time.
    pub z_base: Tensor,
    /// `prefix[l]` = sum of the first `l` chosen code vectors, `[batch, code_dim]`;
    /// `prefix[levels]` is the fully quantized latent.
    pub prefix: Vec<Tensor>,
}

pub fn encode_batch(params: &ParamStore, x: &Tensor) -> Result<Tensor> {
    let mut h = linear_forward(x, params.get("enc.w1")?, Some(params.get("enc.b1")?))?;
    for v in h.data_mut() {
        *v = gelu_scalar(*v);
    }
    linear_forward(&h, params.get("enc.w2")?, Some(params.get("enc.b2")?))
}

pub fn decode_batch(params: &ParamStore, z: &Tensor) -> Result<Tensor> {
    let mut h = linear_forward(z, params.get("dec.w1")?, Some(params.get("dec.b1")?))?;
    for v in h.data_mut() {
        *v = gelu_scalar(*v);
    }
    linear_forward(&h, params.get("dec.w2")?, Some(params.get("dec.b2")?))
}

pub fn make_plan(params: &ParamStore, cfg: &RqVaeConfig, batch: &Tensor) -> Result<QuantPlan> {
    let z = encode_batch(params, batch)?;
    let b = z.rows();
    let d = z.cols();
    let books: Vec<&Tensor> = (0..cfg.levels)
        .map(|l| params.get(&codebook_name(l)))
        .collect::<Result<_>>()?;
    let mut codes = Vec::with_capacity(b);
    let mut prefix = vec![Tensor::zeros(vec![b, d]); cfg.levels + 1];
    for i in 0..b {
        let (c, _) = residual_quantize(z.row(i), &books)?;
        let mut acc = vec![0.0f32; d];
        for (l, &code) in c.iter().enumerate() {
            for (a, v) in acc.iter_mut().zip(books[l].row(code as usize - 1)) {
                *a += v;
            }
            prefix[l + 1].row_mut(i).copy_from_slice(&acc);
        }
        codes.push(c);
    }
    Ok(QuantPlan {
        codes,
        z_base: z,
        prefix,
    })
}

pub struct RqVaeLoss {
    pub total: Var,
    pub recon: Var,
}

/// Differentiable surrogate for a fixed plan:
/// recon ‖x − dec(z + sg(ẑ−z))‖² + Σ_l ‖sg(r_l) − c_l‖² + β‖z − sg(prefix_{l+1})‖².
pub fn build_rqvae_loss(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &RqVaeConfig,
    batch: &Tensor,
    plan: &QuantPlan,
) -> Result<RqVaeLoss> {
    let b = batch.rows();
    if plan.codes.len() != b {
        return Err(Error::shape(format!(
            "plan covers {} rows, batch has {b}",
            plan.codes.len()
        )));
    }
    let var = |name: &str| -> Result<Var> {
        vars.get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("missing parameter var '{name}'")))
    };
    let x = tape.constant(batch.clone());
    let h = linear_on_tape(tape, x, var("enc.w1")?, var("enc.b1")?)?;
    let h = tape.gelu(h);
    let z = linear_on_tape(tape, h, var("enc.w2")?, var("enc.b2")?)?;

    let mut terms = Vec::new();
    for l in 0..cfg.levels {
        let idx: Vec<usize> = plan.codes.iter().map(|c| c[l] as usize - 1).collect();
        let chosen = tape.gather_rows(var(&codebook_name(l))?, &idx)?;
        // Codebook pull: target is the plan-time residual, a constant.
        let mut target = plan.z_base.clone();
        for (t, p) in target.data_mut().iter_mut().zip(plan.prefix[l].data()) {
            *t -= p;
        }
        let target = tape.constant(target);
        let diff = tape.sub(target, chosen)?;
        let sq = tape.sq_norm_rows(diff)?;
        terms.push(tape.mean_all(sq));
        // Commitment: encoder output chases the quantized latent.
        if cfg.beta > 0.0 {
            let stop = tape.constant(plan.prefix[l + 1].clone());
            let diff = tape.sub(z, stop)?;
            let sq = tape.sq_norm_rows(diff)?;
            let mean = tape.mean_all(sq);
            terms.push(tape.scale(mean, cfg.beta));
        }
    }

    // Straight-through: decoder sees the quantized latent, encoder sees the
    // gradient as if quantization were identity.
    let mut offset = plan.prefix[cfg.levels].clone();
    for (o, zb) in offset.data_mut().iter_mut().zip(plan.z_base.data()) {
        *o -= zb;
    }
    let offset = tape.constant(offset);
    let zhat = tape.add(z, offset)?;
    let h = linear_on_tape(tape, zhat, var("dec.w1")?, var("dec.b1")?)?;
    let h = tape.gelu(h);
    let recon = linear_on_tape(tape, h, var("dec.w2")?, var("dec.b2")?)?;
    let diff = tape.sub(x, recon)?;
    let sq = tape.sq_norm_rows(diff)?;
    let rec = tape.mean_all(sq);
    terms.push(rec);

    Ok(RqVaeLoss {
        total: tape.add_n(&terms)?,
        recon: rec,
    })
}

fn linear_on_tape(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}

pub struct RqVae {
    pub config: RqVaeConfig,
    pub params: ParamStore,
}

impl RqVae {
    pub fn codebooks(&self) -> Result<Vec<&Tensor>> {
        (0..self.config.levels)
            .map(|l| self.params.get(&codebook_name(l)))
            .collect()
    }

    /// 1-based semantic ID tuple for one item vector.
    pub fn tokenize(&self, rep: &[f32]) -> Result<Vec<u32>> {
        let x = Tensor::new(vec![1, rep.len()], rep.to_vec())?;
        let z = encode_batch(&self.params, &x)?;
        let (codes, _) = residual_quantize(z.row(0), &self.codebooks()?)?;
        Ok(codes)
    }

    pub fn extract_sids(&self, reps: &RepTable) -> Result<BTreeMap<ItemId, Vec<u32>>> {
        let mut out = BTreeMap::new();
        for &id in reps.ids() {
            out.insert(id, self.tokenize(reps.get(id)?)?);
        }
        Ok(out)
    }
}

/// Mean squared reconstruction error through the full quantize-decode path.
pub fn reconstruction_error(params: &ParamStore, cfg: &RqVaeConfig, data: &Tensor) -> Result<f64> {
    let plan = make_plan(params, cfg, data)?;
    let recon = decode_batch(params, &plan.prefix[cfg.levels])?;
    let mut total = 0.0f64;
    for i in 0..data.rows() {
        for (a, b) in data.row(i).iter().zip(recon.row(i)) {
            total += ((a - b) as f64).powi(2);
        }
    }
    Ok(total / data.rows() as f64)
}

fn kmeans(points: &Tensor, k: usize, iters: usize, rng: &mut impl Rng) -> Tensor {
    let n = points.rows();
    let d = points.cols();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut centers = Tensor::zeros(vec![k, d]);
    for c in 0..k {
        let src = points.row(order[c % n]);
        let dst = centers.row_mut(c);
        dst.copy_from_slice(src);
        if c >= n {
            // Duplicated seed points spread apart with a little noise.
            for v in dst.iter_mut() {
                *v += rng.gen_range(-0.01f32..0.01);
            }
        }
    }
    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        for (i, a) in assign.iter_mut().enumerate() {
            let p = points.row(i);
            let mut best = 0usize;
            let mut best_d = f32::INFINITY;
            for c in 0..k {
                let mut dist = 0.0f32;
                for (x, y) in p.iter().zip(centers.row(c)) {
                    let diff = x - y;
                    dist += diff * diff;
                }
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            *a = best;
        }
        let mut sums = Tensor::zeros(vec![k, d]);
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums.row_mut(a).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f32;
                let row = sums.row_mut(c);
                for v in row.iter_mut() {
                    *v *= inv;
                }
                centers.row_mut(c).copy_from_slice(sums.row(c));
            }
            // Empty clusters keep their previous center.
        }
    }
    centers
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RqVaeStats {
    pub initial_recon: f64,
    pub final_recon: f64,
    pub final_loss: f64,
    pub reseeded: usize,
}

pub fn init_rqvae_params(cfg: &RqVaeConfig, seed: u64) -> ParamStore {
    let mut rng = stream_rng(seed, "tokenize/init");
    let mut params = ParamStore::new();
    let (d, h, c) = (cfg.input_dim, cfg.hidden_dim, cfg.code_dim);
    params.insert_linear_init("enc.w1", vec![d, h], d, &mut rng);
    params.insert_zeros("enc.b1", vec![h]);
    params.insert_linear_init("enc.w2", vec![h, c], h, &mut rng);
    params.insert_zeros("enc.b2", vec![c]);
    params.insert_linear_init("dec.w1", vec![c, h], c, &mut rng);
    params.insert_zeros("dec.b1", vec![h]);
    params.insert_linear_init("dec.w2", vec![h, d], h, &mut rng);
    params.insert_zeros("dec.b2", vec![d]);
    params
}

pub fn train_rqvae(reps: &RepTable, cfg: &RqVaeConfig, seed: u64) -> Result<(RqVae, RqVaeStats)> {
    cfg.validate()?;
    if reps.dim() != cfg.input_dim {
        return Err(Error::config(format!(
            "representations are {}-dim, config expects {}",
            reps.dim(),
            cfg.input_dim
        )));
    }
    let n = reps.ids().len();
    let data = Tensor::new(vec![n, cfg.input_dim], reps.data().to_vec())?;
    let mut params = init_rqvae_params(cfg, seed);

    // Codebooks from k-means over the latents each level actually sees.
    let mut kmeans_rng = stream_rng(seed, "tokenize/kmeans");
    let mut residuals = encode_batch(&params, &data)?;
    for l in 0..cfg.levels {
        let book = kmeans(&residuals, cfg.codebook_size, cfg.kmeans_iters, &mut kmeans_rng);
        for i in 0..residuals.rows() {
            let (codes, _) = residual_quantize(residuals.row(i), &[&book])?;
            let chosen = book.row(codes[0] as usize - 1).to_vec();
            for (r, c) in residuals.row_mut(i).iter_mut().zip(&chosen) {
                *r -= c;
            }
        }
        params.insert(codebook_name(l), book);
    }

    let initial_recon = reconstruction_error(&params, cfg, &data)?;
    let mut batch_rng = stream_rng(seed, "tokenize/batches");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut batch_rng);
    let mut cursor = 0usize;
    let mut usage = vec![vec![0u64; cfg.codebook_size]; cfg.levels];
    let mut reseeded = 0usize;
    let mut final_loss = 0.0f64;

    for step in 0..cfg.steps {
        let mut rows = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == n {
                order.shuffle(&mut batch_rng);
                cursor = 0;
            }
            rows.push(order[cursor]);
            cursor += 1;
        }
        let mut batch = Tensor::zeros(vec![rows.len(), cfg.input_dim]);
        for (bi, &r) in rows.iter().enumerate() {
            batch.row_mut(bi).copy_from_slice(data.row(r));
        }

        let plan = make_plan(&params, cfg, &batch)?;
        for codes in &plan.codes {
            for (l, &c) in codes.iter().enumerate() {
                usage[l][c as usize - 1] += 1;
            }
        }
        let mut tape = Tape::new();
        let vars = load_params(&mut tape, &params);
        let loss = build_rqvae_loss(&mut tape, &vars, cfg, &batch, &plan)?;
        final_loss = tape.value(loss.total).data()[0] as f64;
        let pass = tape.backward(loss.total)?;
        let grads = collect_grads(&pass, &vars);
        adam_step(&mut params, &grads, &cfg.optim, step)?;

        if (step + 1) % cfg.reseed_every == 0 {
            reseeded += reseed_dead_codes(&mut params, cfg, &plan, &mut usage, &mut batch_rng)?;
        }
    }

    let final_recon = reconstruction_error(&params, cfg, &data)?;
    Ok((
        RqVae {
            config: cfg.clone(),
            params,
        },
        RqVaeStats {
            initial_recon,
            final_recon,
            final_loss,
            reseeded,
        },
    ))
}

/// Moves codes nothing selected onto live residuals from the current batch,
/// then clears the usage window.
fn reseed_dead_codes(
    params: &mut ParamStore,
    cfg: &RqVaeConfig,
    plan: &QuantPlan,
    usage: &mut [Vec<u64>],
    rng: &mut impl Rng,
) -> Result<usize> {
    let b = plan.z_base.rows();
    let mut reseeded = 0usize;
    for l in 0..cfg.levels {
        for k in 0..cfg.codebook_size {
            if usage[l][k] > 0 {
                continue;
            }
            let i = rng.gen_range(0..b);
            let mut target = plan.z_base.row(i).to_vec();
            for (t, p) in target.iter_mut().zip(plan.prefix[l].row(i)) {
                *t -= p;
            }
            params
                .get_mut(&codebook_name(l))?
                .value
                .row_mut(k)
                .copy_from_slice(&target);
            reseeded += 1;
        }
        for u in usage[l].iter_mut() {
            *u = 0;
        }
    }
    Ok(reseeded)
}
