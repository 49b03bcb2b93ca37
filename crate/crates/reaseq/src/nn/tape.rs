//! Reverse-mode autodiff on a flat tape.
//!
//! Every op appends a node holding its forward value plus a closure that
//! scatters the incoming gradient to the op's inputs. `backward` walks the
//! tape once in reverse from a scalar loss. Nodes reachable only from
//! constants carry no closure, so gradient work stops at frozen inputs.

use crate::error::{Error, Result};
use crate::nn::tensor::{
    axpy, dot, matmul_into, matmul_nt_into, matmul_tn_into, Tensor,
};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&Tensor, &[Tensor], &mut Vec<Option<Tensor>>)>;

#[derive(Default)]
pub struct Tape {
    vals: Vec<Tensor>,
    backs: Vec<Option<BackFn>>,
    needs: Vec<bool>,
}

/// Per-node gradients produced by one backward pass.
pub struct BackwardPass {
    grads: Vec<Option<Tensor>>,
}

impl BackwardPass {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a var, materializing zeros of the given shape if the var
    /// never received one.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

/// Gets-or-creates the gradient slot and lets the caller accumulate into it.
fn acc_into(
    grads: &mut Vec<Option<Tensor>>,
    idx: usize,
    shape: &[usize],
    f: impl FnOnce(&mut [f32]),
) {
    if grads[idx].is_none() {
        grads[idx] = Some(Tensor::zeros(shape.to_vec()));
    }
    f(grads[idx].as_mut().unwrap().data_mut());
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    fn push(&mut self, value: Tensor, needs: bool, back: Option<BackFn>) -> Var {
        self.vals.push(value);
        self.backs.push(back);
        self.needs.push(needs);
        Var(self.vals.len() - 1)
    }

    /// Trainable input; receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, true, None)
    }

    /// Frozen input; backward flow stops here.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, None)
    }

    /// Walks the tape in reverse from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Result<BackwardPass> {
        if self.vals[loss.0].len() != 1 {
            return Err(Error::shape(format!(
                "backward root must be scalar, got {:?}",
                self.vals[loss.0].shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.vals.len()];
        grads[loss.0] = Some(Tensor::new(
            self.vals[loss.0].shape().to_vec(),
            vec![1.0],
        )?);
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || self.backs[i].is_none() {
                continue;
            }
            let g = grads[i].take().unwrap();
            (self.backs[i].as_ref().unwrap())(&g, &self.vals, &mut grads);
            grads[i] = Some(g);
        }
        Ok(BackwardPass { grads })
    }

    // ─── binary / elementwise ──────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape_binary(a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.needs[a.0], self.needs[b.0]);
        let out = zip_map(&self.vals[a.0], &self.vals[b.0], |x, y| x - y)?;
        let shape = out.shape().to_vec();
        let back: BackFn = Box::new(move |d, _v, g| {
            if na {
                acc_into(g, a.0, &shape, |buf| axpy(buf, 1.0, d.data()));
            }
            if nb {
                acc_into(g, b.0, &shape, |buf| axpy(buf, -1.0, d.data()));
            }
        });
        Ok(self.push(out, na || nb, Some(back)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.needs[a.0], self.needs[b.0]);
        let out = zip_map(&self.vals[a.0], &self.vals[b.0], |x, y| x * y)?;
        let shape = out.shape().to_vec();
        let back: BackFn = Box::new(move |d, v, g| {
            if na {
                let bv = v[b.0].data().to_vec();
                acc_into(g, a.0, &shape, |buf| {
                    for ((o, di), bi) in buf.iter_mut().zip(d.data()).zip(&bv) {
                        *o += di * bi;
                    }
                });
            }
            if nb {
                let av = v[a.0].data().to_vec();
                acc_into(g, b.0, &shape, |buf| {
                    for ((o, di), ai) in buf.iter_mut().zip(d.data()).zip(&av) {
                        *o += di * ai;
                    }
                });
            }
        });
        Ok(self.push(out, na || nb, Some(back)))
    }

    fn same_shape_binary(&mut self, a: Var, b: Var, f: fn(f32, f32) -> f32) -> Result<Var> {
        let (na, nb) = (self.needs[a.0], self.needs[b.0]);
        let out = zip_map(&self.vals[a.0], &self.vals[b.0], f)?;
        let shape = out.shape().to_vec();
        let back: BackFn = Box::new(move |d, _v, g| {
            for (idx, needs) in [(a.0, na), (b.0, nb)] {
                if needs {
                    acc_into(g, idx, &shape, |buf| axpy(buf, 1.0, d.data()));
                }
            }
        });
        Ok(self.push(out, na || nb, Some(back)))
    }

    /// Sum of any number of same-shape vars.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape("add_n of empty list"))?;
        let mut out = self.vals[first.0].clone();
        for x in &xs[1..] {
            if self.vals[x.0].shape() != out.shape() {
                return Err(Error::shape("add_n shape mismatch".to_string()));
            }
            out.add_assign(&self.vals[x.0]);
        }
        let needs: Vec<(usize, bool)> = xs.iter().map(|x| (x.0, self.needs[x.0])).collect();
        let any = needs.iter().any(|(_, n)| *n);
        let shape = out.shape().to_vec();
        let back: BackFn = Box::new(move |d, _v, g| {
            for (idx, n) in &needs {
                if *n {
                    acc_into(g, *idx, &shape, |buf| axpy(buf, 1.0, d.data()));
                }
            }
        });
        Ok(self.push(out, any, Some(back)))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        self.affine(a, s, 0.0)
    }

    /// Elementwise mul * x + add.
    pub fn affine(&mut self, a: Var, mul: f32, add: f32) -> Var {
        let na = self.needs[a.0];
        let mut out = self.vals[a.0].clone();
        for x in out.data_mut() {
            *x = mul * *x + add;
        }
        let shape = out.shape().to_vec();
        let back: BackFn = Box::new(move |d, _v, g| {
            if na {
                acc_into(g, a.0, &shape, |buf| axpy(buf, mul, d.data()));
            }
        });
        self.push(out, na, Some(back))
    }

    // ─── matmul family ─────────────────────────────────────────────────────

    /// A[m,k] · B[k,n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = dims2(&self.vals[a.0])?;
        let (kb, n) = dims2(&self.vals[b.0])?;
        if ka != kb {
            return Err(Error::shape(format!("matmul [{m},{ka}] x [{kb},{n}]")));
        }
        let k = ka;
        let mut out = Tensor::zeros(vec![m, n]);
        matmul_into(
            out.data_mut(),
            self.vals[a.0].data(),
            self.vals[b.0].data(),
            m,
            k,
            n,
        );
        let (na, nb) = (self.needs[a.0], self.needs[b.0]);
        let back: BackFn = Box::new(move |d, v, g| {
            if na {
                // da += d · bᵀ
                let bv = v[b.0].data().to_vec();
                acc_into(g, a.0, &[m, k], |buf| {
                    matmul_nt_into(buf, d.data(), &bv, m, n, k);
                });
            }
            if nb {
                // db += aᵀ · d
                let av = v[a.0].data().to_vec();
                acc_into(g, b.0, &[k, n], |buf| {
                    matmul_tn_into(buf, &av, d.data(), m, k, n);
                });
            }
        });
        Ok(self.push(out, na || nb, Some(back)))
    }

    /// A[m,k] · B[n,k]ᵀ — attention scores without materializing a transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = dims2(&self.vals[a.0])?;
        let (n, kb) = dims2(&self.vals[b.0])?;
        if ka != kb {
            return Err(Error::shape(format!("matmul_nt [{m},{ka}] x [{n},{kb}]ᵀ")));
        }
        let k = ka;
        let mut out = Tensor::zeros(vec![m, n]);
        matmul_nt_into(
            out.data_mut(),
            self.vals[a.0].data(),
            self.vals[b.0].data(),
            m,
            k,
            n,
        );
        let (na, nb) = (self.needs[a.0], self.needs[b.0]);
        let back: BackFn = Box::new(move |d, v, g| {
            if na {
                // da += d · b
                let bv = v[b.0].data().to_vec();
                acc_into(g, a.0, &[m, k], |buf| {
                    matmul_into(buf, d.data(), &bv, m, n, k);
                });
            }
            if nb {
                // db += dᵀ · a
                let av = v[a.0].data().to_vec();
                acc_into(g, b.0, &[n, k], |buf| {
                    matmul_tn_into(buf, d.data(), &av, m, n, k);
                });
            }
        });
        Ok(self.push(out, na || nb, Some(back)))
    }

    // ─── broadcasting ──────────────────────────────────────────────────────

    /// A[m,n] + row vector b[n], broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = dims2(&self.vals[a.0])?;
        if self.vals[b.0].len() != n {
            return Err(Error::shape(format!(
                "add_row [{m},{n}] + len-{} vector",
                self.vals[b.0].len()
            )));
        }
        let mut out = self.vals[a.0].clone();
        for i in 0..m {
            axpy(out.row_mut(i), 1.0, self.vals[b.0].data());
        }
        let (na, nb) = (self.needs[a.0], self.needs[b.0]);
        let bshape = self.vals[b.0].shape().to_vec();
        let back: BackFn = Box::new(move |d, _v, g| {
            if na {
                acc_into(g, a.0, &[m, n], |buf| axpy(buf, 1.0, d.data()));
            }
            if nb {
                acc_into(g, b.0, &bshape, |buf| {
                    for i in 0..m {
                        axpy(buf, 1.0, d.row(i));
                    }
                });
            }
        });
        Ok(self.push(out, na || nb, Some(back)))
    }

    /// Row vector b[n] tiled into [m,n].
    pub fn tile_row(&mut self, b: Var, m: usize) -> Result<Var> {
        let n = self.vals[b.0].len();
        if self.vals[b.0].rank() > 2 || self.vals[b.0].rows() != 1 {
            return Err(Error::shape("tile_row wants a single row".to_string()));
        }
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(self.vals[b.0].data());
        }
        let out = Tensor::new(vec![m, n], data)?;
        let nb = self.needs[b.0];
        let bshape = self.vals[b.0].shape().to_vec();
        let back: BackFn = Box::new(move |d, _v, g| {
            if nb {
                acc_into(g, b.0, &bshape, |buf| {
                    for i in 0..m {
                        axpy(buf, 1.0, d.row(i));
                    }
                });
            }
        });
        Ok(self.push(out, nb, Some(back)))
    }

    // ─── shape surgery ─────────────────────────────────────────────────────

    /// Columns [start, start+len) of a 2-D var.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2(&self.vals[a.0])?;
        if start + len > n {
            return Err(Error::shape(format!(
                "slice_cols {start}..{} of width {n}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&self.vals[a.0].row(i)[start..start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        let na = self.needs[a.0];
        let back: BackFn = Box::new(move |d, _v, g| {
            if na {
                acc_into(g, a.0, &[m, n], |buf| {
                    for i in 0..m {
                        axpy(&mut buf[i * n + start..i * n + start + len], 1.0, d.row(i));
                    }
                });
            }
        });
        Ok(self.push(out, na, Some(back)))
    }

    /// Horizontal concat of 2-D vars with equal row counts.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape("concat_cols of empty list"))?;
        let m = self.vals[first.0].rows();
        let widths: Vec<usize> = xs.iter().map(|x| self.vals[x.0].cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for x in xs {
                if self.vals[x.0].rows() != m {
                    return Err(Error::shape("concat_cols row mismatch".to_string()));
                }
                data.extend_from_slice(self.vals[x.0].row(i));
            }
        }
        let out = Tensor::new(vec![m, total], data)?;
        let parts: Vec<(usize, bool, usize)> = xs
            .iter()
            .zip(&widths)
            .map(|(x, w)| (x.0, self.needs[x.0], *w))
            .collect();
        let any = parts.iter().any(|(_, n, _)| *n);
        let back: BackFn = Box::new(move |d, v, g| {
            let mut offset = 0;
            for (idx, needs, w) in &parts {
                if *needs {
                    let shape = v[*idx].shape().to_vec();
                    acc_into(g, *idx, &shape, |buf| {
                        for i in 0..m {
                            axpy(
                                &mut buf[i * w..(i + 1) * w],
                                1.0,
                                &d.row(i)[offset..offset + w],
                            );
                        }
                    });
                }
                offset += w;
            }
        });
        Ok(self.push(out, any, Some(back)))
    }

    /// Rows of `table` selected by index; duplicates scatter-add in backward.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (k, d) = dims2(&self.vals[table.0])?;
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= k {
                return Err(Error::data(format!("gather index {i} out of {k} rows")));
            }
            data.extend_from_slice(self.vals[table.0].row(i));
        }
        let out = Tensor::new(vec![idx.len(), d], data)?;
        let nt = self.needs[table.0];
        let idx = idx.to_vec();
        let back: BackFn = Box::new(move |dout, _v, g| {
            if nt {
                acc_into(g, table.0, &[k, d], |buf| {
                    for (row, &i) in idx.iter().enumerate() {
                        axpy(&mut buf[i * d..(i + 1) * d], 1.0, dout.row(row));
                    }
                });
            }
        });
        Ok(self.push(out, nt, Some(back)))
    }

    // ─── nonlinearities ────────────────────────────────────────────────────

    /// GELU, tanh approximation. Smooth everywhere, which keeps central
    /// finite differences honest near zero.
    pub fn gelu(&mut self, a: Var) -> Var {
        const C: f32 = 0.797_884_6; // sqrt(2/pi)
        const A3: f32 = 0.044715;
        let na = self.needs[a.0];
        let mut out = self.vals[a.0].clone();
        for x in out.data_mut() {
            *x = crate::nn::tensor::gelu_scalar(*x);
        }
        let shape = out.shape().to_vec();
        let back: BackFn = Box::new(move |d, v, g| {
            if na {
                let xs = v[a.0].data().to_vec();
                acc_into(g, a.0, &shape, |buf| {
                    for ((o, di), &x) in buf.iter_mut().zip(d.data()).zip(&xs) {
                        let u = C * (x + A3 * x * x * x);
                        let t = u.tanh();
                        let sech2 = 1.0 - t * t;
                        let du = C * (1.0 + 3.0 * A3 * x * x);
                        *o += di * (0.5 * (1.0 + t) + 0.5 * x * sech2 * du);
                    }
                });
            }
        });
        self.push(out, na, Some(back))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let na = self.needs[a.0];
        let mut out = self.vals[a.0].clone();
        for x in out.data_mut() {
            *x = stable_sigmoid(*x);
        }
        let shape = out.shape().to_vec();
        let yvals = out.data().to_vec();
        let back: BackFn = Box::new(move |d, _v, g| {
            if na {
                acc_into(g, a.0, &shape, |buf| {
                    for ((o, di), &y) in buf.iter_mut().zip(d.data()).zip(&yvals) {
                        *o += di * y * (1.0 - y);
                    }
                });
            }
        });
        self.push(out, na, Some(back))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2(&self.vals[a.0])?;
        let mut out = self.vals[a.0].clone();
        for i in 0..m {
            softmax_in_place(out.row_mut(i));
        }
        let na = self.needs[a.0];
        let yvals = out.clone();
        let back: BackFn = Box::new(move |d, _v, g| {
            if na {
                acc_into(g, a.0, &[m, n], |buf| {
                    for i in 0..m {
                        let y = yvals.row(i);
                        let di = d.row(i);
                        let s = dot(di, y);
                        for j in 0..n {
                            buf[i * n + j] += y[j] * (di[j] - s);
                        }
                    }
                });
            }
        });
        Ok(self.push(out, na, Some(back)))
    }

    /// Per-row layer norm with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let (m, n) = dims2(&self.vals[x.0])?;
        if self.vals[gamma.0].len() != n || self.vals[beta.0].len() != n {
            return Err(Error::shape("layer_norm gain/shift width".to_string()));
        }
        let mut xhat = Tensor::zeros(vec![m, n]);
        let mut inv_std = vec![0.0f32; m];
        for i in 0..m {
            let row = self.vals[x.0].row(i);
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                xhat.data_mut()[i * n + j] = (row[j] - mean) * inv;
            }
        }
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            let gr = self.vals[gamma.0].data();
            let br = self.vals[beta.0].data();
            for j in 0..n {
                out.data_mut()[i * n + j] = xhat.at(i, j) * gr[j] + br[j];
            }
        }
        let (nx, ng, nb) = (self.needs[x.0], self.needs[gamma.0], self.needs[beta.0]);
        let gshape = self.vals[gamma.0].shape().to_vec();
        let bshape = self.vals[beta.0].shape().to_vec();
        let back: BackFn = Box::new(move |d, v, g| {
            if ng {
                acc_into(g, gamma.0, &gshape, |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[j] += d.at(i, j) * xhat.at(i, j);
                        }
                    }
                });
            }
            if nb {
                acc_into(g, beta.0, &bshape, |buf| {
                    for i in 0..m {
                        axpy(buf, 1.0, d.row(i));
                    }
                });
            }
            if nx {
                let gamma_v = v[gamma.0].data().to_vec();
                acc_into(g, x.0, &[m, n], |buf| {
                    for i in 0..m {
                        // dxhat = d ∘ gamma; dx = inv_std (dxhat - mean(dxhat) - xhat mean(dxhat ∘ xhat))
                        let mut mean_dx = 0.0f32;
                        let mut mean_dxx = 0.0f32;
                        for j in 0..n {
                            let dxh = d.at(i, j) * gamma_v[j];
                            mean_dx += dxh;
                            mean_dxx += dxh * xhat.at(i, j);
                        }
                        mean_dx /= n as f32;
                        mean_dxx /= n as f32;
                        for j in 0..n {
                            let dxh = d.at(i, j) * gamma_v[j];
                            buf[i * n + j] +=
                                inv_std[i] * (dxh - mean_dx - xhat.at(i, j) * mean_dxx);
                        }
                    }
                });
            }
        });
        Ok(self.push(out, nx || ng || nb, Some(back)))
    }

    /// Rows scaled to unit L2 norm; rows with norm ≤ eps pass through.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f32) -> Result<Var> {
        let (m, n) = dims2(&self.vals[x.0])?;
        let mut out = self.vals[x.0].clone();
        let mut norms = vec![0.0f32; m];
        for i in 0..m {
            let row = out.row_mut(i);
            let norm = dot(row, row).sqrt();
            norms[i] = norm;
            if norm > eps {
                for v in row {
                    *v /= norm;
                }
            }
        }
        let nx = self.needs[x.0];
        let yvals = out.clone();
        let back: BackFn = Box::new(move |d, _v, g| {
            if nx {
                acc_into(g, x.0, &[m, n], |buf| {
                    for i in 0..m {
                        let di = d.row(i);
                        if norms[i] > eps {
                            let y = yvals.row(i);
                            let s = dot(di, y);
                            for j in 0..n {
                                buf[i * n + j] += (di[j] - y[j] * s) / norms[i];
                            }
                        } else {
                            axpy(&mut buf[i * n..(i + 1) * n], 1.0, di);
                        }
                    }
                });
            }
        });
        Ok(self.push(out, nx, Some(back)))
    }

    // ─── reductions and losses ─────────────────────────────────────────────

    /// Row-wise squared L2 norm: [m,n] -> [m].
    pub fn sq_norm_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = dims2(&self.vals[x.0])?;
        let mut data = vec![0.0f32; m];
        for i in 0..m {
            let row = self.vals[x.0].row(i);
            data[i] = dot(row, row);
        }
        let out = Tensor::new(vec![m], data)?;
        let nx = self.needs[x.0];
        let back: BackFn = Box::new(move |d, v, g| {
            if nx {
                let xv = v[x.0].clone();
                acc_into(g, x.0, &[m, n], |buf| {
                    for i in 0..m {
                        axpy(&mut buf[i * n..(i + 1) * n], 2.0 * d.data()[i], xv.row(i));
                    }
                });
            }
        });
        Ok(self.push(out, nx, Some(back)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total: f64 = self.vals[x.0].data().iter().map(|&v| v as f64).sum();
        let out = Tensor::scalar(total as f32);
        let nx = self.needs[x.0];
        let shape = self.vals[x.0].shape().to_vec();
        let back: BackFn = Box::new(move |d, _v, g| {
            if nx {
                let s = d.data()[0];
                acc_into(g, x.0, &shape, |buf| {
                    for o in buf {
                        *o += s;
                    }
                });
            }
        });
        self.push(out, nx, Some(back))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let len = self.vals[x.0].len().max(1);
        let s = self.sum_all(x);
        self.scale(s, 1.0 / len as f32)
    }

    /// Rows of `pred` dotted against per-row candidate groups:
    /// out[i][j] = pred_i · cands[i*c + j].
    pub fn dot_set(&mut self, pred: Var, cands: Var, c: usize) -> Result<Var> {
        let (m, d) = dims2(&self.vals[pred.0])?;
        let (rows, d2) = dims2(&self.vals[cands.0])?;
        if d != d2 || rows != m * c {
            return Err(Error::shape(format!(
                "dot_set pred [{m},{d}] cands [{rows},{d2}] c={c}"
            )));
        }
        let mut data = vec![0.0f32; m * c];
        for i in 0..m {
            let p = self.vals[pred.0].row(i);
            for j in 0..c {
                data[i * c + j] = dot(p, self.vals[cands.0].row(i * c + j));
            }
        }
        let out = Tensor::new(vec![m, c], data)?;
        let (np, nc) = (self.needs[pred.0], self.needs[cands.0]);
        let back: BackFn = Box::new(move |dout, v, g| {
            if np {
                let cv = v[cands.0].clone();
                acc_into(g, pred.0, &[m, d], |buf| {
                    for i in 0..m {
                        for j in 0..c {
                            axpy(
                                &mut buf[i * d..(i + 1) * d],
                                dout.at(i, j),
                                cv.row(i * c + j),
                            );
                        }
                    }
                });
            }
            if nc {
                let pv = v[pred.0].clone();
                acc_into(g, cands.0, &[m * c, d], |buf| {
                    for i in 0..m {
                        for j in 0..c {
                            let r = i * c + j;
                            axpy(&mut buf[r * d..(r + 1) * d], dout.at(i, j), pv.row(i));
                        }
                    }
                });
            }
        });
        Ok(self.push(out, np || nc, Some(back)))
    }

    /// Per-row cross entropy with the positive fixed at column 0:
    /// out[i] = logsumexp(row_i) - row_i[0].
    pub fn cross_entropy_pos0(&mut self, logits: Var) -> Result<Var> {
        let (m, c) = dims2(&self.vals[logits.0])?;
        if c == 0 {
            return Err(Error::shape("cross_entropy_pos0 on zero columns"));
        }
        let mut probs = self.vals[logits.0].clone();
        let mut losses = vec![0.0f32; m];
        for i in 0..m {
            let row = probs.row_mut(i);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f64;
            for v in row.iter() {
                denom += ((v - max) as f64).exp();
            }
            let lse = max as f64 + denom.ln();
            losses[i] = (lse - row[0] as f64) as f32;
            for v in row.iter_mut() {
                *v = (((*v - max) as f64).exp() / denom) as f32;
            }
        }
        let out = Tensor::new(vec![m], losses)?;
        let nl = self.needs[logits.0];
        let back: BackFn = Box::new(move |d, _v, g| {
            if nl {
                acc_into(g, logits.0, &[m, c], |buf| {
                    for i in 0..m {
                        let di = d.data()[i];
                        axpy(&mut buf[i * c..(i + 1) * c], di, probs.row(i));
                        buf[i * c] -= di;
                    }
                });
            }
        });
        Ok(self.push(out, nl, Some(back)))
    }

    /// Binary cross entropy from logits; targets are constants in {0,1}.
    /// out[i] = softplus(z_i) - y_i * z_i.
    pub fn bce_with_logits(&mut self, z: Var, y: &[f32]) -> Result<Var> {
        let zn = self.vals[z.0].len();
        if zn != y.len() {
            return Err(Error::shape(format!(
                "bce_with_logits {} logits vs {} labels",
                zn,
                y.len()
            )));
        }
        let zv = self.vals[z.0].data();
        let mut losses = vec![0.0f32; zn];
        for i in 0..zn {
            let x = zv[i];
            let softplus = x.max(0.0) + (-x.abs()).exp().ln_1p();
            losses[i] = softplus - y[i] * x;
        }
        let out = Tensor::new(vec![zn], losses)?;
        let nz = self.needs[z.0];
        let y = y.to_vec();
        let zshape = self.vals[z.0].shape().to_vec();
        let back: BackFn = Box::new(move |d, v, g| {
            if nz {
                let zv = v[z.0].data().to_vec();
                acc_into(g, z.0, &zshape, |buf| {
                    for i in 0..zv.len() {
                        buf[i] += d.data()[i] * (stable_sigmoid(zv[i]) - y[i]);
                    }
                });
            }
        });
        Ok(self.push(out, nz, Some(back)))
    }
}

fn dims2(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::shape(format!("expected rank-2 tensor, got {s:?}"))),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: fn(f32, f32) -> f32) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "elementwise op on {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn stable_sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax over one slice.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
