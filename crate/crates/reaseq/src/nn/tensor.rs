//! Dense row-major f32 tensors and the handful of kernels the tape is built
//! on. Rank 1 and rank 2 cover everything in this crate.
//!
//! Reductions use fixed-order lane accumulators: fast enough to train the
//! desk presets on one core, and bit-for-bit deterministic across runs.

use crate::error::{Error, Result};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, v: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            if r.len() != n {
                return Err(Error::shape("ragged rows".to_string()));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![m, n], data)
    }

    /// Uniform init on (-limit, limit).
    pub fn rand_uniform(shape: Vec<usize>, limit: f32, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Row count; rank-1 tensors count as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on rank-{} tensor", self.shape.len()),
        }
    }

    /// Column count; the row width for rank-1 and rank-2 tensors.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.cols();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols() + j]
    }

    /// Reinterprets as [rows, cols] without moving data.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f32) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn ensure_finite(&self, ctx: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::data(format!("non-finite value in {ctx}")))
        }
    }

    /// A · B for 2-D operands.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2(self)?;
        let (k2, n) = dims2(other)?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = Tensor::zeros(vec![m, n]);
        matmul_into(out.data_mut(), &self.data, &other.data, m, k, n);
        Ok(out)
    }
}

fn dims2(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::shape(format!("expected rank-2 tensor, got {s:?}"))),
    }
}

/// c += s * b, elementwise over rows. The compiler vectorizes this form.
#[inline]
pub fn axpy(c: &mut [f32], s: f32, b: &[f32]) {
    debug_assert_eq!(c.len(), b.len());
    for (ci, bi) in c.iter_mut().zip(b) {
        *ci += s * bi;
    }
}

/// Dot product with eight fixed-order lanes. The lane split trades strict
/// left-to-right summation for SIMD while staying deterministic.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f32; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (ai, bi) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for l in 0..8 {
            lanes[l] += ai[l] * bi[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    let folded = ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5]))
        + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]));
    folded + tail
}

/// C[m,n] += A[m,k] · B[k,n], row-major, ikj loop order.
pub fn matmul_into(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aval) in arow.iter().enumerate() {
            if aval != 0.0 {
                axpy(crow, aval, &b[p * n..(p + 1) * n]);
            }
        }
    }
}

/// C[m,n] += A[m,k] · B[n,k]ᵀ (B given row-major, used untransposed in memory).
pub fn matmul_nt_into(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// C[k,n] += A[m,k]ᵀ · B[m,n]; accumulated as a sum of row outer products.
pub fn matmul_tn_into(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for r in 0..m {
        let arow = &a[r * k..(r + 1) * k];
        let brow = &b[r * n..(r + 1) * n];
        for (p, &aval) in arow.iter().enumerate() {
            if aval != 0.0 {
                axpy(&mut c[p * n..(p + 1) * n], aval, brow);
            }
        }
    }
}

/// Cosine similarity; zero whenever either vector has norm below `eps`.
pub fn cosine(a: &[f32], b: &[f32], eps: f32) -> f32 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na < eps || nb < eps {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Normalizes a vector in place; leaves all-zero vectors untouched.
/// Tanh-approximation gelu; forward passes outside the tape must match the
/// tape's activation bit for bit.
pub fn gelu_scalar(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    const A3: f32 = 0.044715;
    let u = C * (x + A3 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn l2_normalize(v: &mut [f32], eps: f32) {
    let norm = dot(v, v).sqrt();
    if norm > eps {
        for x in v {
            *x /= norm;
        }
    }
}
