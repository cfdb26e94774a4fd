//! Dense row-major tensors and the numeric kernels shared by the tape.
//!
//! Every reduction accumulates in `f64`; elementwise math is evaluated in
//! `f64` through `libm` and rounded once on store.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;

/// Epsilon used by every layer norm in the crate.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Real> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::ZERO; numel],
        }
    }

    pub fn filled(shape: &[usize], value: S) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Tensor::new(shape.to_vec(), values.iter().map(|&v| S::from_f64(v)).collect())
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        Tensor::from_fn(&[n, n], |i| if i / n == i % n { S::ONE } else { S::ZERO })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns of a matrix view: the last axis is the column
    /// extent and every leading axis is folded into rows.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.split_last() {
            None => (1, 1),
            Some((&cols, lead)) => (lead.iter().product(), cols),
        }
    }

    pub fn get(&self, index: &[usize]) -> S {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (&i, &extent) in index.iter().zip(&self.shape) {
            flat = flat * extent + i;
        }
        self.data[flat]
    }

    pub fn row(&self, r: usize) -> &[S] {
        let (_, cols) = self.dims2();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn cast<T: Real>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64() * v.to_f64()).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<S>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| libm::fabs(a.to_f64() - b.to_f64()))
            .fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::shape("transpose", &self.shape, &[2]));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![S::ZERO; m * n];
        transpose_into(&self.data, m, n, &mut out);
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| S::from_f64(f(v.to_f64()))).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor<S>, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("elementwise", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| S::from_f64(f(a.to_f64(), b.to_f64())))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    /// Little-endian encoding of the payload.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.numel() * S::BYTES);
        for v in &self.data {
            if S::BYTES == 4 {
                out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            } else {
                out.extend_from_slice(&v.to_f64().to_le_bytes());
            }
        }
        out
    }

    pub fn from_le_bytes(shape: &[usize], bytes: &[u8]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if bytes.len() != numel * S::BYTES {
            return Err(Error::InvalidArgument(alloc::format!(
                "payload of {} bytes does not hold {} values",
                bytes.len(),
                numel
            )));
        }
        let data = bytes
            .chunks_exact(S::BYTES)
            .map(|c| {
                if S::BYTES == 4 {
                    S::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                } else {
                    let mut b = [0u8; 8];
                    b.copy_from_slice(c);
                    S::from_f64(f64::from_le_bytes(b))
                }
            })
            .collect();
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }
}

// ---------------------------------------------------------------------------
// Scalar functions

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

const FRAC_1_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = FRAC_1_SQRT_2PI * libm::exp(-0.5 * x * x);
    cdf + x * pdf
}

/// Numerically stable binary cross-entropy on a logit.
#[inline]
pub fn bce_with_logits(logit: f64, label: u8) -> f64 {
    let y = if label == 0 { 0.0 } else { 1.0 };
    logit.max(0.0) - logit * y + libm::log1p(libm::exp(-libm::fabs(logit)))
}

// ---------------------------------------------------------------------------
// Kernels on raw row-major slices

pub(crate) fn to_f64_buf<S: Real>(src: &[S]) -> Vec<f64> {
    src.iter().map(|v| v.to_f64()).collect()
}

/// `out[m×n] = a[m×k] · b[k×n]`.
///
/// Every output element is accumulated in f64 over `k` in ascending order,
/// so results do not depend on the tiling below.
pub(crate) fn mm<S: Real>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    mm_f64(&to_f64_buf(a), &to_f64_buf(b), m, k, n, out);
}

fn mm_f64<S: Real>(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [S]) {
    const R: usize = 4;
    const C: usize = 8;
    let mut i = 0;
    while i + R <= m {
        let mut j = 0;
        while j + C <= n {
            let mut acc = [[0.0f64; C]; R];
            for kk in 0..k {
                let bv: &[f64; C] = b[kk * n + j..kk * n + j + C].try_into().unwrap();
                for (r, row) in acc.iter_mut().enumerate() {
                    let x = a[(i + r) * k + kk];
                    for t in 0..C {
                        row[t] += x * bv[t];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                for t in 0..C {
                    out[(i + r) * n + j + t] = S::from_f64(row[t]);
                }
            }
            j += C;
        }
        if j < n {
            mm_rows(a, b, i, i + R, j, k, n, out);
        }
        i += R;
    }
    if i < m {
        mm_rows(a, b, i, m, 0, k, n, out);
    }
}

/// Rows `r0..r1`, columns `c0..n` of `a · b`.
#[allow(clippy::too_many_arguments)]
fn mm_rows<S: Real>(a: &[f64], b: &[f64], r0: usize, r1: usize, c0: usize, k: usize, n: usize, out: &mut [S]) {
    let mut acc = vec![0.0f64; n - c0];
    for i in r0..r1 {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for kk in 0..k {
            let x = a[i * k + kk];
            for (s, y) in acc.iter_mut().zip(&b[kk * n + c0..(kk + 1) * n]) {
                *s += x * y;
            }
        }
        for (o, v) in out[i * n + c0..(i + 1) * n].iter_mut().zip(&acc) {
            *o = S::from_f64(*v);
        }
    }
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ`.
pub(crate) fn mm_nt<S: Real>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    let mut bt = vec![S::ZERO; k * n];
    transpose_into(b, n, k, &mut bt);
    mm(a, &bt, m, k, n, out);
}

/// `out[m×n] = a[k×m]ᵀ · b[k×n]`.
pub(crate) fn mm_tn<S: Real>(a: &[S], b: &[S], k: usize, m: usize, n: usize, out: &mut [S]) {
    let mut at = vec![S::ZERO; k * m];
    transpose_into(a, k, m, &mut at);
    mm(&at, b, m, k, n, out);
}

pub(crate) fn transpose_into<S: Copy>(src: &[S], m: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
}

/// Row-wise layer norm; returns `(mean, rstd)` per row.
pub(crate) fn layer_norm_rows<S: Real>(
    x: &[S],
    gamma: &[S],
    beta: &[S],
    d: usize,
    out: &mut [S],
) -> Vec<(f64, f64)> {
    let rows = x.len() / d;
    let mut stats = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|v| {
                let c = v.to_f64() - mean;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let rstd = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
        for c in 0..d {
            let xhat = (row[c].to_f64() - mean) * rstd;
            out[r * d + c] = S::from_f64(xhat * gamma[c].to_f64() + beta[c].to_f64());
        }
        stats.push((mean, rstd));
    }
    stats
}

pub(crate) fn softmax_rows<S: Real>(x: &[S], d: usize, out: &mut [S]) {
    for (row, orow) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| libm::exp(v.to_f64() - max)).collect();
        let total: f64 = exps.iter().sum();
        for (o, e) in orow.iter_mut().zip(exps) {
            *o = S::from_f64(e / total);
        }
    }
}

// ---------------------------------------------------------------------------
// Pure tensor operations

fn require_matrix<S: Real>(t: &Tensor<S>, op: &'static str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::shape(op, t.shape(), &[0, 0]));
    }
    Ok((t.shape[0], t.shape[1]))
}

/// Matrix product with a fixed summation order (64-bit accumulators).
pub fn matmul<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = require_matrix(a, "matmul")?;
    let (k2, n) = require_matrix(b, "matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![S::ZERO; m * n];
    mm(&a.data, &b.data, m, k, n, &mut out);
    let t = Tensor {
        shape: vec![m, n],
        data: out,
    };
    t.ensure_finite("matmul")?;
    Ok(t)
}

pub fn silu<S: Real>(x: &Tensor<S>) -> Tensor<S> {
    x.map(silu_scalar)
}

/// Exact (erf) Gaussian error linear unit.
pub fn gelu<S: Real>(x: &Tensor<S>) -> Tensor<S> {
    x.map(gelu_scalar)
}

/// Normalizes over the last axis, then applies `gamma`/`beta`.
pub fn layer_norm<S: Real>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (_, d) = x.dims2();
    if d == 0 || x.rank() == 0 {
        return Err(Error::InvalidArgument("layer_norm over an empty axis".into()));
    }
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    let mut out = vec![S::ZERO; x.numel()];
    layer_norm_rows(&x.data, &gamma.data, &beta.data, d, &mut out);
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

/// Softmax over the last axis (max-subtracted).
pub fn softmax_lastdim<S: Real>(x: &Tensor<S>) -> Tensor<S> {
    let (_, d) = x.dims2();
    let mut out = vec![S::ZERO; x.numel()];
    if d > 0 {
        softmax_rows(&x.data, d, &mut out);
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn random(shape: &[usize], seed: &mut u64) -> Tensor<f32> {
        Tensor::from_fn(shape, |_| lcg(seed) as f32)
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut s = 3;
        let b = random(&[3, 3], &mut s);
        assert_eq!(matmul(&Tensor::identity(3), &b).unwrap(), b);
        let two = Tensor::<f32>::new(vec![1, 1], vec![2.0]).unwrap();
        let three = Tensor::<f32>::new(vec![1, 1], vec![3.0]).unwrap();
        assert_eq!(matmul(&two, &three).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut s = 11;
        let a = random(&[4, 3], &mut s);
        let b = random(&[3, 5], &mut s);
        let c = matmul(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let mut acc = 0.0f64;
                for k in 0..3 {
                    acc += a.get(&[i, k]) as f64 * b.get(&[k, j]) as f64;
                }
                assert!((c.get(&[i, j]) as f64 - acc).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn transposed_kernels_agree_with_mm() {
        let mut s = 5;
        let a = random(&[4, 6], &mut s);
        let b = random(&[6, 3], &mut s);
        let reference = matmul(&a, &b).unwrap();
        let bt = b.transpose().unwrap();
        let mut out = vec![0.0f32; 12];
        mm_nt(a.data(), bt.data(), 4, 6, 3, &mut out);
        assert_eq!(out, reference.data());
        let at = a.transpose().unwrap();
        mm_tn(at.data(), b.data(), 6, 4, 3, &mut out);
        assert_eq!(out, reference.data());
    }

    #[test]
    fn silu_values() {
        let x = Tensor::<f32>::from_f64(&[3], &[0.0, 20.0, 1.0]).unwrap();
        let y = silu(&x);
        assert_eq!(y.data()[0], 0.0);
        assert!(((y.data()[1] - 20.0) / 20.0).abs() <= 1e-6);
        // 1 / (1 + e^-1)
        assert!((y.data()[2] as f64 - 0.731_058_578_630_004_9).abs() < 1e-7);
    }

    #[test]
    fn gelu_values() {
        let x = Tensor::<f32>::from_f64(&[3], &[0.0, -20.0, 1.0]).unwrap();
        let y = gelu(&x);
        assert_eq!(y.data()[0], 0.0);
        assert!(y.data()[1].abs() <= 1e-6);
        // 0.5 * (1 + erf(1/sqrt 2))
        assert!((y.data()[2] as f64 - 0.841_344_746_068_542_9).abs() < 1e-7);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::<f32>::filled(&[2, 4], 3.5);
        let y = layer_norm(&x, &Tensor::filled(&[4], 1.0), &Tensor::zeros(&[4])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_standardized_row_is_fixed_point() {
        let row = [1.0, -1.0, 1.0, -1.0];
        let x = Tensor::<f32>::from_f64(&[1, 4], &row).unwrap();
        let y = layer_norm(&x, &Tensor::filled(&[4], 1.0), &Tensor::zeros(&[4])).unwrap();
        for (a, b) in y.data().iter().zip(row) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }

    #[test]
    fn layer_norm_rejects_empty_axis() {
        let x = Tensor::<f32>::zeros(&[2, 0]);
        let g = Tensor::<f32>::zeros(&[0]);
        assert!(layer_norm(&x, &g, &g).is_err());
    }

    #[test]
    fn softmax_uniform_and_peaked() {
        let x = Tensor::<f32>::zeros(&[1, 5]);
        assert!(softmax_lastdim(&x).data().iter().all(|&v| (v - 0.2).abs() < 1e-7));
        let x = Tensor::<f32>::from_f64(&[1, 3], &[1000.0, 0.0, 0.0]).unwrap();
        let y = softmax_lastdim(&x);
        assert!((y.data()[0] - 1.0).abs() < 1e-7 && y.data()[1] < 1e-30);
    }

    #[test]
    fn bce_reference_values() {
        assert!((bce_with_logits(0.0, 1) - core::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_with_logits(50.0, 1) < 1e-6);
        // -ln(1 - sigmoid(-2)) = ln(1 + e^-2)
        assert!((bce_with_logits(-2.0, 0) - 0.126_928_011_042_972_5).abs() < 1e-15);
        assert!(bce_with_logits(1e4, 0).is_finite());
        assert!(bce_with_logits(-1e4, 1).is_finite());
    }

    #[test]
    fn byte_round_trip() {
        let mut s = 9;
        let t = random(&[3, 4], &mut s);
        let back = Tensor::<f32>::from_le_bytes(&[3, 4], &t.to_le_bytes()).unwrap();
        assert_eq!(back, t);
    }
}
