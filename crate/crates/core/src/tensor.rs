//! Dense row-major `f64` tensors plus the sampling primitives shared by the
//! model, drafting and verification code.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};

/// Dense row-major array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            bail!(
                Dimension,
                "shape {:?} holds {} elements, got {}",
                shape,
                expected,
                data.len()
            );
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            bail!(Parameter, "non-finite element at flat index {i}");
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            bail!(Dimension, "ragged rows");
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => bail!(Dimension, "expected a matrix, got shape {s:?}"),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            bail!(Dimension, "{:?} vs {:?}", self.shape, other.shape);
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Matrix product with a fixed left-to-right summation order over the inner
/// dimension.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        bail!(Dimension, "matmul inner dimensions {k} and {k2}");
    }
    let mut out = vec![0.0; m * n];
    matmul_into(&a.data, m, k, &b.data, n, &mut out);
    Ok(Tensor::from_parts_unchecked(vec![m, n], out))
}

/// `out[m×n] = a[m×k] · b[k×n]`; for each output element the terms are added
/// in increasing `k` order.
pub(crate) fn matmul_into(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Row-wise softmax of `x / temperature` with per-row max subtraction.
pub fn softmax_rows(x: &Tensor, temperature: f64) -> Result<Tensor> {
    if !temperature.is_finite() || temperature <= 0.0 {
        bail!(Parameter, "temperature must be positive, got {temperature}");
    }
    let (m, n) = x.dims2()?;
    let mut out = x.data.clone();
    for i in 0..m {
        softmax_in_place(&mut out[i * n..(i + 1) * n], temperature);
    }
    Ok(Tensor::from_parts_unchecked(vec![m, n], out))
}

pub(crate) fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Index of the largest element; ties go to the lowest index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Sampling distribution for a logit row. Temperature 0 means greedy: a
/// one-hot vector at the argmax.
pub fn distribution(logits: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 0.0 {
        let mut p = vec![0.0; logits.len()];
        p[argmax(logits)] = 1.0;
        p
    } else {
        let mut p = logits.to_vec();
        softmax_in_place(&mut p, temperature);
        p
    }
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.ln())
        .sum()
}

/// Seeded, platform-independent random stream (ChaCha8).
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.uniform() * n as f64) as usize % n
    }

    /// Standard normal draw (Box-Muller, one value per call).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Independent child stream, for handing sub-tasks their own seed.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }
}

/// Draws an index from `p` by inverse CDF on a single uniform.
pub fn sample_categorical(p: &[f64], rng: &mut Rng) -> Result<usize> {
    categorical_from_uniform(p, rng.uniform())
}

/// Inverse-CDF lookup of `u ∈ [0, 1)` in a validated distribution.
pub fn categorical_from_uniform(p: &[f64], u: f64) -> Result<usize> {
    if p.is_empty() {
        bail!(Parameter, "empty distribution");
    }
    if let Some(i) = p.iter().position(|&x| x < 0.0 || !x.is_finite()) {
        bail!(Parameter, "invalid probability {} at index {i}", p[i]);
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        bail!(Parameter, "probabilities sum to {total}");
    }
    Ok(inverse_cdf(p, u))
}

pub(crate) fn inverse_cdf(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    // Rounding left `u` above the final partial sum: take the last support point.
    p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1)
}
