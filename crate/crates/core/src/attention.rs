//! Single-query attention kernels.
//!
//! Keys and values live in token-major buffers where head `h` of slot `j`
//! starts at `j * stride + offset`. A [`Source`] describes one such buffer and
//! which of its slots a query may see.

/// One block of keys/values visible to a query.
#[derive(Clone, Copy)]
pub(crate) struct Source<'a> {
    pub keys: &'a [f64],
    pub values: &'a [f64],
    pub stride: usize,
    pub offset: usize,
    /// Slots `[0, len)` are candidates.
    pub len: usize,
    /// Optional per-slot visibility over the candidates.
    pub mask: Option<&'a [bool]>,
}

impl Source<'_> {
    #[inline]
    fn visible(&self, j: usize) -> bool {
        self.mask.is_none_or(|m| m[j])
    }

    #[inline]
    fn key(&self, j: usize, d: usize) -> &[f64] {
        let s = j * self.stride + self.offset;
        &self.keys[s..s + d]
    }

    #[inline]
    fn value(&self, j: usize, d: usize) -> &[f64] {
        let s = j * self.stride + self.offset;
        &self.values[s..s + d]
    }

    fn slice(&self, start: usize, end: usize) -> Source<'_> {
        let s = start * self.stride;
        let e = (end * self.stride).min(self.keys.len());
        Source {
            keys: &self.keys[s..e],
            values: &self.values[s..e],
            stride: self.stride,
            offset: self.offset,
            len: end - start,
            mask: self.mask.map(|m| &m[start..end]),
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Running softmax statistics for part of a row: max logit, denominator
/// relative to that max, and the unnormalized weighted value sum.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialAttention {
    pub max: f64,
    pub denom: f64,
    pub acc: Vec<f64>,
}

impl PartialAttention {
    pub fn empty(d: usize) -> Self {
        Self {
            max: f64::NEG_INFINITY,
            denom: 0.0,
            acc: vec![0.0; d],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.denom == 0.0
    }

    /// Online-softmax combination of two partial results.
    pub fn merge(&mut self, other: &PartialAttention) {
        if other.is_empty() {
            return;
        }
        if self.is_empty() {
            self.clone_from(other);
            return;
        }
        let m = self.max.max(other.max);
        let a = (self.max - m).exp();
        let b = (other.max - m).exp();
        self.denom = self.denom * a + other.denom * b;
        for (x, y) in self.acc.iter_mut().zip(&other.acc) {
            *x = *x * a + *y * b;
        }
        self.max = m;
    }

    pub fn finish(&self) -> Vec<f64> {
        self.acc.iter().map(|x| x / self.denom).collect()
    }

    /// Natural log of the full softmax denominator.
    pub fn log_normalizer(&self) -> f64 {
        self.max + self.denom.ln()
    }
}

/// Attention of `q` over one source, as a partial result.
pub(crate) fn partial(q: &[f64], src: &Source<'_>, scale: f64, scratch: &mut Vec<f64>) -> PartialAttention {
    let d = q.len();
    scratch.clear();
    let mut max = f64::NEG_INFINITY;
    for j in 0..src.len {
        if src.visible(j) {
            let s = dot(q, src.key(j, d)) * scale;
            max = max.max(s);
            scratch.push(s);
        } else {
            scratch.push(f64::NEG_INFINITY);
        }
    }
    let mut out = PartialAttention::empty(d);
    if max == f64::NEG_INFINITY {
        return out;
    }
    for (j, &s) in scratch.iter().enumerate() {
        if s == f64::NEG_INFINITY {
            continue;
        }
        let w = (s - max).exp();
        out.denom += w;
        for (a, v) in out.acc.iter_mut().zip(src.value(j, d)) {
            *a += w * v;
        }
    }
    out.max = max;
    out
}

/// Standard attention over the concatenation of `sources`. When `probs` is
/// given it receives the softmax weight of every candidate slot, in source
/// order, with exact zeros for invisible slots.
pub(crate) fn standard(
    q: &[f64],
    sources: &[Source<'_>],
    scale: f64,
    scratch: &mut Vec<f64>,
    probs: Option<&mut [f64]>,
) -> Vec<f64> {
    let d = q.len();
    scratch.clear();
    let mut max = f64::NEG_INFINITY;
    for src in sources {
        for j in 0..src.len {
            if src.visible(j) {
                let s = dot(q, src.key(j, d)) * scale;
                max = max.max(s);
                scratch.push(s);
            } else {
                scratch.push(f64::NEG_INFINITY);
            }
        }
    }
    let mut denom = 0.0;
    for s in scratch.iter_mut() {
        *s = if *s == f64::NEG_INFINITY {
            0.0
        } else {
            (*s - max).exp()
        };
        denom += *s;
    }
    let mut out = vec![0.0; d];
    let mut idx = 0;
    for src in sources {
        for j in 0..src.len {
            let w = scratch[idx];
            idx += 1;
            if w == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(src.value(j, d)) {
                *o += w * v;
            }
        }
    }
    for o in &mut out {
        *o /= denom;
    }
    if let Some(p) = probs {
        for (dst, w) in p.iter_mut().zip(scratch.iter()) {
            *dst = w / denom;
        }
    }
    out
}

/// Chunked attention: the first source is split into blocks of `chunk`
/// slots, every block and every remaining source is reduced to a partial
/// result, and the partials are merged left to right.
pub(crate) fn chunked(
    q: &[f64],
    sources: &[Source<'_>],
    chunk: usize,
    scale: f64,
    scratch: &mut Vec<f64>,
) -> PartialAttention {
    let d = q.len();
    let mut total = PartialAttention::empty(d);
    let Some((first, rest)) = sources.split_first() else {
        return total;
    };
    let chunk = chunk.max(1);
    let mut start = 0;
    while start < first.len {
        let end = (start + chunk).min(first.len);
        total.merge(&partial(q, &first.slice(start, end), scale, scratch));
        start = end;
    }
    for src in rest {
        total.merge(&partial(q, src, scale, scratch));
    }
    total
}
