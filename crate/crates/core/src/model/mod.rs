//! Tiny decoder-only transformer: pre-norm blocks with RMS norm, rotary
//! multi-head attention and a two-layer ReLU MLP.

mod construct;
mod io;

use serde::{Deserialize, Serialize};

use crate::attention::{self, Source};
use crate::error::{bail, Result};
use crate::kvcache::{LayerKVCache, LayerRows};
use crate::tensor::{matmul_into, Tensor};

pub use construct::{copy_model, random_weights, CopyModelLayout};
pub use io::{load_model, read_model, save_model, write_model};

pub type Token = usize;

const NORM_EPS: f64 = 1e-6;

/// Architecture hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_pos: usize,
    pub rope_base: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1 {
            bail!(Parameter, "n_layers must be >= 1");
        }
        if self.vocab < 2 {
            bail!(Parameter, "vocab must be >= 2");
        }
        if self.n_heads < 1 || self.d_model != self.n_heads * self.d_head {
            bail!(
                Parameter,
                "d_model {} != n_heads {} x d_head {}",
                self.d_model,
                self.n_heads,
                self.d_head
            );
        }
        if !self.d_head.is_multiple_of(2) {
            bail!(Parameter, "d_head must be even for rotary encoding");
        }
        if self.d_ff < 1 || self.max_pos < 1 {
            bail!(Parameter, "d_ff and max_pos must be >= 1");
        }
        if !self.rope_base.is_finite() || self.rope_base <= 1.0 {
            bail!(Parameter, "rope_base must be finite and > 1");
        }
        Ok(())
    }

    pub fn new_cache(&self) -> LayerKVCache {
        LayerKVCache::new(self.n_layers, self.n_heads, self.d_head)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_norm: Tensor,
    pub w_in: Tensor,
    pub w_out: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub embed: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub unembed: Tensor,
}

impl Weights {
    /// Every tensor with its canonical name, in file order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            for (n, t) in [
                ("attn_norm", &l.attn_norm),
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("mlp_norm", &l.mlp_norm),
                ("w_in", &l.w_in),
                ("w_out", &l.w_out),
            ] {
                out.push((format!("layers.{i}.{n}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    /// Expected shape of every named tensor for `spec`.
    pub fn expected_shapes(spec: &ModelSpec) -> Vec<(String, Vec<usize>)> {
        let (d, f, v) = (spec.d_model, spec.d_ff, spec.vocab);
        let mut out = vec![("embed".to_string(), vec![v, d])];
        for i in 0..spec.n_layers {
            for (n, s) in [
                ("attn_norm", vec![d]),
                ("wq", vec![d, d]),
                ("wk", vec![d, d]),
                ("wv", vec![d, d]),
                ("wo", vec![d, d]),
                ("mlp_norm", vec![d]),
                ("w_in", vec![d, f]),
                ("w_out", vec![f, d]),
            ] {
                out.push((format!("layers.{i}.{n}"), s));
            }
        }
        out.push(("final_norm".to_string(), vec![d]));
        out.push(("unembed".to_string(), vec![d, v]));
        out
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.layers.len() != spec.n_layers {
            bail!(
                Dimension,
                "{} layers for a {}-layer spec",
                self.layers.len(),
                spec.n_layers
            );
        }
        for ((name, t), (_, shape)) in self.named_tensors().iter().zip(Self::expected_shapes(spec)) {
            if t.shape() != shape.as_slice() {
                bail!(Dimension, "{name}: shape {:?}, expected {shape:?}", t.shape());
            }
            if !t.is_finite() {
                bail!(Parameter, "{name} has non-finite entries");
            }
        }
        Ok(())
    }
}

/// How last-layer head scores are combined into one row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreReduce {
    #[default]
    Mean,
    /// Element-wise max over heads, renormalized.
    Max,
}

/// Which query rows get their last-layer attention captured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Capture {
    None,
    LastRow,
    AllRows,
}

impl From<bool> for Capture {
    fn from(b: bool) -> Self {
        if b {
            Capture::AllRows
        } else {
            Capture::None
        }
    }
}

/// Attention execution options.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AttentionConfig {
    /// Split the committed cache into blocks of this many slots and merge the
    /// partial results. The layer whose scores are captured always runs
    /// standard attention.
    pub hybrid_chunk: Option<usize>,
    pub score_reduce: ScoreReduce,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `[q × vocab]`
    pub logits: Tensor,
    /// Last-layer attention probabilities, `[captured rows × (cache_len + q)]`
    /// where `cache_len` counts committed then speculative slots.
    pub last_layer_attn: Option<Tensor>,
}

/// Spec plus weights, with precomputed rotary frequencies.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    weights: Weights,
    inv_freq: Vec<f64>,
}

impl Model {
    pub fn new(spec: ModelSpec, weights: Weights) -> Result<Self> {
        spec.validate()?;
        weights.validate(&spec)?;
        let inv_freq = rope_inv_freq(spec.d_head, spec.rope_base);
        Ok(Self {
            spec,
            weights,
            inv_freq,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn into_parts(self) -> (ModelSpec, Weights) {
        (self.spec, self.weights)
    }

    pub fn new_cache(&self) -> LayerKVCache {
        self.spec.new_cache()
    }
}

fn rope_inv_freq(d_head: usize, base: f64) -> Vec<f64> {
    (0..d_head / 2)
        .map(|m| base.powf(-((2 * m) as f64) / d_head as f64))
        .collect()
}

fn rope_rotate(x: &mut [f64], position: usize, inv_freq: &[f64]) {
    let p = position as f64;
    for (m, pair) in x.chunks_exact_mut(2).enumerate() {
        let (s, c) = (p * inv_freq[m]).sin_cos();
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * c - b * s;
        pair[1] = a * s + b * c;
    }
}

/// Rotary encoding of a vector (or each row of a matrix) at `position`:
/// adjacent pairs `(2m, 2m+1)` rotate by `position · base^(-2m/d)`.
pub fn rope_apply(x: &Tensor, position: usize, rope_base: f64) -> Result<Tensor> {
    let d = *x.shape().last().unwrap_or(&0);
    if !d.is_multiple_of(2) {
        bail!(Dimension, "rotary encoding needs an even last dimension, got {d}");
    }
    let inv = rope_inv_freq(d, rope_base);
    let mut out = x.clone();
    if d > 0 {
        for row in out.data_mut().chunks_exact_mut(d) {
            rope_rotate(row, position, &inv);
        }
    }
    Ok(out)
}

/// Draft model made of the first `keep_layers` blocks of `model`, sharing its
/// embedding, final norm and unembedding.
pub fn derive_draft(model: &Model, keep_layers: usize) -> Result<Model> {
    let n = model.spec.n_layers;
    if keep_layers < 1 || keep_layers >= n {
        bail!(Parameter, "keep_layers must be in [1, {n}), got {keep_layers}");
    }
    let spec = ModelSpec {
        n_layers: keep_layers,
        ..model.spec
    };
    let w = &model.weights;
    let weights = Weights {
        embed: w.embed.clone(),
        layers: w.layers[..keep_layers].to_vec(),
        final_norm: w.final_norm.clone(),
        unembed: w.unembed.clone(),
    };
    Model::new(spec, weights)
}

/// Where the new tokens' K/V go after a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Store {
    Committed,
    Speculative,
}

/// Visibility of the new queries over the speculative segment and the new
/// tokens themselves.
#[derive(Clone, Copy)]
enum Visibility<'a> {
    /// Each new token sees every speculative slot and earlier new tokens.
    Causal,
    /// Row `i` covers `[speculative slots ++ new tokens]`.
    Rows(&'a [Vec<bool>]),
}

/// Full-sequence forward pass on an empty cache.
pub fn prefill(
    model: &Model,
    tokens: &[Token],
    cache: &mut LayerKVCache,
    capture_scores: bool,
) -> Result<ForwardOutput> {
    prefill_with(model, tokens, cache, capture_scores.into(), AttentionConfig::default())
}

pub fn prefill_with(
    model: &Model,
    tokens: &[Token],
    cache: &mut LayerKVCache,
    capture: Capture,
    attn: AttentionConfig,
) -> Result<ForwardOutput> {
    if !cache.is_empty() || cache.speculative_len() > 0 {
        bail!(State, "prefill requires an empty cache");
    }
    if tokens.is_empty() {
        bail!(Parameter, "prefill needs at least one token");
    }
    let positions: Vec<usize> = (0..tokens.len()).collect();
    forward(
        model,
        cache,
        tokens,
        &positions,
        Visibility::Causal,
        Store::Committed,
        capture,
        attn,
    )
}

/// Incremental forward pass. Without a mask the new tokens form a causal
/// chain and are committed; with a tree mask (`mask[i][j]`: new token `i`
/// may see new token `j`) they are pushed to the speculative segment.
pub fn decode_step(
    model: &Model,
    new_tokens: &[Token],
    cache: &mut LayerKVCache,
    tree_mask: Option<&[Vec<bool>]>,
    positions: &[usize],
    capture_scores: bool,
) -> Result<ForwardOutput> {
    decode_step_with(
        model,
        new_tokens,
        cache,
        tree_mask,
        positions,
        capture_scores.into(),
        AttentionConfig::default(),
    )
}

pub fn decode_step_with(
    model: &Model,
    new_tokens: &[Token],
    cache: &mut LayerKVCache,
    tree_mask: Option<&[Vec<bool>]>,
    positions: &[usize],
    capture: Capture,
    attn: AttentionConfig,
) -> Result<ForwardOutput> {
    match tree_mask {
        None => forward(
            model,
            cache,
            new_tokens,
            positions,
            Visibility::Causal,
            Store::Committed,
            capture,
            attn,
        ),
        Some(mask) => {
            let q = new_tokens.len();
            if mask.len() != q || mask.iter().any(|r| r.len() != q) {
                bail!(Dimension, "tree mask must be {q}x{q}");
            }
            let s = cache.speculative_len();
            let rows: Vec<Vec<bool>> = mask
                .iter()
                .map(|r| std::iter::repeat_n(false, s).chain(r.iter().copied()).collect())
                .collect();
            forward(
                model,
                cache,
                new_tokens,
                positions,
                Visibility::Rows(&rows),
                Store::Speculative,
                capture,
                attn,
            )
        }
    }
}

/// Forward pass whose queries see the committed cache plus the masked part of
/// `[speculative segment ++ new tokens]`; the new K/V join the speculative
/// segment.
pub fn decode_speculative(
    model: &Model,
    new_tokens: &[Token],
    cache: &mut LayerKVCache,
    visibility: &[Vec<bool>],
    positions: &[usize],
    capture: Capture,
    attn: AttentionConfig,
) -> Result<ForwardOutput> {
    let width = cache.speculative_len() + new_tokens.len();
    if visibility.len() != new_tokens.len() || visibility.iter().any(|r| r.len() != width) {
        bail!(
            Dimension,
            "visibility must be {} rows of {width}",
            new_tokens.len()
        );
    }
    forward(
        model,
        cache,
        new_tokens,
        positions,
        Visibility::Rows(visibility),
        Store::Speculative,
        capture,
        attn,
    )
}

fn rms_norm_rows(x: &[f64], d: usize, gain: &[f64], out: &mut [f64]) {
    for (src, dst) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let ms = src.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + NORM_EPS).sqrt();
        for ((o, &v), &g) in dst.iter_mut().zip(src).zip(gain) {
            *o = v * inv * g;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn forward(
    model: &Model,
    cache: &mut LayerKVCache,
    tokens: &[Token],
    positions: &[usize],
    vis: Visibility<'_>,
    store: Store,
    capture: Capture,
    attn_cfg: AttentionConfig,
) -> Result<ForwardOutput> {
    let spec = &model.spec;
    let w = &model.weights;
    let q = tokens.len();
    if q == 0 {
        bail!(Parameter, "no new tokens");
    }
    if positions.len() != q {
        bail!(Dimension, "{q} tokens but {} positions", positions.len());
    }
    if cache.n_layers() != spec.n_layers
        || cache.n_heads() != spec.n_heads
        || cache.d_head() != spec.d_head
    {
        bail!(Dimension, "cache geometry does not match the model");
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= spec.vocab) {
        bail!(Parameter, "token {t} outside vocab {}", spec.vocab);
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= spec.max_pos) {
        bail!(Capacity, "position {p} exceeds max_pos {}", spec.max_pos);
    }
    if store == Store::Committed {
        if cache.speculative_len() > 0 {
            bail!(State, "committed forward with pending speculation");
        }
        let mut last = cache.pos_ids().last().copied();
        for &p in positions {
            if last.is_some_and(|l| p <= l) {
                bail!(Ordering, "position {p} does not follow {}", last.unwrap_or(0));
            }
            last = Some(p);
        }
    }

    let (d, h_count, dh) = (spec.d_model, spec.n_heads, spec.d_head);
    let cache_len = cache.len();
    let spec_len = cache.speculative_len();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut x = vec![0.0; q * d];
    for (row, &t) in x.chunks_exact_mut(d).zip(tokens) {
        row.copy_from_slice(w.embed.row(t));
    }
    let mut h = vec![0.0; q * d];
    let mut qm = vec![0.0; q * d];
    let mut new_rows = Vec::with_capacity(spec.n_layers);
    let mut captured: Option<Vec<f64>> = None;
    let captured_rows: Vec<usize> = match capture {
        Capture::None => vec![],
        Capture::LastRow => vec![q - 1],
        Capture::AllRows => (0..q).collect(),
    };
    let row_len = cache_len + spec_len + q;
    let mut scratch = Vec::new();

    for (li, lw) in w.layers.iter().enumerate() {
        let last_layer = li + 1 == spec.n_layers;
        rms_norm_rows(&x, d, lw.attn_norm.data(), &mut h);
        let mut km = vec![0.0; q * d];
        let mut vm = vec![0.0; q * d];
        matmul_into(&h, q, d, lw.wq.data(), d, &mut qm);
        matmul_into(&h, q, d, lw.wk.data(), d, &mut km);
        matmul_into(&h, q, d, lw.wv.data(), d, &mut vm);
        for (i, &p) in positions.iter().enumerate() {
            for hh in 0..h_count {
                let s = i * d + hh * dh;
                rope_rotate(&mut qm[s..s + dh], p, &model.inv_freq);
                rope_rotate(&mut km[s..s + dh], p, &model.inv_freq);
            }
        }

        let capture_here = last_layer && !captured_rows.is_empty();
        let mut head_probs = if capture_here {
            vec![0.0; captured_rows.len() * h_count * row_len]
        } else {
            Vec::new()
        };
        let mut attn_out = vec![0.0; q * d];
        for i in 0..q {
            let cap_idx = if capture_here {
                captured_rows.iter().position(|&r| r == i)
            } else {
                None
            };
            let (spec_mask, new_mask, new_len) = match vis {
                Visibility::Causal => (None, None, i + 1),
                Visibility::Rows(rows) => {
                    let r = &rows[i];
                    (Some(&r[..spec_len]), Some(&r[spec_len..]), q)
                }
            };
            for hh in 0..h_count {
                let off = hh * dh;
                let qv = &qm[i * d + off..i * d + off + dh];
                let sources = [
                    Source {
                        keys: cache.keys(li),
                        values: cache.values(li),
                        stride: d,
                        offset: off,
                        len: cache_len,
                        mask: None,
                    },
                    Source {
                        keys: cache.speculative_keys(li),
                        values: cache.speculative_values(li),
                        stride: d,
                        offset: off,
                        len: spec_len,
                        mask: spec_mask,
                    },
                    Source {
                        keys: &km,
                        values: &vm,
                        stride: d,
                        offset: off,
                        len: new_len,
                        mask: new_mask.map(|m| &m[..new_len]),
                    },
                ];
                let out = match (cap_idx, attn_cfg.hybrid_chunk) {
                    (Some(ci), _) => {
                        let base = (ci * h_count + hh) * row_len;
                        let probs = &mut head_probs[base..base + cache_len + spec_len + new_len];
                        attention::standard(qv, &sources, scale, &mut scratch, Some(probs))
                    }
                    (None, Some(chunk)) => {
                        attention::chunked(qv, &sources, chunk, scale, &mut scratch).finish()
                    }
                    (None, None) => attention::standard(qv, &sources, scale, &mut scratch, None),
                };
                attn_out[i * d + off..i * d + off + dh].copy_from_slice(&out);
            }
        }
        if capture_here {
            captured = Some(reduce_heads(
                &head_probs,
                captured_rows.len(),
                h_count,
                row_len,
                attn_cfg.score_reduce,
            ));
        }

        let mut proj = vec![0.0; q * d];
        matmul_into(&attn_out, q, d, lw.wo.data(), d, &mut proj);
        for (a, b) in x.iter_mut().zip(&proj) {
            *a += b;
        }

        rms_norm_rows(&x, d, lw.mlp_norm.data(), &mut h);
        let f = spec.d_ff;
        let mut hidden = vec![0.0; q * f];
        matmul_into(&h, q, d, lw.w_in.data(), f, &mut hidden);
        for v in &mut hidden {
            *v = v.max(0.0);
        }
        matmul_into(&hidden, q, f, lw.w_out.data(), d, &mut proj);
        for (a, b) in x.iter_mut().zip(&proj) {
            *a += b;
        }

        new_rows.push(LayerRows {
            keys: km,
            values: vm,
        });
    }

    rms_norm_rows(&x, d, w.final_norm.data(), &mut h);
    let v = spec.vocab;
    let mut logits = vec![0.0; q * v];
    matmul_into(&h, q, d, w.unembed.data(), v, &mut logits);
    if logits.iter().any(|l| !l.is_finite()) {
        bail!(Consistency, "non-finite logits");
    }

    match store {
        Store::Committed => cache.append(&new_rows, positions)?,
        Store::Speculative => cache.push_speculative(&new_rows, positions)?,
    }

    Ok(ForwardOutput {
        logits: Tensor::from_parts_unchecked(vec![q, v], logits),
        last_layer_attn: captured
            .map(|c| Tensor::from_parts_unchecked(vec![captured_rows.len(), row_len], c)),
    })
}

fn reduce_heads(
    probs: &[f64],
    rows: usize,
    heads: usize,
    row_len: usize,
    how: ScoreReduce,
) -> Vec<f64> {
    let mut out = vec![0.0; rows * row_len];
    for r in 0..rows {
        let dst = &mut out[r * row_len..(r + 1) * row_len];
        for hh in 0..heads {
            let src = &probs[(r * heads + hh) * row_len..(r * heads + hh + 1) * row_len];
            for (o, &p) in dst.iter_mut().zip(src) {
                match how {
                    ScoreReduce::Mean => *o += p / heads as f64,
                    ScoreReduce::Max => *o = o.max(p),
                }
            }
        }
        if how == ScoreReduce::Max {
            let s: f64 = dst.iter().sum();
            for o in dst.iter_mut() {
                *o /= s;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;
