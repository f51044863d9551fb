//! Run metrics: the analytic speedup model, natural divergence, entropy
//! bucketed acceptance and needle scores.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::entropy;

/// Inputs of the speculative-decoding latency model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedupInputs {
    /// Average committed tokens per draft/verify iteration.
    pub tau: f64,
    /// Draft forward passes per iteration.
    pub d: f64,
    /// Draft per-token latency.
    pub t_d: f64,
    /// Target per-token latency.
    pub t_t: f64,
    /// Verification latency.
    pub t_v: f64,
    /// Input length the latencies were measured at (informational).
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Speedup {
    /// Average speculative per-token latency over target per-token latency.
    pub ratio: f64,
    pub speedup: f64,
}

/// `ratio = (d·T_d/T_t + T_v/T_t) / τ`, `speedup = 1 / ratio`.
pub fn speedup_model(i: &SpeedupInputs) -> Result<Speedup> {
    for (name, v) in [("T_d", i.t_d), ("T_t", i.t_t), ("T_v", i.t_v)] {
        if !v.is_finite() || v <= 0.0 {
            bail!(Parameter, "{name} must be a positive latency, got {v}");
        }
    }
    if !i.tau.is_finite() || i.tau < 1.0 {
        bail!(Parameter, "tau must be >= 1, got {}", i.tau);
    }
    if !i.d.is_finite() || i.d < 1.0 {
        bail!(Parameter, "d must be >= 1, got {}", i.d);
    }
    let ratio = (i.d * i.t_d / i.t_t + i.t_v / i.t_t) / i.tau;
    Ok(Speedup {
        ratio,
        speedup: 1.0 / ratio,
    })
}

/// `1 - Σ min(p_i, q_i)`.
pub fn natural_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        bail!(Dimension, "distributions of length {} and {}", p.len(), q.len());
    }
    let overlap: f64 = p.iter().zip(q).map(|(a, b)| a.min(*b)).sum();
    Ok((1.0 - overlap).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyBuckets {
    /// Acceptance rate among high-entropy ("hard") positions; `None` when
    /// the bucket is empty.
    pub hard: Option<f64>,
    pub easy: Option<f64>,
    pub threshold: f64,
    pub hard_count: usize,
    pub easy_count: usize,
}

/// Entropy threshold at quantile `q` of `values`: the sorted value at index
/// `min(ceil(q·n), n-1)`.
pub fn quantile_threshold(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        bail!(Parameter, "quantile of an empty sample");
    }
    if !(0.0..=1.0).contains(&q) {
        bail!(Parameter, "quantile {q} outside [0, 1]");
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let idx = ((q * n as f64).ceil() as usize).min(n - 1);
    Ok(s[idx])
}

/// Splits positions by the entropy of their target distribution: entropy at
/// or above the `hard_quantile` threshold is "hard" (so ties at the
/// threshold are hard), the rest "easy"; returns each bucket's acceptance
/// rate. A zero-entropy (deterministic) position is always easy. Requires at
/// least 10 samples.
pub fn entropy_buckets(dists: &[Vec<f64>], accepted: &[bool], hard_quantile: f64) -> Result<EntropyBuckets> {
    if dists.is_empty() {
        bail!(Parameter, "no samples");
    }
    if dists.len() != accepted.len() {
        bail!(Dimension, "{} distributions but {} flags", dists.len(), accepted.len());
    }
    if dists.len() < 10 {
        bail!(Parameter, "need at least 10 samples, got {}", dists.len());
    }
    let h: Vec<f64> = dists.iter().map(|p| entropy(p)).collect();
    let threshold = quantile_threshold(&h, hard_quantile)?;
    let (mut hn, mut ha, mut en, mut ea) = (0usize, 0usize, 0usize, 0usize);
    for (&e, &a) in h.iter().zip(accepted) {
        if e >= threshold && e > 0.0 {
            hn += 1;
            ha += a as usize;
        } else {
            en += 1;
            ea += a as usize;
        }
    }
    let rate = |a: usize, n: usize| (n > 0).then(|| a as f64 / n as f64);
    Ok(EntropyBuckets {
        hard: rate(ha, hn),
        easy: rate(ea, en),
        threshold,
        hard_count: hn,
        easy_count: en,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeedleMetrics {
    pub accuracy: f64,
    pub ppl: f64,
    pub tokens: usize,
}

/// Needle scores over the committed tokens of the needle span: accuracy is
/// the fraction where the draft's proposal matched the committed token;
/// perplexity is `exp(mean(-ln p_draft(committed)))`. `None` when no needle
/// token was generated.
pub fn needle_metrics(proposals: &[usize], committed: &[usize], draft_probs: &[f64]) -> Result<Option<NeedleMetrics>> {
    if proposals.len() != committed.len() || draft_probs.len() != committed.len() {
        bail!(Dimension, "needle metric inputs differ in length");
    }
    if committed.is_empty() {
        return Ok(None);
    }
    let n = committed.len() as f64;
    let hits = proposals.iter().zip(committed).filter(|(a, b)| a == b).count();
    let nll: f64 = draft_probs.iter().map(|p| -p.ln()).sum::<f64>() / n;
    Ok(Some(NeedleMetrics {
        accuracy: hits as f64 / n,
        ppl: nll.exp(),
        tokens: committed.len(),
    }))
}
