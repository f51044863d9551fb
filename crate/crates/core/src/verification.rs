//! Target-side verification: lossless accept/reject/correct rules for chains
//! and trees, the verification forward pass, hybrid prefix/tree attention,
//! and extraction of the attention row that drives retrieval.

use crate::attention::{self, PartialAttention, Source};
use crate::drafting::{flatten_tree, DraftTree};
use crate::error::{bail, Result};
use crate::kvcache::LayerKVCache;
use crate::model::{decode_step_with, AttentionConfig, Capture, ForwardOutput, Model, Token};
use crate::tensor::{categorical_from_uniform, distribution, Rng, Tensor};

/// How the drafted children of a node were proposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Proposal {
    /// Each child was sampled from the parent's draft distribution.
    Sampled,
    /// Children are fixed picks (e.g. top-k); each is a point-mass proposal.
    #[default]
    Deterministic,
}

/// Result of running an accept rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    /// Accepted tree nodes, root excluded, shallowest first.
    pub path: Vec<usize>,
    /// Correction (after a rejection) or bonus (after a full accept).
    pub token: Token,
    pub corrected: bool,
}

fn normalize(r: &mut [f64]) -> bool {
    let s: f64 = r.iter().sum();
    if s > 0.0 {
        for x in r.iter_mut() {
            *x /= s;
        }
        true
    } else {
        false
    }
}

/// `normalize(max(q - p, 0))`; falls back to `q` when the residual is empty
/// (only possible when `q == p`, where a rejection cannot happen).
pub fn residual(q: &[f64], p: &[f64]) -> Vec<f64> {
    let mut r: Vec<f64> = q.iter().zip(p).map(|(a, b)| (a - b).max(0.0)).collect();
    if normalize(&mut r) {
        r
    } else {
        q.to_vec()
    }
}

/// Chain rule: token `i` is accepted iff `u < min(1, q_i(x)/p_i(x))`; the
/// first rejection draws a correction from the residual, a full accept draws
/// a bonus from `q[k]`. `q` holds `k + 1` rows.
pub fn accept_chain(tokens: &[Token], p: &[Vec<f64>], q: &[Vec<f64>], rng: &mut Rng) -> Result<Decision> {
    accept_chain_with(tokens, p, q, &mut || rng.uniform())
}

/// [`accept_chain`] driven by an explicit stream of uniforms.
pub fn accept_chain_with(
    tokens: &[Token],
    p: &[Vec<f64>],
    q: &[Vec<f64>],
    uniform: &mut dyn FnMut() -> f64,
) -> Result<Decision> {
    let k = tokens.len();
    if p.len() != k || q.len() != k + 1 {
        bail!(Dimension, "{k} drafted tokens need {k} draft rows and {} target rows", k + 1);
    }
    for (i, &x) in tokens.iter().enumerate() {
        let px = p[i][x];
        if px <= 0.0 {
            bail!(Consistency, "drafted token {x} has zero draft probability");
        }
        let u = uniform();
        if u < (q[i][x] / px).min(1.0) {
            continue;
        }
        let r = residual(&q[i], &p[i]);
        return Ok(Decision {
            path: (1..=i).collect(),
            token: categorical_from_uniform(&r, uniform())?,
            corrected: true,
        });
    }
    Ok(Decision {
        path: (1..=k).collect(),
        token: categorical_from_uniform(&q[k], uniform())?,
        corrected: false,
    })
}

/// Tree rule. From the root, the children of the current node are tried
/// (fixed picks by descending draft probability, sampled children in draw
/// order) against the running target residual `r`
/// (initially `q` at that node). With [`Proposal::Sampled`] a child `x` is
/// accepted iff `u < min(1, r(x)/p(x))` and a rejection sets
/// `r ← normalize(max(r - p, 0))`. With [`Proposal::Deterministic`] the
/// proposal is a point mass, so acceptance is `u < r(x)` and a rejection
/// removes `x` from `r`. When every child fails the correction is drawn from
/// `r`; at a leaf the bonus is drawn from `q`.
///
/// `q[i]` is the target distribution after node `i` (root = 0).
pub fn accept_tree(tree: &DraftTree, q: &[Vec<f64>], proposal: Proposal, rng: &mut Rng) -> Result<Decision> {
    accept_tree_with(tree, q, proposal, &mut || rng.uniform())
}

/// [`accept_tree`] driven by an explicit stream of uniforms.
pub fn accept_tree_with(
    tree: &DraftTree,
    q: &[Vec<f64>],
    proposal: Proposal,
    uniform: &mut dyn FnMut() -> f64,
) -> Result<Decision> {
    if q.len() != tree.len() {
        bail!(Dimension, "{} target rows for {} tree nodes", q.len(), tree.len());
    }
    let mut cur = 0;
    let mut path = Vec::new();
    'walk: loop {
        let children = match proposal {
            // i.i.d. samples must be tried in the order they were drawn
            Proposal::Sampled => (0..tree.len()).filter(|&j| tree.nodes[j].parent == Some(cur)).collect(),
            Proposal::Deterministic => tree.children(cur),
        };
        if children.is_empty() {
            return Ok(Decision {
                path,
                token: categorical_from_uniform(&q[cur], uniform())?,
                corrected: false,
            });
        }
        let mut r = q[cur].clone();
        for c in children {
            let x = tree.nodes[c].token;
            match proposal {
                Proposal::Sampled => {
                    let Some(p) = &tree.dists[cur] else {
                        bail!(State, "node {cur} has no draft distribution");
                    };
                    if p[x] <= 0.0 {
                        bail!(Consistency, "drafted token {x} has zero draft probability");
                    }
                    let u = uniform();
                    if u < (r[x] / p[x]).min(1.0) {
                        path.push(c);
                        cur = c;
                        continue 'walk;
                    }
                    r = residual(&r, p);
                }
                Proposal::Deterministic => {
                    let u = uniform();
                    if u < r[x] {
                        path.push(c);
                        cur = c;
                        continue 'walk;
                    }
                    let keep = r.clone();
                    r[x] = 0.0;
                    if !normalize(&mut r) {
                        r = keep;
                    }
                }
            }
        }
        return Ok(Decision {
            path,
            token: categorical_from_uniform(&r, uniform())?,
            corrected: true,
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOutcome {
    pub accepted_tokens: Vec<Token>,
    pub accepted_count: usize,
    /// Accepted tree node indices, root excluded.
    pub accepted_nodes: Vec<usize>,
    pub correction_token: Option<Token>,
    pub bonus_token: Option<Token>,
    /// Target distribution used for each committed token: one row per
    /// accepted token plus the correction/bonus row.
    pub target_rows: Vec<Vec<f64>>,
    /// Raw target logits behind each row of `target_rows`.
    pub target_logits: Vec<Vec<f64>>,
    /// Last-layer attention of the deepest accepted node (the root when
    /// nothing was accepted) over the target cache, when captured.
    pub last_accepted_attn_row: Option<Vec<f64>>,
}

impl VerifyOutcome {
    /// The correction or bonus token.
    pub fn next_token(&self) -> Token {
        self.correction_token
            .or(self.bonus_token)
            .expect("exactly one of correction/bonus is set")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub temperature: f64,
    pub proposal: Proposal,
    pub attn: AttentionConfig,
    /// Capture last-layer attention rows (needed on retrieval updates).
    pub capture_scores: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            proposal: Proposal::Deterministic,
            attn: AttentionConfig::default(),
            capture_scores: false,
        }
    }
}

/// Runs the target over `[root ++ tree nodes]` in one masked pass, applies
/// the accept rule and commits the root plus the accepted path to `cache`.
/// The root (the last committed token) must not have been forwarded yet.
pub fn verify_tree(
    target: &Model,
    cache: &mut LayerKVCache,
    tree: &DraftTree,
    root_pos: usize,
    opts: &VerifyOptions,
    rng: &mut Rng,
) -> Result<VerifyOutcome> {
    let (out, q) = forward_tree(target, cache, tree, root_pos, opts)?;
    let decision = accept_tree(tree, &q, opts.proposal, rng)?;
    finish(cache, tree, &out, &q, decision)
}

/// Chain verification: `tokens` were drafted after `root` with draft
/// distributions `p`.
#[allow(clippy::too_many_arguments)]
pub fn verify_chain(
    target: &Model,
    cache: &mut LayerKVCache,
    root: Token,
    root_pos: usize,
    tokens: &[Token],
    p: &[Vec<f64>],
    opts: &VerifyOptions,
    rng: &mut Rng,
) -> Result<VerifyOutcome> {
    if p.len() != tokens.len() {
        bail!(Dimension, "{} tokens but {} draft rows", tokens.len(), p.len());
    }
    let tree = chain_tree(root, tokens, p);
    let (out, q) = forward_tree(target, cache, &tree, root_pos, opts)?;
    let decision = accept_chain(tokens, p, &q, rng)?;
    finish(cache, &tree, &out, &q, decision)
}

/// A chain as a tree, with `p[i]` stored on node `i` (the parent of the
/// `i`-th drafted token).
pub fn chain_tree(root: Token, tokens: &[Token], p: &[Vec<f64>]) -> DraftTree {
    let mut tree = DraftTree::root(root);
    for (i, (&t, pi)) in tokens.iter().zip(p).enumerate() {
        let prob = pi.get(t).copied().unwrap_or(0.0);
        let parent = &tree.nodes[i];
        let node = crate::drafting::DraftNode {
            token: t,
            parent: Some(i),
            depth: parent.depth + 1,
            path_logprob: parent.path_logprob + prob.ln(),
            prob,
        };
        tree.dists[i] = Some(pi.clone());
        tree.nodes.push(node);
        tree.dists.push(None);
    }
    tree
}

fn forward_tree(
    target: &Model,
    cache: &mut LayerKVCache,
    tree: &DraftTree,
    root_pos: usize,
    opts: &VerifyOptions,
) -> Result<(ForwardOutput, Vec<Vec<f64>>)> {
    if cache.speculative_len() > 0 {
        bail!(State, "target cache has pending speculation");
    }
    let flat = flatten_tree(tree, root_pos)?.with_root(tree.nodes[0].token, root_pos);
    let capture = if opts.capture_scores {
        Capture::AllRows
    } else {
        Capture::None
    };
    let out = decode_step_with(
        target,
        &flat.tokens,
        cache,
        Some(&flat.mask),
        &flat.positions,
        capture,
        opts.attn,
    )?;
    let q = (0..tree.len())
        .map(|i| distribution(out.logits.row(i), opts.temperature))
        .collect();
    Ok((out, q))
}

fn finish(
    cache: &mut LayerKVCache,
    tree: &DraftTree,
    out: &ForwardOutput,
    q: &[Vec<f64>],
    d: Decision,
) -> Result<VerifyOutcome> {
    let mut slots = vec![0];
    slots.extend_from_slice(&d.path);
    if let Err(e) = cache.commit_speculative(&slots) {
        cache.rollback_speculative();
        return Err(e);
    }
    let deepest = d.path.last().copied().unwrap_or(0);
    let mut target_rows: Vec<Vec<f64>> = Vec::with_capacity(d.path.len() + 1);
    target_rows.push(q[0].clone());
    target_rows.extend(d.path.iter().map(|&i| q[i].clone()));
    let target_logits = std::iter::once(0)
        .chain(d.path.iter().copied())
        .map(|i| out.logits.row(i).to_vec())
        .collect();
    let last_accepted_attn_row = out
        .last_layer_attn
        .as_ref()
        .map(|a| a.row(deepest).to_vec());
    Ok(VerifyOutcome {
        accepted_tokens: d.path.iter().map(|&i| tree.nodes[i].token).collect(),
        accepted_count: d.path.len(),
        accepted_nodes: d.path,
        correction_token: d.corrected.then_some(d.token),
        bonus_token: (!d.corrected).then_some(d.token),
        target_rows,
        target_logits,
        last_accepted_attn_row,
    })
}

/// Restricts an attention row to the first `prefix_len` slots and
/// renormalizes. An all-zero slice (full underflow) becomes uniform.
pub fn prefix_scores(row: &[f64], prefix_len: usize) -> Result<Vec<f64>> {
    if prefix_len == 0 || prefix_len > row.len() {
        bail!(Dimension, "prefix of {prefix_len} slots in a row of {}", row.len());
    }
    let mut s = row[..prefix_len].to_vec();
    if !normalize(&mut s) {
        s.fill(1.0 / prefix_len as f64);
    }
    Ok(s)
}

/// Score vector over the prefix from a verification forward pass: the row of
/// the deepest accepted node (root row when `accepted_path` is empty).
pub fn extract_scores(out: &ForwardOutput, accepted_path: &[usize], prefix_len: usize) -> Result<Vec<f64>> {
    let Some(attn) = &out.last_layer_attn else {
        bail!(State, "attention scores were not captured");
    };
    let row = accepted_path.last().copied().unwrap_or(0);
    if row >= attn.rows() {
        bail!(Dimension, "row {row} not captured");
    }
    prefix_scores(attn.row(row), prefix_len)
}

/// Same as [`extract_scores`] on an outcome's stored row.
pub fn outcome_scores(outcome: &VerifyOutcome, prefix_len: usize) -> Result<Vec<f64>> {
    let Some(row) = &outcome.last_accepted_attn_row else {
        bail!(State, "attention scores were not captured");
    };
    prefix_scores(row, prefix_len)
}

/// Output of [`hybrid_attention`] for each query row.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridOutput {
    /// `[q × d]`
    pub output: Tensor,
    /// Log of each row's softmax denominator; `exp(score_j - lse)` recovers
    /// the merged probability of slot `j`.
    pub log_normalizer: Vec<f64>,
}

fn check_kv(name: &str, k: &Tensor, v: &Tensor, d: usize) -> Result<usize> {
    let (n, kd) = k.dims2()?;
    let (vn, vd) = v.dims2()?;
    if kd != d || vd != d || vn != n {
        bail!(Dimension, "{name} keys {:?} / values {:?} do not match width {d}", k.shape(), v.shape());
    }
    Ok(n)
}

/// Single-head two-phase attention. Every query sees the whole prefix,
/// reduced chunk by chunk (`chunk_sizes` must sum to the prefix length), and
/// the tree slots allowed by `mask[i]`. Partial results are merged with the
/// online-softmax rule.
pub fn hybrid_attention(
    queries: &Tensor,
    prefix_keys: &Tensor,
    prefix_values: &Tensor,
    chunk_sizes: &[usize],
    tree_keys: &Tensor,
    tree_values: &Tensor,
    mask: &[Vec<bool>],
) -> Result<HybridOutput> {
    let (q, d) = queries.dims2()?;
    let n = check_kv("prefix", prefix_keys, prefix_values, d)?;
    let t = check_kv("tree", tree_keys, tree_values, d)?;
    if chunk_sizes.contains(&0) || chunk_sizes.iter().sum::<usize>() != n {
        bail!(Parameter, "chunk sizes must be >= 1 and sum to {n}");
    }
    if mask.len() != q || mask.iter().any(|r| r.len() != t) {
        bail!(Dimension, "mask must be {q}x{t}");
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut scratch = Vec::new();
    let mut out = Vec::with_capacity(q * d);
    let mut lse = Vec::with_capacity(q);
    for (i, row) in mask.iter().enumerate() {
        let qv = queries.row(i);
        let mut acc = PartialAttention::empty(d);
        let mut start = 0;
        for &c in chunk_sizes {
            let src = Source {
                keys: &prefix_keys.data()[start * d..(start + c) * d],
                values: &prefix_values.data()[start * d..(start + c) * d],
                stride: d,
                offset: 0,
                len: c,
                mask: None,
            };
            acc.merge(&attention::partial(qv, &src, scale, &mut scratch));
            start += c;
        }
        let tree_src = Source {
            keys: tree_keys.data(),
            values: tree_values.data(),
            stride: d,
            offset: 0,
            len: t,
            mask: Some(row),
        };
        acc.merge(&attention::partial(qv, &tree_src, scale, &mut scratch));
        if acc.is_empty() {
            bail!(Parameter, "query row {i} sees no key");
        }
        out.extend(acc.finish());
        lse.push(acc.log_normalizer());
    }
    Ok(HybridOutput {
        output: Tensor::new(vec![q, d], out)?,
        log_normalizer: lse,
    })
}

/// Reference single-head attention over `[prefix ++ tree]` in one softmax,
/// also returning the probability rows.
pub fn monolithic_attention(
    queries: &Tensor,
    prefix_keys: &Tensor,
    prefix_values: &Tensor,
    tree_keys: &Tensor,
    tree_values: &Tensor,
    mask: &[Vec<bool>],
) -> Result<(Tensor, Tensor)> {
    let (q, d) = queries.dims2()?;
    let n = check_kv("prefix", prefix_keys, prefix_values, d)?;
    let t = check_kv("tree", tree_keys, tree_values, d)?;
    if mask.len() != q || mask.iter().any(|r| r.len() != t) {
        bail!(Dimension, "mask must be {q}x{t}");
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut scratch = Vec::new();
    let mut out = Vec::with_capacity(q * d);
    let mut probs = vec![0.0; q * (n + t)];
    for (i, row) in mask.iter().enumerate() {
        if n == 0 && !row.iter().any(|&b| b) {
            bail!(Parameter, "query row {i} sees no key");
        }
        let sources = [
            Source {
                keys: prefix_keys.data(),
                values: prefix_values.data(),
                stride: d,
                offset: 0,
                len: n,
                mask: None,
            },
            Source {
                keys: tree_keys.data(),
                values: tree_values.data(),
                stride: d,
                offset: 0,
                len: t,
                mask: Some(row),
            },
        ];
        let p = &mut probs[i * (n + t)..(i + 1) * (n + t)];
        out.extend(attention::standard(queries.row(i), &sources, scale, &mut scratch, Some(p)));
    }
    Ok((Tensor::new(vec![q, d], out)?, Tensor::new(vec![q, n + t], probs)?))
}
