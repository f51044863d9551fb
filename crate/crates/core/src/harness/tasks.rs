//! Synthetic prompts: uniform random tokens and needle-in-a-haystack
//! documents over a repetitive filler.

use std::ops::Range;

use crate::error::{bail, Result};
use crate::model::Token;
use crate::tensor::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct NeedleTask {
    pub tokens: Vec<Token>,
    /// Slots of the planted needle in `tokens`.
    pub needle_span: Range<usize>,
    /// The continuation a copying model should produce after the prompt.
    pub expected: Vec<Token>,
}

/// Filler of `len` tokens cycling through `filler_vocab`; each slot is
/// replaced by a random filler token with probability `noise`.
pub fn filler(filler_vocab: &[Token], len: usize, noise: f64, rng: &mut Rng) -> Result<Vec<Token>> {
    if filler_vocab.is_empty() {
        bail!(Parameter, "empty filler vocabulary");
    }
    if !(0.0..=1.0).contains(&noise) {
        bail!(Parameter, "noise {noise} outside [0, 1]");
    }
    let n = filler_vocab.len();
    Ok((0..len)
        .map(|i| {
            if noise > 0.0 && rng.uniform() < noise {
                filler_vocab[rng.below(n)]
            } else {
                filler_vocab[i % n]
            }
        })
        .collect())
}

/// Plants `needle` at `needle_pos` inside `total_len - query.len()` filler
/// tokens and appends `query`, which must be a proper prefix of the needle:
/// the rest of the needle is then the correct continuation.
pub fn gen_needle_task(
    filler_vocab: &[Token],
    total_len: usize,
    needle: &[Token],
    needle_pos: usize,
    query: &[Token],
    noise: f64,
    seed: u64,
) -> Result<NeedleTask> {
    if needle.is_empty() || query.is_empty() {
        bail!(Parameter, "needle and query must be non-empty");
    }
    if query.len() >= needle.len() || needle[..query.len()] != *query {
        bail!(Parameter, "query must be a proper prefix of the needle");
    }
    let body = match total_len.checked_sub(query.len()) {
        Some(b) if needle_pos + needle.len() <= b => b,
        _ => bail!(
            Parameter,
            "needle of {} at {needle_pos} plus a {}-token query overflows {total_len}",
            needle.len(),
            query.len()
        ),
    };
    let mut rng = Rng::new(seed);
    let mut tokens = filler(filler_vocab, body, noise, &mut rng)?;
    tokens[needle_pos..needle_pos + needle.len()].copy_from_slice(needle);
    tokens.extend_from_slice(query);
    Ok(NeedleTask {
        tokens,
        needle_span: needle_pos..needle_pos + needle.len(),
        expected: needle[query.len()..].to_vec(),
    })
}

/// Knobs for building a needle task over a vocabulary split into filler
/// tokens `[0, filler_vocab)` and needle tokens `[filler_vocab, vocab)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeedleParams {
    pub filler_vocab: usize,
    pub needle_len: usize,
    /// Needle start as a fraction of the filler body.
    pub depth: f64,
    pub query_len: usize,
    pub noise: f64,
}

impl Default for NeedleParams {
    fn default() -> Self {
        Self {
            filler_vocab: 16,
            needle_len: 48,
            depth: 0.5,
            query_len: 1,
            noise: 0.05,
        }
    }
}

/// Needle of distinct non-filler tokens at `depth`, queried by its first
/// `query_len` tokens.
pub fn needle_task(p: &NeedleParams, vocab: usize, total_len: usize, seed: u64) -> Result<NeedleTask> {
    if p.filler_vocab == 0 || p.filler_vocab >= vocab {
        bail!(Parameter, "filler vocabulary must leave room for needle tokens");
    }
    if p.needle_len > vocab - p.filler_vocab {
        bail!(
            Parameter,
            "needle of {} distinct tokens needs a vocabulary above {}",
            p.needle_len,
            p.filler_vocab + p.needle_len
        );
    }
    if !(0.0..=1.0).contains(&p.depth) {
        bail!(Parameter, "needle depth {} outside [0, 1]", p.depth);
    }
    let mut rng = Rng::new(seed ^ 0x6e65_6564_6c65);
    let mut pool: Vec<Token> = (p.filler_vocab..vocab).collect();
    for i in (1..pool.len()).rev() {
        pool.swap(i, rng.below(i + 1));
    }
    let needle = &pool[..p.needle_len];
    let body = total_len.saturating_sub(p.query_len);
    let room = body.saturating_sub(p.needle_len);
    let pos = ((room as f64) * p.depth).round() as usize;
    let filler_vocab: Vec<Token> = (0..p.filler_vocab).collect();
    gen_needle_task(
        &filler_vocab,
        total_len,
        needle,
        pos.min(room),
        &needle[..p.query_len.min(p.needle_len)],
        p.noise,
        seed,
    )
}

/// Uniform random prompt.
pub fn random_prompt(vocab: usize, len: usize, seed: u64) -> Vec<Token> {
    let mut rng = Rng::new(seed);
    (0..len).map(|_| rng.below(vocab)).collect()
}
