//! The draft/verify loop: shared prefill, per-step draft-cache maintenance
//! (streaming eviction or retrieval), drafting, verification and the
//! bookkeeping the reports are built from.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::drafting::{chain_parts, draft_chain, draft_tree, Drafted, ModelSource, TreeBudget};
use crate::error::{bail, Error, Result};
use crate::kvcache::{CachePolicy, LayerKVCache};
use crate::model::{
    copy_model, decode_step, decode_step_with, derive_draft, load_model, prefill, prefill_with, random_weights,
    AttentionConfig, Capture, CopyModelLayout, Model, ModelSpec, ScoreReduce, Token,
};
use crate::retrieval::RetrievalState;
use crate::tensor::{argmax, distribution, Rng};
use crate::verification::{outcome_scores, prefix_scores, verify_chain, verify_tree, Proposal, VerifyOptions};

use super::config::{DraftingKind, ExperimentConfig, TaskKind};
use super::tasks::{needle_task, random_prompt, NeedleTask};

/// How candidates are proposed each step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Drafting {
    /// `len` tokens sampled one after another from the draft.
    Chain { len: usize },
    /// Dynamic top-k tree under a node/depth budget.
    Tree(TreeBudget),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineOptions {
    pub policy: CachePolicy,
    pub drafting: Drafting,
    pub temperature: f64,
    pub gen_tokens: usize,
    pub seed: u64,
    /// Chunk length of the hybrid prefix attention in verification (`None`
    /// uses plain attention).
    pub hybrid_chunk: Option<usize>,
    /// Hybrid attention only kicks in once the target cache is this long.
    pub hybrid_min_len: usize,
    pub score_reduce: ScoreReduce,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            policy: CachePolicy::Full,
            drafting: Drafting::Tree(TreeBudget::default()),
            temperature: 0.0,
            gen_tokens: 64,
            seed: 0,
            hybrid_chunk: None,
            hybrid_min_len: 0,
            score_reduce: ScoreReduce::Mean,
        }
    }
}

impl EngineOptions {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            policy: cfg.cache_policy(),
            drafting: match cfg.drafting {
                DraftingKind::Chain => Drafting::Chain { len: cfg.chain_len },
                DraftingKind::Tree => Drafting::Tree(cfg.tree_budget()),
            },
            temperature: cfg.temperature,
            gen_tokens: cfg.gen_tokens,
            seed: cfg.seed,
            hybrid_chunk: cfg.hybrid_attention.then_some(cfg.hybrid_chunk),
            hybrid_min_len: cfg.hybrid_min_len,
            score_reduce: cfg.score_heads.into(),
        }
    }
}

/// Temperature used for reported distributions: the sampling temperature,
/// or 1 under greedy decoding (where the sampling distributions are one-hot).
pub fn metric_temperature(temperature: f64) -> f64 {
    if temperature > 0.0 {
        temperature
    } else {
        1.0
    }
}

/// Both caches after prefilling every prompt token but the last, which
/// becomes the root of the first step. Shared across policies so a
/// comparison pays for the long prefill once.
#[derive(Debug, Clone)]
pub struct Prefilled {
    pub prompt: Vec<Token>,
    pub target_cache: LayerKVCache,
    pub draft_cache: LayerKVCache,
    /// Target last-layer attention of the final prefilled token over the
    /// prefix; seeds the first retrieval update.
    pub scores: Vec<f64>,
    pub prefill_s: f64,
}

pub fn prefill_pair(target: &Model, draft: &Model, prompt: &[Token], score_reduce: ScoreReduce) -> Result<Prefilled> {
    if prompt.len() < 2 {
        bail!(Parameter, "prompt needs at least 2 tokens, got {}", prompt.len());
    }
    if target.spec().vocab != draft.spec().vocab {
        bail!(
            Parameter,
            "target vocabulary {} differs from draft vocabulary {}",
            target.spec().vocab,
            draft.spec().vocab
        );
    }
    let t0 = Instant::now();
    let prefix = &prompt[..prompt.len() - 1];
    let mut target_cache = target.new_cache();
    let attn = AttentionConfig {
        hybrid_chunk: None,
        score_reduce,
    };
    let out = prefill_with(target, prefix, &mut target_cache, Capture::LastRow, attn)?;
    let Some(row) = out.last_layer_attn else {
        bail!(State, "prefill did not capture attention");
    };
    let scores = prefix_scores(row.row(0), prefix.len())?;
    target_cache.mark_prefix_end();
    let mut draft_cache = draft.new_cache();
    prefill_with(draft, prefix, &mut draft_cache, Capture::None, AttentionConfig::default())?;
    draft_cache.mark_prefix_end();
    Ok(Prefilled {
        prompt: prompt.to_vec(),
        target_cache,
        draft_cache,
        scores,
        prefill_s: t0.elapsed().as_secs_f64(),
    })
}

/// One draft/verify iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    /// Speculated tokens sent to verification.
    pub drafted: usize,
    pub accepted: usize,
    /// Whether the step ended with a correction (vs a bonus token).
    pub corrected: bool,
    /// Verified batch size: root plus speculated nodes.
    pub tree_nodes: usize,
    pub retrieval_update: bool,
    /// Input-prefix slots left in the draft cache after the cache update.
    pub draft_prefix_len: usize,
    pub draft_ms: f64,
    pub verify_ms: f64,
    pub update_ms: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub draft: f64,
    pub verify: f64,
    pub cache_update: f64,
    pub prefill: f64,
}

/// A positional slot where the draft had proposed a candidate, with whether
/// it was accepted (indexed by generated-token offset).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub index: usize,
    pub accepted: bool,
}

/// Everything one speculative run produced.
#[derive(Debug, Clone)]
pub struct Generation {
    /// Every committed generated token, including overshoot past
    /// `gen_tokens` from the final step.
    pub tokens: Vec<Token>,
    pub steps: Vec<StepReport>,
    pub gen_tokens: usize,
    pub temperature: f64,
    /// Draft logits predicting each of the first `gen_tokens` tokens.
    pub draft_logits: Vec<Vec<f64>>,
    /// Target logits predicting each of the first `gen_tokens` tokens.
    pub target_logits: Vec<Vec<f64>>,
    pub candidates: Vec<Candidate>,
    pub phase: PhaseTimes,
    pub wall_s: f64,
}

impl Generation {
    /// The first `gen_tokens` generated tokens.
    pub fn output(&self) -> &[Token] {
        &self.tokens[..self.gen_tokens.min(self.tokens.len())]
    }

    /// Average committed tokens per step.
    pub fn tau(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| (s.accepted + 1) as f64).sum::<f64>() / self.steps.len() as f64
    }
}

/// Checks that `prompt_len + gen_tokens` positions fit both models.
pub fn check_capacity(target: &Model, draft: &Model, prompt_len: usize, gen_tokens: usize) -> Result<()> {
    let limit = target.spec().max_pos.min(draft.spec().max_pos);
    if prompt_len + gen_tokens > limit {
        bail!(
            Capacity,
            "prompt of {prompt_len} plus {gen_tokens} generated tokens exceeds max_pos {limit}"
        );
    }
    Ok(())
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Runs speculative decoding from a shared prefill until `gen_tokens` tokens
/// are committed.
pub fn speculative_generate(target: &Model, draft: &Model, pre: &Prefilled, opts: &EngineOptions) -> Result<Generation> {
    opts.policy.validate()?;
    if let Drafting::Tree(b) = &opts.drafting {
        b.validate()?;
    }
    if opts.gen_tokens < 1 {
        bail!(Parameter, "gen_tokens must be >= 1");
    }
    let n = pre.prompt.len();
    check_capacity(target, draft, n, opts.gen_tokens)?;
    let max_pos = target.spec().max_pos.min(draft.spec().max_pos);
    let loop_start = Instant::now();

    let mut tcache = pre.target_cache.clone();
    let mut dcache = pre.draft_cache.clone();
    let mut rng = Rng::new(opts.seed);
    let mut retrieval = match opts.policy {
        CachePolicy::Retrieval {
            chunk_size,
            top_k,
            frequency,
            sink,
        } => Some(RetrievalState::new(chunk_size, top_k, frequency)?.with_sink(sink)),
        _ => None,
    };
    let prefix_positions = n - 1;
    let mut pending_scores = Some(pre.scores.clone());

    let t_metric = metric_temperature(opts.temperature);
    let target_len = n + opts.gen_tokens;
    let mut seq = pre.prompt.clone();
    // seq[..draft_done] has K/V in the draft cache (or was evicted from it)
    let mut draft_done = n - 1;
    // logits predicting seq[j], for j in n..target_len
    let mut draft_logits: Vec<Option<Vec<f64>>> = vec![None; opts.gen_tokens];
    let mut target_logits: Vec<Option<Vec<f64>>> = vec![None; opts.gen_tokens];
    let mut candidates = Vec::new();
    let mut steps = Vec::new();
    let mut phase = PhaseTimes {
        prefill: pre.prefill_s,
        ..PhaseTimes::default()
    };

    while seq.len() < target_len {
        // draft-cache maintenance
        let t = Instant::now();
        let mut updated = false;
        match opts.policy {
            CachePolicy::Full => {}
            CachePolicy::Streaming { sink, recent } => dcache.evict_streaming(sink, recent)?,
            CachePolicy::Retrieval { .. } => {
                let st = retrieval.as_mut().expect("retrieval state");
                updated = st.maybe_update(pending_scores.as_deref(), &mut dcache)?;
            }
        }
        let update_ms = ms(t);
        let draft_prefix_len = dcache.prefix_len();

        // draft: catch up on committed tokens, then speculate
        let t = Instant::now();
        let root_pos = seq.len() - 1;
        let root = seq[root_pos];
        let positions: Vec<usize> = (draft_done..seq.len()).collect();
        let out = decode_step_with(
            draft,
            &seq[draft_done..],
            &mut dcache,
            None,
            &positions,
            Capture::None,
            AttentionConfig::default(),
        )?;
        for (i, &p) in positions.iter().enumerate().take(positions.len() - 1) {
            let j = p + 1;
            if j >= n && draft_logits[j - n].is_none() {
                draft_logits[j - n] = Some(out.logits.row(i).to_vec());
            }
        }
        draft_done = seq.len();
        let root_logits = out.logits.row(positions.len() - 1).to_vec();
        let depth_room = max_pos - 1 - root_pos;
        let drafted: Drafted = match opts.drafting {
            Drafting::Chain { len } => {
                let root_dist = distribution(&root_logits, opts.temperature);
                let mut src = ModelSource::new(
                    draft,
                    &mut dcache,
                    root_dist,
                    root_pos,
                    opts.temperature,
                    AttentionConfig::default(),
                );
                draft_chain(&mut src, root, len.min(depth_room), &mut rng)?
            }
            Drafting::Tree(budget) => {
                // top-k picks need a graded distribution even when greedy
                let root_dist = distribution(&root_logits, t_metric);
                let mut src = ModelSource::new(
                    draft,
                    &mut dcache,
                    root_dist,
                    root_pos,
                    t_metric,
                    AttentionConfig::default(),
                );
                let budget = TreeBudget {
                    max_depth: budget.max_depth.min(depth_room),
                    ..budget
                };
                draft_tree(&mut src, root, &budget)?
            }
        };
        let draft_ms = ms(t);

        // verify
        let t = Instant::now();
        let capture_scores = retrieval.as_ref().is_some_and(|st| st.due());
        let hybrid_chunk = opts.hybrid_chunk.filter(|_| tcache.len() >= opts.hybrid_min_len);
        let vopts = VerifyOptions {
            temperature: opts.temperature,
            proposal: Proposal::Deterministic,
            attn: AttentionConfig {
                hybrid_chunk,
                score_reduce: opts.score_reduce,
            },
            capture_scores,
        };
        let tree = &drafted.tree;
        let outcome = match opts.drafting {
            Drafting::Chain { .. } => {
                let (tokens, p) = chain_parts(tree)?;
                let vopts = VerifyOptions {
                    proposal: Proposal::Sampled,
                    ..vopts
                };
                verify_chain(target, &mut tcache, root, root_pos, &tokens, &p, &vopts, &mut rng)?
            }
            Drafting::Tree(_) => verify_tree(target, &mut tcache, tree, root_pos, &vopts, &mut rng)?,
        };
        pending_scores = if capture_scores {
            Some(outcome_scores(&outcome, prefix_positions)?)
        } else {
            None
        };
        let verify_ms = ms(t);

        // bookkeeping
        for k in 0..=outcome.accepted_count {
            let j = seq.len() + k;
            let parent = if k == 0 { 0 } else { outcome.accepted_nodes[k - 1] };
            if j >= target_len {
                break;
            }
            let g = j - n;
            target_logits[g] = Some(outcome.target_logits[k].clone());
            let dl = if parent == 0 {
                Some(root_logits.clone())
            } else {
                drafted.logits[parent].clone()
            };
            if dl.is_some() {
                draft_logits[g] = dl;
            }
            if tree.nodes.iter().any(|nd| nd.parent == Some(parent)) {
                candidates.push(Candidate {
                    index: g,
                    accepted: k < outcome.accepted_count,
                });
            }
        }
        // keep draft K/V of accepted nodes that were forwarded while drafting
        let keep: Vec<usize> = outcome
            .accepted_nodes
            .iter()
            .map_while(|&i| drafted.slots[i])
            .collect();
        dcache.commit_speculative(&keep)?;
        draft_done += keep.len();
        seq.extend_from_slice(&outcome.accepted_tokens);
        seq.push(outcome.next_token());

        phase.cache_update += update_ms / 1e3;
        phase.draft += draft_ms / 1e3;
        phase.verify += verify_ms / 1e3;
        steps.push(StepReport {
            step: steps.len(),
            drafted: tree.drafted(),
            accepted: outcome.accepted_count,
            corrected: outcome.correction_token.is_some(),
            tree_nodes: tree.len(),
            retrieval_update: updated,
            draft_prefix_len,
            draft_ms,
            verify_ms,
            update_ms,
        });
    }

    // draft distributions for generated tokens that were never forwarded
    let flush_end = target_len - 1;
    if draft_done < flush_end {
        let positions: Vec<usize> = (draft_done..flush_end).collect();
        let out = decode_step(draft, &seq[draft_done..flush_end], &mut dcache, None, &positions, false)?;
        for (i, &p) in positions.iter().enumerate() {
            let j = p + 1;
            if j >= n && draft_logits[j - n].is_none() {
                draft_logits[j - n] = Some(out.logits.row(i).to_vec());
            }
        }
    }
    let collect = |v: Vec<Option<Vec<f64>>>, what: &str| -> Result<Vec<Vec<f64>>> {
        v.into_iter()
            .enumerate()
            .map(|(g, l)| l.ok_or_else(|| Error::State(format!("no {what} logits for generated token {g}"))))
            .collect()
    };
    Ok(Generation {
        tokens: seq[n..].to_vec(),
        steps,
        gen_tokens: opts.gen_tokens,
        temperature: opts.temperature,
        draft_logits: collect(draft_logits, "draft")?,
        target_logits: collect(target_logits, "target")?,
        candidates,
        phase,
        wall_s: pre.prefill_s + loop_start.elapsed().as_secs_f64(),
    })
}

/// Plain autoregressive greedy decoding with the target alone.
pub fn target_greedy(target: &Model, prompt: &[Token], gen_tokens: usize) -> Result<Vec<Token>> {
    if prompt.is_empty() {
        bail!(Parameter, "empty prompt");
    }
    if prompt.len() + gen_tokens > target.spec().max_pos + 1 {
        bail!(Capacity, "greedy run exceeds max_pos {}", target.spec().max_pos);
    }
    let mut cache = target.new_cache();
    let out = prefill(target, prompt, &mut cache, false)?;
    let mut next = argmax(out.logits.row(prompt.len() - 1));
    let mut gen = Vec::with_capacity(gen_tokens);
    for i in 0..gen_tokens {
        gen.push(next);
        if i + 1 == gen_tokens {
            break;
        }
        let o = decode_step(target, &[next], &mut cache, None, &[prompt.len() + i], false)?;
        next = argmax(o.logits.row(0));
    }
    Ok(gen)
}

/// Target and draft models described by a config.
pub fn build_models(cfg: &ExperimentConfig) -> Result<(Model, Model)> {
    let target = match cfg.target_model.as_str() {
        "copy" => copy_model(&CopyModelLayout {
            max_pos: cfg.max_pos,
            seed: cfg.model_seed,
            ..CopyModelLayout::default()
        })?,
        "random" => {
            let spec = ModelSpec {
                n_layers: cfg.n_layers,
                n_heads: cfg.n_heads,
                d_model: cfg.n_heads * cfg.d_head,
                d_head: cfg.d_head,
                d_ff: cfg.d_ff,
                vocab: cfg.vocab,
                max_pos: cfg.max_pos,
                rope_base: 10_000.0,
            };
            Model::new(spec, random_weights(&spec, cfg.model_seed)?)?
        }
        path => load_model(Path::new(path))?,
    };
    let layers = cfg
        .draft_layers
        .unwrap_or(target.spec().n_layers.saturating_sub(1).max(1));
    let draft = match cfg.draft_model.as_str() {
        "derived" => derive_draft(&target, layers)?,
        "target" => target.clone(),
        "random" => {
            let spec = ModelSpec {
                n_layers: layers,
                ..*target.spec()
            };
            Model::new(spec, random_weights(&spec, cfg.model_seed.wrapping_add(1))?)?
        }
        path => load_model(Path::new(path))?,
    };
    Ok((target, draft))
}

/// Prompt for a config, with the needle layout when the task has one.
#[derive(Debug, Clone)]
pub struct Prompt {
    pub tokens: Vec<Token>,
    pub needle: Option<NeedleTask>,
}

pub fn build_prompt(cfg: &ExperimentConfig, vocab: usize) -> Result<Prompt> {
    match cfg.task {
        TaskKind::Random => Ok(Prompt {
            tokens: random_prompt(vocab, cfg.prompt_len, cfg.seed),
            needle: None,
        }),
        TaskKind::Needle | TaskKind::Document => {
            let task = needle_task(&cfg.needle_params(), vocab, cfg.prompt_len, cfg.seed)?;
            Ok(Prompt {
                tokens: task.tokens.clone(),
                needle: (cfg.task == TaskKind::Needle).then_some(task),
            })
        }
    }
}
