//! Experiment configuration: a flat `key = value` text file (one pair per
//! line, `#` comments) that command-line `key=value` overrides can amend.
//! Unknown keys are errors.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::drafting::TreeBudget;
use crate::error::{bail, Error, Result};
use crate::kvcache::CachePolicy;
use crate::model::ScoreReduce;

use super::tasks::NeedleParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Full,
    Streaming,
    Retrieval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DraftingKind {
    Chain,
    Tree,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Random,
    Needle,
    Document,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreHeads {
    Mean,
    Max,
}

impl From<ScoreHeads> for ScoreReduce {
    fn from(s: ScoreHeads) -> Self {
        match s {
            ScoreHeads::Mean => ScoreReduce::Mean,
            ScoreHeads::Max => ScoreReduce::Max,
        }
    }
}

/// Every knob of one run. `target_model` is a weight file path or one of the
/// built-ins `copy` / `random`; `draft_model` is a path, `derived` (the
/// target's first `draft_layers` blocks), `random` (independent weights of
/// the derived draft's shape) or `target` (self-drafting).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub target_model: String,
    pub draft_model: String,
    pub draft_layers: Option<usize>,
    pub model_seed: u64,
    // built-in random target shape
    pub vocab: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub max_pos: usize,

    pub policy: PolicyKind,
    pub sink: usize,
    pub recent: usize,
    pub chunk_size: usize,
    pub top_k: usize,
    pub frequency: usize,
    pub retrieval_sink: usize,

    pub drafting: DraftingKind,
    pub chain_len: usize,
    pub tree_nodes: usize,
    pub tree_depth: usize,
    pub tree_threshold: f64,
    pub tree_children: usize,

    pub temperature: f64,
    pub seed: u64,
    pub gen_tokens: usize,

    pub task: TaskKind,
    pub prompt_len: usize,
    pub filler_vocab: usize,
    pub needle_len: usize,
    pub needle_depth: f64,
    pub query_len: usize,
    pub filler_noise: f64,

    pub hybrid_attention: bool,
    pub hybrid_chunk: usize,
    /// Chunked prefix attention only once the target cache is this long.
    pub hybrid_min_len: usize,
    pub score_heads: ScoreHeads,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            target_model: "random".into(),
            draft_model: "derived".into(),
            draft_layers: None,
            model_seed: 0,
            vocab: 64,
            n_layers: 3,
            n_heads: 2,
            d_head: 8,
            d_ff: 32,
            max_pos: 4096,
            policy: PolicyKind::Retrieval,
            sink: 4,
            recent: 1020,
            chunk_size: 32,
            top_k: 32,
            frequency: 4,
            retrieval_sink: 0,
            drafting: DraftingKind::Tree,
            chain_len: 4,
            tree_nodes: 50,
            tree_depth: 10,
            tree_threshold: 0.7,
            tree_children: 2,
            temperature: 0.0,
            seed: 0,
            gen_tokens: 128,
            task: TaskKind::Random,
            prompt_len: 512,
            filler_vocab: 16,
            needle_len: 48,
            needle_depth: 0.5,
            query_len: 1,
            filler_noise: 0.05,
            hybrid_attention: true,
            hybrid_chunk: 256,
            hybrid_min_len: 0,
            score_heads: ScoreHeads::Mean,
            out_dir: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => bail!(Config, "{key}: expected a boolean, got {value:?}"),
    }
}

impl ExperimentConfig {
    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!(Config, "line {}: expected key = value", n + 1);
            };
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides, then re-validates.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, pairs: &[S]) -> Result<()> {
        for p in pairs {
            let Some((k, v)) = p.as_ref().split_once('=') else {
                bail!(Config, "override {:?} is not key=value", p.as_ref());
            };
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "target_model" => self.target_model = v.to_string(),
            "draft_model" => self.draft_model = v.to_string(),
            "draft_layers" => self.draft_layers = Some(parse(key, v)?),
            "model_seed" => self.model_seed = parse(key, v)?,
            "vocab" => self.vocab = parse(key, v)?,
            "n_layers" => self.n_layers = parse(key, v)?,
            "n_heads" => self.n_heads = parse(key, v)?,
            "d_head" => self.d_head = parse(key, v)?,
            "d_ff" => self.d_ff = parse(key, v)?,
            "max_pos" => self.max_pos = parse(key, v)?,
            "policy" => {
                self.policy = match v {
                    "full" => PolicyKind::Full,
                    "streaming" => PolicyKind::Streaming,
                    "retrieval" | "cmr" => PolicyKind::Retrieval,
                    _ => bail!(Config, "policy: expected full|streaming|retrieval, got {v:?}"),
                }
            }
            "sink" => self.sink = parse(key, v)?,
            "recent" => self.recent = parse(key, v)?,
            "chunk_size" => self.chunk_size = parse(key, v)?,
            "top_k" => self.top_k = parse(key, v)?,
            "frequency" => self.frequency = parse(key, v)?,
            "retrieval_sink" => self.retrieval_sink = parse(key, v)?,
            "drafting" => {
                self.drafting = match v {
                    "chain" => DraftingKind::Chain,
                    "tree" => DraftingKind::Tree,
                    _ => bail!(Config, "drafting: expected chain|tree, got {v:?}"),
                }
            }
            "chain_len" => self.chain_len = parse(key, v)?,
            "tree_nodes" => self.tree_nodes = parse(key, v)?,
            "tree_depth" => self.tree_depth = parse(key, v)?,
            "tree_threshold" => self.tree_threshold = parse(key, v)?,
            "tree_children" => self.tree_children = parse(key, v)?,
            "temperature" => self.temperature = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "gen_tokens" => self.gen_tokens = parse(key, v)?,
            "task" => {
                self.task = match v {
                    "random" => TaskKind::Random,
                    "needle" => TaskKind::Needle,
                    "document" => TaskKind::Document,
                    _ => bail!(Config, "task: expected random|needle|document, got {v:?}"),
                }
            }
            "prompt_len" => self.prompt_len = parse(key, v)?,
            "filler_vocab" => self.filler_vocab = parse(key, v)?,
            "needle_len" => self.needle_len = parse(key, v)?,
            "needle_depth" => self.needle_depth = parse(key, v)?,
            "query_len" => self.query_len = parse(key, v)?,
            "filler_noise" => self.filler_noise = parse(key, v)?,
            "hybrid_attention" => self.hybrid_attention = parse_bool(key, v)?,
            "hybrid_chunk" => self.hybrid_chunk = parse(key, v)?,
            "hybrid_min_len" => self.hybrid_min_len = parse(key, v)?,
            "score_heads" => {
                self.score_heads = match v {
                    "mean" => ScoreHeads::Mean,
                    "max" => ScoreHeads::Max,
                    _ => bail!(Config, "score_heads: expected mean|max, got {v:?}"),
                }
            }
            "out_dir" => self.out_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            _ => bail!(Config, "unknown key {key:?}"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.cache_policy().validate()?;
        self.tree_budget().validate()?;
        if self.chain_len < 1 {
            bail!(Config, "chain_len must be >= 1");
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            bail!(Config, "temperature must be >= 0");
        }
        if self.prompt_len < 2 {
            bail!(Config, "prompt_len must be >= 2");
        }
        if self.gen_tokens < 1 {
            bail!(Config, "gen_tokens must be >= 1");
        }
        if self.hybrid_chunk < 1 {
            bail!(Config, "hybrid_chunk must be >= 1");
        }
        Ok(())
    }

    pub fn cache_policy(&self) -> CachePolicy {
        match self.policy {
            PolicyKind::Full => CachePolicy::Full,
            PolicyKind::Streaming => CachePolicy::Streaming {
                sink: self.sink,
                recent: self.recent,
            },
            PolicyKind::Retrieval => CachePolicy::Retrieval {
                chunk_size: self.chunk_size,
                top_k: self.top_k,
                frequency: self.frequency,
                sink: self.retrieval_sink,
            },
        }
    }

    pub fn tree_budget(&self) -> TreeBudget {
        TreeBudget {
            max_nodes: self.tree_nodes,
            max_depth: self.tree_depth,
            expand_threshold: self.tree_threshold,
            children: self.tree_children,
        }
    }

    pub fn needle_params(&self) -> NeedleParams {
        NeedleParams {
            filler_vocab: self.filler_vocab,
            needle_len: self.needle_len,
            depth: self.needle_depth,
            query_len: self.query_len,
            noise: self.filler_noise,
        }
    }

    pub fn policy_name(&self) -> &'static str {
        self.cache_policy().name()
    }

    /// Echo of the configuration as a JSON object.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
