//! Config-driven runs: build models and prompt, prefill once, run one or
//! several cache policies, and summarize.

use std::path::Path;

use crate::error::Result;
use crate::model::Model;

use super::config::{ExperimentConfig, PolicyKind};
use super::engine::{
    build_models, build_prompt, check_capacity, prefill_pair, speculative_generate, EngineOptions, Generation,
    Prompt, StepReport,
};
use super::report::{write_run, RunReport};

/// A finished run.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub report: RunReport,
    pub generation: Generation,
}

impl Experiment {
    pub fn steps(&self) -> &[StepReport] {
        &self.generation.steps
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_run(dir, &self.report, self.steps())
    }
}

/// Runs `cfg` once.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Experiment> {
    let mut runs = run_policies(cfg, &[cfg.policy])?;
    Ok(runs.remove(0))
}

/// Runs `cfg` under each policy in turn, sharing models, prompt and prefill.
pub fn run_policies(cfg: &ExperimentConfig, policies: &[PolicyKind]) -> Result<Vec<Experiment>> {
    cfg.validate()?;
    let (target, draft) = build_models(cfg)?;
    let prompt = build_prompt(cfg, target.spec().vocab)?;
    run_policies_with(cfg, policies, &target, &draft, &prompt)
}

/// [`run_policies`] on already-built models and prompt.
pub fn run_policies_with(
    cfg: &ExperimentConfig,
    policies: &[PolicyKind],
    target: &Model,
    draft: &Model,
    prompt: &Prompt,
) -> Result<Vec<Experiment>> {
    check_capacity(target, draft, prompt.tokens.len(), cfg.gen_tokens)?;
    let pre = prefill_pair(target, draft, &prompt.tokens, cfg.score_heads.into())?;
    let mut out = Vec::with_capacity(policies.len());
    for &policy in policies {
        let cfg = ExperimentConfig {
            policy,
            ..cfg.clone()
        };
        let generation = speculative_generate(target, draft, &pre, &EngineOptions::from_config(&cfg))?;
        let needle = prompt.needle.as_ref().map(|t| t.expected.as_slice());
        let report = RunReport::build(cfg.to_json(), &generation, needle)?;
        out.push(Experiment {
            config: cfg,
            report,
            generation,
        });
    }
    Ok(out)
}
