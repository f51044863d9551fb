//! Run summaries: the JSON report, the per-step CSV, and re-aggregation of
//! finished run directories.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::model::Token;
use crate::tensor::{argmax, distribution};

use super::engine::{metric_temperature, Generation, PhaseTimes, StepReport};
use super::metrics::{entropy_buckets, natural_divergence, needle_metrics, NeedleMetrics};

pub const REPORT_FILE: &str = "report.json";
pub const STEPS_FILE: &str = "steps.csv";
/// Share of highest-entropy positions counted as hard.
pub const HARD_QUANTILE: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Acceptance {
    pub hard: Option<f64>,
    pub easy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeedleReport {
    pub accuracy: f64,
    pub ppl: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSeconds {
    pub draft: f64,
    pub verify: f64,
    pub cache_update: f64,
    pub prefill: f64,
}

impl From<PhaseTimes> for PhaseSeconds {
    fn from(p: PhaseTimes) -> Self {
        Self {
            draft: p.draft,
            verify: p.verify,
            cache_update: p.cache_update,
            prefill: p.prefill,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub config: serde_json::Value,
    pub tau: f64,
    pub tokens_per_s: f64,
    pub total_tokens: usize,
    pub wall_s: f64,
    pub phase_s: PhaseSeconds,
    pub divergence_by_pos: Vec<f64>,
    pub acceptance: Acceptance,
    pub needle: Option<NeedleReport>,
}

/// One CSV row per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    pub drafted: usize,
    pub accepted: usize,
    pub tree_nodes: usize,
    pub retrieval_update: bool,
    pub draft_ms: f64,
    pub verify_ms: f64,
    pub update_ms: f64,
}

impl From<&StepReport> for StepRow {
    fn from(s: &StepReport) -> Self {
        Self {
            step: s.step,
            drafted: s.drafted,
            accepted: s.accepted,
            tree_nodes: s.tree_nodes,
            retrieval_update: s.retrieval_update,
            draft_ms: s.draft_ms,
            verify_ms: s.verify_ms,
            update_ms: s.update_ms,
        }
    }
}

/// Draft accuracy and perplexity over the expected continuation, restricted
/// to the generated window.
pub fn needle_from_generation(gen: &Generation, expected: &[Token]) -> Result<Option<NeedleMetrics>> {
    let t = metric_temperature(gen.temperature);
    let n = expected.len().min(gen.draft_logits.len());
    let committed = &gen.output()[..n];
    let proposals: Vec<Token> = gen.draft_logits[..n].iter().map(|l| argmax(l)).collect();
    let probs: Vec<f64> = gen.draft_logits[..n]
        .iter()
        .zip(committed)
        .map(|(l, &c)| distribution(l, t)[c])
        .collect();
    needle_metrics(&proposals, committed, &probs)
}

/// Natural divergence between draft and target at each generated position.
pub fn divergence_by_pos(gen: &Generation) -> Result<Vec<f64>> {
    let t = metric_temperature(gen.temperature);
    gen.draft_logits
        .iter()
        .zip(&gen.target_logits)
        .map(|(d, q)| natural_divergence(&distribution(d, t), &distribution(q, t)))
        .collect()
}

/// Acceptance rate in the high- and low-entropy buckets of the target
/// distribution; both null with fewer than 10 candidate positions.
pub fn acceptance_by_entropy(gen: &Generation) -> Result<Acceptance> {
    let t = metric_temperature(gen.temperature);
    let (dists, flags): (Vec<Vec<f64>>, Vec<bool>) = gen
        .candidates
        .iter()
        .map(|c| (distribution(&gen.target_logits[c.index], t), c.accepted))
        .unzip();
    if dists.len() < 10 {
        return Ok(Acceptance { hard: None, easy: None });
    }
    let b = entropy_buckets(&dists, &flags, HARD_QUANTILE)?;
    Ok(Acceptance {
        hard: b.hard,
        easy: b.easy,
    })
}

impl RunReport {
    pub fn build(config: serde_json::Value, gen: &Generation, needle: Option<&[Token]>) -> Result<Self> {
        let needle = match needle {
            Some(expected) => needle_from_generation(gen, expected)?.map(|m| NeedleReport {
                accuracy: m.accuracy,
                ppl: m.ppl,
            }),
            None => None,
        };
        let total_tokens = gen.tokens.len();
        Ok(Self {
            config,
            tau: gen.tau(),
            tokens_per_s: total_tokens as f64 / gen.wall_s,
            total_tokens,
            wall_s: gen.wall_s,
            phase_s: gen.phase.into(),
            divergence_by_pos: divergence_by_pos(gen)?,
            acceptance: acceptance_by_entropy(gen)?,
            needle,
        })
    }

    pub fn to_json_string(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn mean_divergence(&self) -> f64 {
        if self.divergence_by_pos.is_empty() {
            return 0.0;
        }
        self.divergence_by_pos.iter().sum::<f64>() / self.divergence_by_pos.len() as f64
    }
}

/// Writes `report.json` and `steps.csv` into `dir`, refusing to overwrite an
/// earlier run.
pub fn write_run(dir: &Path, report: &RunReport, steps: &[StepReport]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let json_path = dir.join(REPORT_FILE);
    let csv_path = dir.join(STEPS_FILE);
    for p in [&json_path, &csv_path] {
        if p.exists() {
            bail!(Config, "{} already exists; run directories are write-once", p.display());
        }
    }
    let json = report.to_json_string()?;
    fs::write(&json_path, json + "\n").map_err(|e| Error::io(format!("writing {}", json_path.display()), e))?;
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_error(&csv_path, e))?;
    for s in steps {
        w.serialize(StepRow::from(s)).map_err(|e| csv_error(&csv_path, e))?;
    }
    if steps.is_empty() {
        w.write_record(CSV_HEADER).map_err(|e| csv_error(&csv_path, e))?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", csv_path.display()), e))?;
    Ok(())
}

pub const CSV_HEADER: [&str; 8] = [
    "step",
    "drafted",
    "accepted",
    "tree_nodes",
    "retrieval_update",
    "draft_ms",
    "verify_ms",
    "update_ms",
];

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn read_steps(path: &Path) -> Result<Vec<StepRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != CSV_HEADER {
        bail!(Format, "{}: unexpected columns {header:?}", path.display());
    }
    r.deserialize()
        .collect::<std::result::Result<Vec<StepRow>, _>>()
        .map_err(|e| csv_error(path, e))
}

/// Summary of one run directory recomputed from its step log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub dir: PathBuf,
    pub policy: String,
    pub steps: usize,
    pub tau: f64,
    pub tokens_per_s: f64,
    pub draft_ms_per_step: f64,
    pub verify_ms_per_step: f64,
    pub update_ms_per_step: f64,
    pub retrieval_updates: usize,
    pub mean_divergence: f64,
    pub needle_accuracy: Option<f64>,
}

/// Re-reads a run directory, recomputes τ and per-step timings from the CSV
/// and checks them against the JSON summary.
pub fn aggregate(dir: &Path) -> Result<Aggregate> {
    let report = read_report(&dir.join(REPORT_FILE))?;
    let rows = read_steps(&dir.join(STEPS_FILE))?;
    if rows.is_empty() {
        bail!(Format, "{}: no steps", dir.display());
    }
    let n = rows.len() as f64;
    let tau = rows.iter().map(|r| (r.accepted + 1) as f64).sum::<f64>() / n;
    if (tau - report.tau).abs() > 1e-9 {
        bail!(
            Consistency,
            "{}: step log gives tau {tau} but the report says {}",
            dir.display(),
            report.tau
        );
    }
    let committed: usize = rows.iter().map(|r| r.accepted + 1).sum();
    if committed != report.total_tokens {
        bail!(
            Consistency,
            "{}: step log commits {committed} tokens but the report says {}",
            dir.display(),
            report.total_tokens
        );
    }
    Ok(Aggregate {
        dir: dir.to_path_buf(),
        policy: report.config["policy"].as_str().unwrap_or("?").to_string(),
        steps: rows.len(),
        tau,
        tokens_per_s: report.tokens_per_s,
        draft_ms_per_step: rows.iter().map(|r| r.draft_ms).sum::<f64>() / n,
        verify_ms_per_step: rows.iter().map(|r| r.verify_ms).sum::<f64>() / n,
        update_ms_per_step: rows.iter().map(|r| r.update_ms).sum::<f64>() / n,
        retrieval_updates: rows.iter().filter(|r| r.retrieval_update).count(),
        mean_divergence: report.mean_divergence(),
        needle_accuracy: report.needle.map(|n| n.accuracy),
    })
}
