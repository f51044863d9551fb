use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crossdraft::harness::config::{ExperimentConfig, PolicyKind, TaskKind};
use crossdraft::harness::experiment::{run_experiment, run_policies, Experiment};
use crossdraft::harness::metrics::{speedup_model, SpeedupInputs};
use crossdraft::harness::report::aggregate;
use crossdraft::model::{copy_model, random_weights, save_model, CopyModelLayout};
use crossdraft::{Model, ModelSpec, Result};

#[derive(Parser)]
#[command(name = "crossdraft", version, about = "Speculative decoding with retrieval-managed draft caches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a weight file.
    GenModel(GenModel),
    /// Run one experiment.
    Run(RunArgs),
    /// Needle retrieval under the full, streaming and retrieval draft caches.
    Needle(RunArgs),
    /// Evaluate the speculative-decoding latency model.
    SpeedupModel(SpeedupArgs),
    /// Re-aggregate finished run directories from their step logs.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    /// Random weights of the given shape.
    Random,
    /// Hand-built induction model that copies earlier spans.
    Copy,
}

#[derive(Args)]
struct GenModel {
    #[arg(long, value_enum, default_value = "random")]
    kind: ModelKind,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    vocab: usize,
    #[arg(long, default_value_t = 3)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 8)]
    d_head: usize,
    #[arg(long, default_value_t = 32)]
    d_ff: usize,
    #[arg(long, default_value_t = 4096)]
    max_pos: usize,
}

#[derive(Args)]
struct RunArgs {
    /// key = value config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Write report.json and steps.csv here (overrides out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SpeedupArgs {
    #[arg(long)]
    tau: f64,
    /// Draft tokens per step.
    #[arg(long)]
    d: f64,
    /// Draft per-token latency.
    #[arg(long)]
    t_d: f64,
    /// Target per-token latency.
    #[arg(long)]
    t_t: f64,
    /// Verification latency.
    #[arg(long)]
    t_v: f64,
    /// Input length the latencies were measured at.
    #[arg(long, default_value_t = 0)]
    n: usize,
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_overrides(&args.overrides)?;
    if let Some(out) = &args.out {
        cfg.out_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn gen_model(a: &GenModel) -> Result<()> {
    let model = match a.kind {
        ModelKind::Random => {
            let spec = ModelSpec {
                n_layers: a.layers,
                n_heads: a.heads,
                d_model: a.heads * a.d_head,
                d_head: a.d_head,
                d_ff: a.d_ff,
                vocab: a.vocab,
                max_pos: a.max_pos,
                rope_base: 10_000.0,
            };
            Model::new(spec, random_weights(&spec, a.seed)?)?
        }
        ModelKind::Copy => copy_model(&CopyModelLayout {
            max_pos: a.max_pos,
            seed: a.seed,
            ..CopyModelLayout::default()
        })?,
    };
    save_model(&model, &a.out)?;
    let s = model.spec();
    println!(
        "wrote {} (vocab {}, {} layers, {} heads, max_pos {})",
        a.out.display(),
        s.vocab,
        s.n_layers,
        s.n_heads,
        s.max_pos
    );
    Ok(())
}

fn print_summary(e: &Experiment) {
    let r = &e.report;
    let updates = e.steps().iter().filter(|s| s.retrieval_update).count();
    println!(
        "{:<10} tau {:.3}  tokens {}  steps {}  {:.1} tok/s  draft {:.3}s  verify {:.3}s  update {:.3}s  prefill {:.3}s  updates {}  divergence {:.4}",
        e.config.policy_name(),
        r.tau,
        r.total_tokens,
        e.steps().len(),
        r.tokens_per_s,
        r.phase_s.draft,
        r.phase_s.verify,
        r.phase_s.cache_update,
        r.phase_s.prefill,
        updates,
        r.mean_divergence(),
    );
    let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.3}"));
    print!(
        "{:<10} acceptance hard {}  easy {}",
        "",
        fmt(r.acceptance.hard),
        fmt(r.acceptance.easy)
    );
    match &r.needle {
        Some(n) => println!("  needle accuracy {:.3}  ppl {:.3}", n.accuracy, n.ppl),
        None => println!(),
    }
}

fn write_if_requested(e: &Experiment, dir: Option<&Path>) -> Result<()> {
    if let Some(dir) = dir {
        e.write(dir)?;
        println!("{:<10} wrote {}", "", dir.display());
    }
    Ok(())
}

fn run(args: &RunArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let e = run_experiment(&cfg)?;
    print_summary(&e);
    write_if_requested(&e, cfg.out_dir.as_deref())
}

fn needle(args: &RunArgs) -> Result<()> {
    let mut cfg = ExperimentConfig {
        target_model: "copy".into(),
        task: TaskKind::Needle,
        prompt_len: 8192,
        max_pos: 8192 + 64,
        gen_tokens: 47,
        ..ExperimentConfig::default()
    };
    if let Some(p) = &args.config {
        cfg = ExperimentConfig::load(p)?;
    }
    cfg.apply_overrides(&args.overrides)?;
    if let Some(out) = &args.out {
        cfg.out_dir = Some(out.clone());
    }
    let runs = run_policies(&cfg, &[PolicyKind::Full, PolicyKind::Streaming, PolicyKind::Retrieval])?;
    for e in &runs {
        print_summary(e);
        let dir = cfg.out_dir.as_ref().map(|d| d.join(e.config.policy_name()));
        write_if_requested(e, dir.as_deref())?;
    }
    Ok(())
}

fn speedup(a: &SpeedupArgs) -> Result<()> {
    let s = speedup_model(&SpeedupInputs {
        tau: a.tau,
        d: a.d,
        t_d: a.t_d,
        t_t: a.t_t,
        t_v: a.t_v,
        n: a.n,
    })?;
    println!("ratio {:.6}  speedup {:.6}", s.ratio, s.speedup);
    Ok(())
}

fn report(dirs: &[PathBuf]) -> Result<()> {
    println!(
        "{:<32} {:<10} {:>6} {:>7} {:>9} {:>9} {:>9} {:>9} {:>7} {:>8}",
        "run", "policy", "steps", "tau", "tok/s", "draft_ms", "verify_ms", "update_ms", "updates", "needle"
    );
    for d in dirs {
        let a = aggregate(d)?;
        println!(
            "{:<32} {:<10} {:>6} {:>7.3} {:>9.1} {:>9.3} {:>9.3} {:>9.3} {:>7} {:>8}",
            a.dir.display(),
            a.policy,
            a.steps,
            a.tau,
            a.tokens_per_s,
            a.draft_ms_per_step,
            a.verify_ms_per_step,
            a.update_ms_per_step,
            a.retrieval_updates,
            a.needle_accuracy.map_or("n/a".into(), |x| format!("{x:.3}")),
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenModel(a) => gen_model(a),
        Command::Run(a) => run(a),
        Command::Needle(a) => needle(a),
        Command::SpeedupModel(a) => speedup(a),
        Command::Report { dirs } => report(dirs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
