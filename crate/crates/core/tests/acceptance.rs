//! Acceptance run: one PASS/FAIL line per criterion. Exits non-zero when any
//! criterion fails.

use std::time::Instant;

use crossdraft::drafting::{build_tree, DraftTree, NodeDistributions, TreeBudget};
use crossdraft::harness::config::{ExperimentConfig, PolicyKind, TaskKind};
use crossdraft::harness::engine::{
    build_models, build_prompt, prefill_pair, speculative_generate, target_greedy, Drafting, EngineOptions,
};
use crossdraft::harness::experiment::{run_policies_with, Experiment};
use crossdraft::harness::metrics::{speedup_model, SpeedupInputs};
use crossdraft::harness::report::{read_steps, CSV_HEADER, REPORT_FILE, STEPS_FILE};
use crossdraft::kvcache::LayerRows;
use crossdraft::model::{decode_step, derive_draft, prefill, random_weights, ScoreReduce};
use crossdraft::retrieval::{chunk_scores, select_top_k, RetrievalState};
use crossdraft::tensor::Rng;
use crossdraft::verification::{
    accept_chain_with, accept_tree, hybrid_attention, monolithic_attention, residual, Proposal,
};
use crossdraft::{CachePolicy, LayerKVCache, Model, ModelSpec, Tensor, Token};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- 1

fn random_model(rng: &mut Rng, vocab: usize, layers: usize, max_pos: usize) -> Model {
    let n_heads = 1 + rng.below(2);
    let d_head = [4, 8][rng.below(2)];
    let spec = ModelSpec {
        n_layers: layers,
        n_heads,
        d_model: n_heads * d_head,
        d_head,
        d_ff: 16 + 8 * rng.below(3),
        vocab,
        max_pos,
        rope_base: 10_000.0,
    };
    Model::new(spec, random_weights(&spec, rng.next_u64()).unwrap()).unwrap()
}

fn greedy_losslessness() -> Outcome {
    let mut rng = Rng::new(2024);
    let gen = 256;
    let mut identical = 0;
    let mut taus = Vec::new();
    let mut failures = Vec::new();
    for i in 0..50 {
        let vocab = 16 + rng.below(49);
        let layers = 2 + rng.below(3);
        let prompt_len = 32 + rng.below(129);
        let target = random_model(&mut rng, vocab, layers, prompt_len + gen + 8);
        let draft = derive_draft(&target, 1 + rng.below(layers - 1)).unwrap();
        let prompt: Vec<Token> = (0..prompt_len).map(|_| rng.below(vocab)).collect();
        let policy = match i % 3 {
            0 => CachePolicy::Full,
            1 => CachePolicy::Streaming {
                sink: rng.below(5),
                recent: 8 + rng.below(41),
            },
            _ => CachePolicy::Retrieval {
                chunk_size: 4 + rng.below(13),
                top_k: 1 + rng.below(4),
                frequency: 1 + rng.below(5),
                sink: rng.below(3),
            },
        };
        let drafting = if (i / 3) % 2 == 0 {
            Drafting::Chain { len: 1 + rng.below(6) }
        } else {
            Drafting::Tree(TreeBudget {
                max_nodes: 4 + rng.below(47),
                max_depth: 2 + rng.below(9),
                expand_threshold: 0.2 + 0.7 * rng.uniform(),
                children: 1 + rng.below(3),
            })
        };
        let opts = EngineOptions {
            policy,
            drafting,
            temperature: 0.0,
            gen_tokens: gen,
            seed: rng.next_u64(),
            hybrid_chunk: (rng.below(2) == 0).then(|| 8 + rng.below(57)),
            hybrid_min_len: 0,
            score_reduce: ScoreReduce::Mean,
        };
        let reference = target_greedy(&target, &prompt, gen).unwrap();
        let pre = prefill_pair(&target, &draft, &prompt, ScoreReduce::Mean).unwrap();
        match speculative_generate(&target, &draft, &pre, &opts) {
            Ok(g) if g.output() == reference.as_slice() => {
                identical += 1;
                taus.push(g.tau());
            }
            Ok(_) => failures.push(format!("config {i} diverged")),
            Err(e) => failures.push(format!("config {i}: {e}")),
        }
    }
    let mean_tau = taus.iter().sum::<f64>() / taus.len().max(1) as f64;
    let mut detail = format!("{identical}/50 configs token-identical to target greedy over {gen} tokens (mean tau {mean_tau:.2})");
    if !failures.is_empty() {
        detail += &format!("; {}", failures.join(", "));
    }
    outcome(identical == 50, detail)
}

// ---------------------------------------------------------------- 2

fn ctx_dist(seed: u64, ctx: &[Token], vocab: usize, zeros: bool) -> Vec<f64> {
    let h = ctx
        .iter()
        .fold(seed, |h, &t| h.wrapping_mul(1_000_003).wrapping_add(t as u64 + 1));
    let mut rng = Rng::new(h);
    let mut raw: Vec<f64> = (0..vocab)
        .map(|_| {
            let x = rng.uniform();
            if zeros && x < 0.25 {
                0.0
            } else {
                x + 0.01
            }
        })
        .collect();
    if raw.iter().all(|&x| x == 0.0) {
        raw[0] = 1.0;
    }
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// `(token, midpoint, mass)` of each nonzero inverse-CDF interval.
fn cdf_midpoints(r: &[f64]) -> Vec<(Token, f64, f64)> {
    let mut acc = 0.0;
    let mut out = Vec::new();
    for (i, &x) in r.iter().enumerate() {
        if x > 0.0 {
            out.push((i, acc + x / 2.0, x));
        }
        acc += x;
    }
    out
}

/// Law of the first committed token of one chain step: every drafted tuple,
/// every accept/reject branch (each driven by a uniform inside its branch)
/// and every correction/bonus interval.
fn enumerate_chain(seed: u64, vocab: usize, k: usize) -> Vec<f64> {
    let p = |ctx: &[Token]| ctx_dist(seed, ctx, vocab, true);
    let q = |ctx: &[Token]| ctx_dist(seed ^ 0xabc, ctx, vocab, true);
    let mut law = vec![0.0; vocab];
    let mut tuples: Vec<Vec<Token>> = vec![vec![]];
    for _ in 0..k {
        tuples = tuples
            .into_iter()
            .flat_map(|t| (0..vocab).map(move |x| [t.clone(), vec![x]].concat()))
            .collect();
    }
    for xs in tuples {
        let ps: Vec<Vec<f64>> = (0..k).map(|i| p(&xs[..i])).collect();
        let draw: f64 = (0..k).map(|i| ps[i][xs[i]]).product();
        if draw == 0.0 {
            continue;
        }
        let qs: Vec<Vec<f64>> = (0..=k).map(|i| q(&xs[..i])).collect();
        let alpha: Vec<f64> = (0..k).map(|i| (qs[i][xs[i]] / ps[i][xs[i]]).min(1.0)).collect();
        for j in 0..=k {
            let mut w = draw * alpha[..j].iter().product::<f64>();
            let mut us: Vec<f64> = alpha[..j].iter().map(|a| a / 2.0).collect();
            let last = if j < k {
                w *= 1.0 - alpha[j];
                us.push((alpha[j] + 1.0) / 2.0);
                residual(&qs[j], &ps[j])
            } else {
                qs[k].clone()
            };
            if w == 0.0 {
                continue;
            }
            for (y, mid, wy) in cdf_midpoints(&last) {
                let mut stream = us.iter().copied().chain([mid]);
                let d = accept_chain_with(&xs, &ps, &qs, &mut || stream.next().unwrap()).unwrap();
                assert_eq!((d.path.len(), d.token), (j, y), "branch mismatch");
                let first = if j > 0 { xs[0] } else { y };
                law[first] += w * wy;
            }
        }
    }
    law
}

struct Ctx(u64, usize);

impl NodeDistributions for Ctx {
    fn evaluate(&mut self, tree: &DraftTree, node: usize) -> crossdraft::Result<Vec<f64>> {
        let path: Vec<Token> = tree.path(node).iter().map(|&i| tree.nodes[i].token).collect();
        Ok(ctx_dist(self.0, &path, self.1, false))
    }
}

fn target_rows(seed: u64, tree: &DraftTree, prefix: &[Token], vocab: usize) -> Vec<Vec<f64>> {
    (0..tree.len())
        .map(|i| {
            let mut ctx = prefix.to_vec();
            ctx.extend(tree.path(i).iter().map(|&j| tree.nodes[j].token));
            ctx_dist(seed, &ctx, vocab, true)
        })
        .collect()
}

/// Joint law of the first two committed tokens under repeated tree steps.
fn tree_monte_carlo(vocab: usize, trials: usize) -> f64 {
    let budget = TreeBudget {
        max_nodes: 8,
        max_depth: 3,
        expand_threshold: 0.2,
        children: 2,
    };
    let (ds, ts) = (11, 77);
    let tree_for = |root: Token, salt: u64| build_tree(root, &budget, &mut Ctx(ds ^ salt, vocab)).unwrap().canonical().0;
    let first = tree_for(0, 0);
    let q_first = target_rows(ts, &first, &[], vocab);
    let mut rng = Rng::new(5);
    let mut joint = vec![0.0; vocab * vocab];
    for _ in 0..trials {
        let d = accept_tree(&first, &q_first, Proposal::Deterministic, &mut rng).unwrap();
        let mut committed: Vec<Token> = d.path.iter().map(|&i| first.nodes[i].token).collect();
        committed.push(d.token);
        if committed.len() < 2 {
            let c = committed[0];
            let t2 = tree_for(c, c as u64 + 1);
            let q2 = target_rows(ts, &t2, &[c], vocab);
            let d2 = accept_tree(&t2, &q2, Proposal::Deterministic, &mut rng).unwrap();
            committed.push(d2.path.first().map_or(d2.token, |&i| t2.nodes[i].token));
        }
        joint[committed[0] * vocab + committed[1]] += 1.0 / trials as f64;
    }
    let q0 = ctx_dist(ts, &[], vocab, true);
    let exact: Vec<f64> = (0..vocab * vocab)
        .map(|i| q0[i / vocab] * ctx_dist(ts, &[i / vocab], vocab, true)[i % vocab])
        .collect();
    tv(&joint, &exact)
}

fn stochastic_losslessness() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        for k in 1..=3 {
            let law = enumerate_chain(seed, 8, k);
            let q0 = ctx_dist(seed ^ 0xabc, &[], 8, true);
            for (a, b) in law.iter().zip(&q0) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let mc = tree_monte_carlo(8, 100_000);
    outcome(
        worst <= 1e-12 && mc <= 0.015,
        format!("chain enumeration max |law - q| = {worst:.2e} (vocab 8, k 1..3, 5 seeds); tree Monte-Carlo TV = {mc:.4} at 1e5 trials"),
    )
}

// ---------------------------------------------------------------- 3

fn rand_tensor(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

fn hybrid_equivalence() -> Outcome {
    let mut rng = Rng::new(33);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let d = 2 * (1 + rng.below(8));
        let n = rng.below(257);
        let t = if n == 0 { 1 + rng.below(50) } else { rng.below(51) };
        let rows = t.max(1);
        let q = rand_tensor(rows, d, &mut rng);
        let (pk, pv) = (rand_tensor(n, d, &mut rng), rand_tensor(n, d, &mut rng));
        let (tk, tval) = (rand_tensor(t, d, &mut rng), rand_tensor(t, d, &mut rng));
        // random forest over the tree nodes; each query row sees its ancestors
        let parents: Vec<Option<usize>> = (0..t)
            .map(|i| (i > 0 && rng.below(4) != 0).then(|| rng.below(i)))
            .collect();
        let mask: Vec<Vec<bool>> = (0..rows)
            .map(|i| {
                let mut r = vec![false; t];
                let mut a = (t > 0).then_some(i.min(t.saturating_sub(1)));
                while let Some(x) = a {
                    r[x] = true;
                    a = parents[x];
                }
                r
            })
            .collect();
        let n_chunks = 1 + rng.below(8.min(n.max(1)));
        let mut chunks = Vec::new();
        let mut left = n;
        for c in 0..n_chunks {
            if left == 0 {
                break;
            }
            let take = if c + 1 == n_chunks { left } else { 1 + rng.below(left) };
            chunks.push(take);
            left -= take;
        }
        let h = hybrid_attention(&q, &pk, &pv, &chunks, &tk, &tval, &mask).unwrap();
        let (m, _) = monolithic_attention(&q, &pk, &pv, &tk, &tval, &mask).unwrap();
        worst = worst.max(h.output.max_abs_diff(&m).unwrap());
    }
    outcome(
        worst < 1e-9,
        format!("1000 instances (prefix <= 256 in 1-8 chunks, tree <= 50 nodes): max |hybrid - monolithic| = {worst:.2e}"),
    )
}

// ---------------------------------------------------------------- 4

fn incremental_correctness() -> Outcome {
    let mut rng = Rng::new(44);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let vocab = 8 + rng.below(57);
        let len = 2 + rng.below(120);
        let layers = 1 + rng.below(4);
        let m = random_model(&mut rng, vocab, layers, 128);
        let toks: Vec<Token> = (0..len).map(|_| rng.below(vocab)).collect();
        let mut full = m.new_cache();
        let reference = prefill(&m, &toks, &mut full, false).unwrap();
        let mut cache = m.new_cache();
        let split = 1 + rng.below(len - 1);
        let first = prefill(&m, &toks[..split], &mut cache, false).unwrap();
        for i in 0..split {
            worst = worst.max(diff(first.logits.row(i), reference.logits.row(i)));
        }
        let mut at = split;
        while at < len {
            let block = (1 + rng.below(4)).min(len - at);
            let pos: Vec<usize> = (at..at + block).collect();
            let out = decode_step(&m, &toks[at..at + block], &mut cache, None, &pos, false).unwrap();
            for i in 0..block {
                worst = worst.max(diff(out.logits.row(i), reference.logits.row(at + i)));
            }
            at += block;
        }
    }
    outcome(
        worst < 1e-9,
        format!("200 sequences: max |incremental - recompute| logit diff = {worst:.2e}"),
    )
}

fn diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- 5

fn selection_oracle() -> Outcome {
    let mut rng = Rng::new(55);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = 1 + rng.below(600);
        let cs = 1 + rng.below(48);
        let k = 1 + rng.below(12);
        // coarse values so ties are common
        let s: Vec<f64> = (0..n).map(|_| rng.below(6) as f64 / 8.0).collect();
        let mut means = Vec::new();
        let mut lo = 0;
        while lo < n {
            let hi = (lo + cs).min(n);
            let mut sum = 0.0;
            for x in &s[lo..hi] {
                sum += x;
            }
            means.push(sum / (hi - lo) as f64);
            lo = hi;
        }
        let mut taken = vec![false; means.len()];
        let mut brute = Vec::new();
        for _ in 0..k.min(means.len()) {
            let mut best: Option<usize> = None;
            for (i, &v) in means.iter().enumerate() {
                if !taken[i] && best.is_none_or(|b| v > means[b]) {
                    best = Some(i);
                }
            }
            let b = best.unwrap();
            taken[b] = true;
            brute.push(b);
        }
        brute.sort_unstable();
        let got_means = chunk_scores(&s, cs).unwrap();
        let got = select_top_k(&got_means, k).unwrap();
        if got_means != means || got != brute {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("1000 score vectors: {mismatches} mismatches against brute-force means and ranking (ties to the lower chunk)"),
    )
}

// ---------------------------------------------------------------- 6

fn speedup_calculator() -> Outcome {
    let run = |tau, d, t_d, t_v| {
        speedup_model(&SpeedupInputs {
            tau,
            d,
            t_d,
            t_t: 1.0,
            t_v,
            n: 0,
        })
        .unwrap()
    };
    let a = run(2.0, 4.0, 0.1, 1.0);
    let b = run(3.0, 5.0, 1e-15, 1.0);
    let c = run(1.0, 1.0, 1.0, 1.0);
    let examples_ok = (a.ratio - 0.7).abs() < 1e-12
        && (a.speedup - 1.0 / 0.7).abs() < 1e-12
        && (b.ratio - 1.0 / 3.0).abs() < 1e-12
        && (c.ratio - 2.0).abs() < 1e-12;
    let mut rng = Rng::new(66);
    let mut violations = 0;
    for _ in 0..10_000 {
        let tau = 1.0 + 9.0 * rng.uniform();
        let d = 1.0 + rng.below(16) as f64;
        let t_d = 1e-3 + rng.uniform();
        let t_v = 1e-3 + 2.0 * rng.uniform();
        let base = run(tau, d, t_d, t_v).speedup;
        let more_tau = run(tau * (1.0 + rng.uniform()) + 1e-9, d, t_d, t_v).speedup;
        let slower_draft = run(tau, d, t_d * (1.0 + rng.uniform()) + 1e-9, t_v).speedup;
        if more_tau <= base || slower_draft >= base {
            violations += 1;
        }
    }
    outcome(
        examples_ok && violations == 0,
        format!(
            "examples: ratio {:.12} / {:.12} / {:.12} (expect 0.7, 1/3, 2); monotonicity violations {violations}/10000",
            a.ratio, b.ratio, c.ratio
        ),
    )
}

// ---------------------------------------------------------------- 7, 8, 9

fn long_config(task: TaskKind, prompt_len: usize, gen_tokens: usize) -> ExperimentConfig {
    ExperimentConfig {
        target_model: "copy".into(),
        draft_model: "derived".into(),
        task,
        prompt_len,
        gen_tokens,
        max_pos: prompt_len + gen_tokens + 16,
        chunk_size: 32,
        top_k: 32,
        frequency: 4,
        sink: 4,
        recent: 1020,
        temperature: 0.0,
        ..ExperimentConfig::default()
    }
}

const POLICIES: [PolicyKind; 3] = [PolicyKind::Full, PolicyKind::Streaming, PolicyKind::Retrieval];

fn compare(cfg: &ExperimentConfig) -> Vec<Experiment> {
    let (target, draft) = build_models(cfg).unwrap();
    let prompt = build_prompt(cfg, target.spec().vocab).unwrap();
    run_policies_with(cfg, &POLICIES, &target, &draft, &prompt).unwrap()
}

fn needle_analogue() -> (Outcome, Vec<Experiment>) {
    let runs = compare(&long_config(TaskKind::Needle, 8192, 47));
    let acc: Vec<f64> = runs
        .iter()
        .map(|e| e.report.needle.map_or(0.0, |n| n.accuracy))
        .collect();
    let (full, stream, cmr) = (acc[0], acc[1], acc[2]);
    let pass = cmr >= 2.0 * stream && cmr >= 0.8 * full && cmr > stream;
    let ppl: Vec<String> = runs
        .iter()
        .map(|e| e.report.needle.map_or("n/a".into(), |n| format!("{:.2}", n.ppl)))
        .collect();
    let detail = format!(
        "8K needle: draft accuracy CMR {cmr:.3}, Streaming {stream:.3}, Full {full:.3} (ppl {} / {} / {}); need CMR >= 2x Streaming and >= 0.8x Full",
        ppl[2], ppl[1], ppl[0]
    );
    (outcome(pass, detail), runs)
}

fn draft_ms_per_step(e: &Experiment) -> f64 {
    e.steps().iter().map(|s| s.draft_ms).sum::<f64>() / e.steps().len() as f64
}

fn schema_ok(e: &Experiment) -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    e.write(dir.path()).map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(dir.path().join(REPORT_FILE)).map_err(|e| e.to_string())?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let mut keys: Vec<&str> = v.as_object().ok_or("not an object")?.keys().map(String::as_str).collect();
    keys.sort_unstable();
    let want = [
        "acceptance",
        "config",
        "divergence_by_pos",
        "needle",
        "phase_s",
        "tau",
        "tokens_per_s",
        "total_tokens",
        "wall_s",
    ];
    if keys != want {
        return Err(format!("JSON keys {keys:?}"));
    }
    let mut phases: Vec<&str> = v["phase_s"].as_object().ok_or("phase_s")?.keys().map(String::as_str).collect();
    phases.sort_unstable();
    if phases != ["cache_update", "draft", "prefill", "verify"] {
        return Err(format!("phase keys {phases:?}"));
    }
    let mut acc: Vec<&str> = v["acceptance"].as_object().ok_or("acceptance")?.keys().map(String::as_str).collect();
    acc.sort_unstable();
    if acc != ["easy", "hard"] {
        return Err(format!("acceptance keys {acc:?}"));
    }
    let csv = std::fs::read_to_string(dir.path().join(STEPS_FILE)).map_err(|e| e.to_string())?;
    if csv.lines().next() != Some(CSV_HEADER.join(",").as_str()) {
        return Err("CSV header".into());
    }
    let rows = read_steps(&dir.path().join(STEPS_FILE)).map_err(|e| e.to_string())?;
    if rows.len() != e.steps().len() {
        return Err("CSV row count".into());
    }
    Ok(())
}

fn tau_analogue() -> (Outcome, Vec<Experiment>) {
    let mut lines = Vec::new();
    let mut pass = true;
    let mut all = Vec::new();
    for len in [8192, 16384] {
        let runs = compare(&long_config(TaskKind::Document, len, 128));
        let (full, stream, cmr) = (&runs[0], &runs[1], &runs[2]);
        let ok_tau = cmr.report.tau > stream.report.tau;
        let (dc, df) = (draft_ms_per_step(cmr), draft_ms_per_step(full));
        let ok_time = dc <= df;
        let schema = runs.iter().try_for_each(schema_ok);
        pass &= ok_tau && ok_time && schema.is_ok();
        lines.push(format!(
            "{}K: tau CMR {:.2} > Streaming {:.2} [{}] (Full baseline {:.2}); draft ms/step CMR {dc:.2} <= Full {df:.2} [{}]; schema {}",
            len / 1024,
            cmr.report.tau,
            stream.report.tau,
            if ok_tau { "ok" } else { "no" },
            full.report.tau,
            if ok_time { "ok" } else { "no" },
            schema.map_or_else(|e| format!("BAD ({e})"), |_| "ok".into()),
        ));
        all.extend(runs);
    }
    (outcome(pass, lines.join("; ")), all)
}

fn cache_bound(runs: &[Experiment]) -> Outcome {
    let (chunk, top_k) = (32, 32);
    let bound = chunk * top_k;
    let mut checked = 0;
    let mut worst = 0;
    for e in runs.iter().filter(|e| e.config.policy == PolicyKind::Retrieval) {
        for s in e.steps().iter().filter(|s| s.retrieval_update) {
            checked += 1;
            worst = worst.max(s.draft_prefix_len);
        }
    }
    // cache-level sweep across document lengths, with a sink
    let mut rng = Rng::new(99);
    let mut sweep_worst = 0;
    let mut sweep_updates = 0;
    for &n in &[64usize, 1000, 1024, 1025, 4096, 8192, 12_345, 16_384] {
        let mut cache = LayerKVCache::new(1, 1, 2);
        let rows = vec![LayerRows {
            keys: vec![0.5; 2 * n],
            values: vec![0.25; 2 * n],
        }];
        cache.append(&rows, &(0..n).collect::<Vec<_>>()).unwrap();
        cache.mark_prefix_end();
        let mut st = RetrievalState::new(chunk, top_k, 1).unwrap();
        for _ in 0..5 {
            let raw: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            let total: f64 = raw.iter().sum();
            let s: Vec<f64> = raw.iter().map(|x| x / total).collect();
            st.maybe_update(Some(&s), &mut cache).unwrap();
            sweep_updates += 1;
            sweep_worst = sweep_worst.max(cache.prefix_len());
            cache.check_invariants().unwrap();
        }
    }
    outcome(
        checked > 0 && worst <= bound && sweep_worst <= bound,
        format!(
            "bound {bound}: max draft prefix after {checked} engine updates = {worst}; after {sweep_updates} cache updates over lengths 64..16384 = {sweep_worst}"
        ),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut record = |id: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        println!(
            "criterion {id} {} {name}: {} [{secs:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((id, name, o, secs));
    };
    record(1, "greedy losslessness", &mut greedy_losslessness);
    record(2, "stochastic losslessness", &mut stochastic_losslessness);
    record(3, "hybrid attention equivalence", &mut hybrid_equivalence);
    record(4, "incremental KV correctness", &mut incremental_correctness);
    record(5, "retrieval selection oracle", &mut selection_oracle);
    record(6, "speedup calculator", &mut speedup_calculator);
    let mut long_runs = Vec::new();
    record(7, "needle accuracy analogue", &mut || {
        let (o, runs) = needle_analogue();
        long_runs.extend(runs);
        o
    });
    record(8, "acceptance length analogue", &mut || {
        let (o, runs) = tau_analogue();
        long_runs.extend(runs);
        o
    });
    record(9, "working cache bound", &mut || cache_bound(&long_runs));
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("all 9 criteria passed");
    } else {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
