//! Acceptance run: trains the default pipeline, checks every criterion and
//! prints one PASS/FAIL line per criterion. Exits non-zero if any fails.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use spex_core::engine::{
    generate, greedy_generate, layer_argmaxes, oracle_exit_layer, EngineConfig, ExitPolicy,
};
use spex_core::metrics::BenchReport;
use spex_core::model::load_weights;
use spex_core::pipeline::{bench_datasets, Pipeline, PipelineConfig, SampleConfig};
use spex_core::predictor::{
    load_predictors, predictor_param_count, train_on_vectors, MlpF64, PredictorBank,
    PredictorTrainConfig, PredictorWeights,
};
use spex_core::rng::SplitMix64;
use spex_core::scheduler::{
    active_layers, load_profile, OfflineProfile, OnlineState, ScheduleConfig, Scheduler,
};
use spex_core::speculation::{build_token_tree, enumerate_paths};
use spex_core::tree::{
    grouped_speculative_logits, hypertoken_oracle_exit, TreeConfig, TreeSession,
};
use spex_core::{corpus, ModelConfig, TokenId, TransformerModel};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn config() -> PipelineConfig {
    PipelineConfig::load(fixtures().join("pipeline.json")).expect("shipped pipeline config")
}

/// Artifacts of one full pipeline run.
struct Trained {
    dir: tempfile::TempDir,
    cfg: PipelineConfig,
    target: TransformerModel,
    draft: TransformerModel,
    bank: PredictorBank,
    profile: OfflineProfile,
    report: BenchReport,
    eval_prompts: Vec<(String, Vec<Vec<TokenId>>)>,
}

fn train() -> Trained {
    let cfg = config();
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    Pipeline::open(cfg.clone(), dir.path())
        .unwrap()
        .run_all()
        .unwrap();
    println!("pipeline trained in {:.1}s", start.elapsed().as_secs_f64());
    let target = load_weights(dir.path().join("target.spxw")).unwrap();
    let draft = load_weights(dir.path().join("draft.spxw")).unwrap();
    let bank = load_predictors(dir.path().join("predictors.spxp")).unwrap();
    let profile = load_profile(dir.path().join("profile.spxs"), target.fingerprint()).unwrap();
    let report = serde_json::from_slice(&fs::read(dir.path().join("bench.json")).unwrap()).unwrap();
    let eval_prompts = prompts_for(&cfg, cfg.bench);
    Trained {
        dir,
        cfg,
        target,
        draft,
        bank,
        profile,
        report,
        eval_prompts,
    }
}

fn prompts_for(cfg: &PipelineConfig, sample: SampleConfig) -> Vec<(String, Vec<Vec<TokenId>>)> {
    cfg.eval_corpora
        .iter()
        .map(|c| {
            let bytes = fs::read(&c.path).unwrap();
            (
                c.name.clone(),
                corpus::prompts(&bytes, sample.prompt_len, sample.num_prompts).unwrap(),
            )
        })
        .collect()
}

fn rel_close(a: f32, b: f32, tol: f32) -> bool {
    a == b || (a - b).abs() <= tol * b.abs()
}

fn slice_group_equivalence() -> Check {
    let model = TransformerModel::init(ModelConfig::target()).unwrap();
    let mut rng = SplitMix64::new(101);
    let start = Instant::now();
    let v = model.vocab_size();
    let cases: Vec<(Vec<f32>, Vec<TokenId>)> = (0..1000)
        .map(|_| {
            let h: Vec<f32> = (0..model.hidden_dim())
                .map(|_| rng.normal() as f32 * 2.0)
                .collect();
            let k = 1 + rng.below(8);
            let ids: Vec<TokenId> = (0..k).map(|_| rng.below(v) as TokenId).collect();
            (h, ids)
        })
        .collect();
    let mut worst = 0f32;
    for chunk in cases.chunks(50) {
        let hidden: Vec<&[f32]> = chunk.iter().map(|(h, _)| h.as_slice()).collect();
        let ids: Vec<&[TokenId]> = chunk.iter().map(|(_, i)| i.as_slice()).collect();
        let grouped = grouped_speculative_logits(&model, &hidden, &ids, Default::default())
            .map_err(|e| e.to_string())?;
        for ((h, ids), g) in chunk.iter().zip(&grouped) {
            let full = model.full_head_logits(h).map_err(|e| e.to_string())?;
            let sliced = model
                .sliced_head_logits(h, ids)
                .map_err(|e| e.to_string())?;
            for (j, &id) in ids.iter().enumerate() {
                let want = full[id as usize];
                for got in [sliced[j], g[j]] {
                    ensure(
                        rel_close(got, want, 1e-6),
                        format!("token {id}: {got} vs {want}"),
                    )?;
                    if want != 0.0 {
                        worst = worst.max((got - want).abs() / want.abs());
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 10.0, format!("took {secs:.2}s"))?;
    Ok(format!(
        "1000 cases, worst relative error {worst:.1e}, {secs:.2}s"
    ))
}

fn oracle_losslessness(t: &Trained) -> Check {
    let sample = SampleConfig {
        num_prompts: 8,
        prompt_len: 32,
        gen_len: 128,
    };
    let cfg = EngineConfig {
        full_vocab: true,
        ..EngineConfig::default()
    };
    let mut total = 0;
    for (_, prompts) in prompts_for(&t.cfg, sample) {
        for p in &prompts {
            let sched = Scheduler::all_layers(t.target.num_layers());
            let trace = generate(
                &t.target,
                &t.draft,
                &ExitPolicy::Oracle,
                sched,
                cfg,
                p,
                sample.gen_len,
            )
            .map_err(|e| e.to_string())?;
            let greedy =
                greedy_generate(&t.target, p, sample.gen_len).map_err(|e| e.to_string())?;
            ensure(
                trace.tokens == greedy,
                "oracle stream diverged from greedy decoding",
            )?;
            total += greedy.len();
        }
    }
    ensure(total >= 2000, format!("only {total} tokens"))?;
    Ok(format!("{total} tokens identical to greedy decoding"))
}

fn verification_soundness(t: &Trained) -> Check {
    let sched =
        Scheduler::two_level(t.profile.clone(), t.cfg.schedule).map_err(|e| e.to_string())?;
    let policy = ExitPolicy::Predictors(t.bank.clone());
    let run = bench_datasets(
        &t.target,
        &t.draft,
        &policy,
        &sched,
        t.cfg.engine,
        t.cfg.schedule,
        &t.eval_prompts,
        t.cfg.bench.gen_len,
        Default::default(),
    )
    .map_err(|e| e.to_string())?;
    let counts = |r: &BenchReport| -> Vec<(u64, u64, u64)> {
        r.rows
            .iter()
            .map(|d| (d.tokens, d.predictor_evals, d.full_head_projections))
            .collect()
    };
    ensure(
        counts(&run.report) == counts(&t.report),
        "re-run bench differs from the pipeline report",
    )?;
    let mut checked = 0;
    for (_, traces) in &run.traces {
        for trace in traces {
            let mut ctx = trace.prompt.clone();
            for r in &trace.records {
                ensure(
                    !r.verified || r.predictor_fired,
                    "verified without a firing predictor",
                )?;
                if r.verified {
                    let argmaxes = layer_argmaxes(&t.target, &ctx).map_err(|e| e.to_string())?;
                    ensure(
                        argmaxes[r.exit_layer] == r.token as usize,
                        format!("token {} at layer {}", r.token, r.exit_layer),
                    )?;
                    checked += 1;
                }
                ctx.push(r.token);
            }
        }
    }
    // Tree steps that exit early commit layer argmaxes too.
    let mut tree_checked = 0;
    let tree_cfg = TreeConfig {
        branching: vec![3, 2],
        engine: t.cfg.engine,
        execution: Default::default(),
    };
    for (_, prompts) in &t.eval_prompts {
        for p in prompts.iter().take(4) {
            let mut s = TreeSession::new(
                &t.target,
                &t.draft,
                &policy,
                sched.clone(),
                tree_cfg.clone(),
            )
            .map_err(|e| e.to_string())?;
            s.start(p).map_err(|e| e.to_string())?;
            for _ in 0..16 {
                let mut ctx = s.context().to_vec();
                let step = s.step().map_err(|e| e.to_string())?;
                if step.exit_path.is_none() {
                    continue;
                }
                for tok in step.committed() {
                    let argmaxes = layer_argmaxes(&t.target, &ctx).map_err(|e| e.to_string())?;
                    ensure(
                        argmaxes[step.exit_layer] == tok as usize,
                        "tree token is not the exit-layer argmax",
                    )?;
                    tree_checked += 1;
                    ctx.push(tok);
                }
            }
        }
    }
    ensure(checked > 0 && tree_checked > 0, "no early exits to check")?;
    Ok(format!(
        "{checked} early-exited tokens and {tree_checked} tree tokens rechecked"
    ))
}

fn memory_formula() -> Check {
    let fp = predictor_param_count(4, 512, 32);
    ensure(
        fp.params_per_layer == 6656,
        format!("{} params per layer", fp.params_per_layer),
    )?;
    ensure(
        fp.half_precision_kib() == 416.0,
        format!("{} KiB", fp.half_precision_kib()),
    )?;
    Ok(format!(
        "{} params, {} KiB at 2 bytes ({} KiB at 4 bytes)",
        fp.total_params,
        fp.half_precision_kib(),
        fp.f32_kib()
    ))
}

fn scheduler_equivalence() -> Check {
    let l = 32;
    let cfg = ScheduleConfig::default();
    let mut rng = SplitMix64::new(55);
    let counts: Vec<u64> = (0..l).map(|_| rng.below(100) as u64).collect();
    let profile = OfflineProfile::from_counts(counts, 0).map_err(|e| e.to_string())?;
    let mut state = OnlineState::new(l, &cfg);
    let mut largest = 0;
    for step in 0..10_000 {
        let exit = if rng.below(4) == 0 {
            l - 1
        } else {
            rng.below(l)
        };
        state.update(exit).map_err(|e| e.to_string())?;
        ensure(
            state.neighbor_counts() == state.recompute().as_slice(),
            format!("step {step}: incremental counts drifted"),
        )?;
        let active = active_layers(&profile, &state, &cfg);
        ensure(
            active.len() <= cfg.union_bound(),
            format!("step {step}: {} active layers", active.len()),
        )?;
        ensure(
            active.windows(2).all(|w| w[0] < w[1]) && active.iter().all(|&a| a < l - 1),
            "unordered or out of range",
        )?;
        largest = largest.max(active.len());
    }
    Ok(format!(
        "10000 updates, largest active set {largest} (bound {})",
        cfg.union_bound()
    ))
}

fn rearmost_semantics(t: &Trained) -> Check {
    let bytes = fs::read(&t.cfg.train_corpus).unwrap();
    let mut rng = SplitMix64::new(77);
    let mut paths_checked = 0;
    for _ in 0..200 {
        let len = 8 + rng.below(40);
        let start = rng.below(bytes.len() - len);
        let ctx = corpus::tokens(&bytes[start..start + len]);
        let depth = 1 + rng.below(3);
        let branching: Vec<usize> = (0..depth).map(|_| 1 + rng.below(3)).collect();
        let tree = build_token_tree(&t.draft, &ctx, &branching).map_err(|e| e.to_string())?;
        for path in enumerate_paths(&tree) {
            let tokens = tree.path_tokens(*path.last().unwrap());
            let mut prefix = ctx.clone();
            let mut per_node = Vec::new();
            for &tok in &tokens {
                prefix.push(tok);
                per_node.push(oracle_exit_layer(&t.target, &prefix).map_err(|e| e.to_string())?);
            }
            let got =
                hypertoken_oracle_exit(&t.target, &ctx, &tokens).map_err(|e| e.to_string())?;
            ensure(
                got == *per_node.iter().max().unwrap(),
                format!("{got} vs node oracles {per_node:?}"),
            )?;
            paths_checked += 1;
        }
    }
    Ok(format!("200 trees, {paths_checked} paths"))
}

fn mapping_bound(t: &Trained) -> Check {
    let sched =
        Scheduler::two_level(t.profile.clone(), t.cfg.schedule).map_err(|e| e.to_string())?;
    let policy = ExitPolicy::Predictors(t.bank.clone());
    let prompt = &t.eval_prompts[0].1[0];
    let mut steps = 0;
    for branching in [vec![3, 2], vec![2, 2, 2], vec![4]] {
        let cfg = TreeConfig {
            branching,
            engine: t.cfg.engine,
            execution: Default::default(),
        };
        let mut s = TreeSession::new(&t.target, &t.draft, &policy, sched.clone(), cfg)
            .map_err(|e| e.to_string())?;
        s.start(prompt).map_err(|e| e.to_string())?;
        for _ in 0..20 {
            let step = s.step().map_err(|e| e.to_string())?;
            let bound = step.num_paths * step.active_layers.len() * step.max_path_len;
            ensure(
                step.predictor_evals <= bound,
                format!("{} evals > bound {bound}", step.predictor_evals),
            )?;
            steps += 1;
        }
    }
    // Depth growth at branching 2 with every layer scheduled and no exits.
    let never = ExitPolicy::Constant(0.0);
    let mut counters = Vec::new();
    for d in 1..=5 {
        let cfg = TreeConfig {
            branching: vec![2; d],
            engine: t.cfg.engine,
            execution: Default::default(),
        };
        let mut s = TreeSession::new(
            &t.target,
            &t.draft,
            &never,
            Scheduler::all_layers(t.target.num_layers()),
            cfg,
        )
        .map_err(|e| e.to_string())?;
        s.start(prompt).map_err(|e| e.to_string())?;
        let step = s.step().map_err(|e| e.to_string())?;
        counters.push((step.predictor_evals as f64, step.num_paths as f64));
    }
    for d in 1..counters.len() {
        let (c0, p0) = counters[d - 1];
        let (c1, p1) = counters[d];
        let limit = (p1 / p0) * (d as f64 + 1.0) / d as f64;
        ensure(
            c1 / c0 <= limit,
            format!("depth {d}->{}: ratio {:.3} > {limit:.3}", d + 1, c1 / c0),
        )?;
    }
    let evals: Vec<u64> = counters.iter().map(|c| c.0 as u64).collect();
    Ok(format!(
        "{steps} trained steps within bound; evals by depth 1..5: {evals:?}"
    ))
}

fn predictor_trainability() -> Check {
    let mut rng = SplitMix64::new(31);
    let w: Vec<f32> = (0..12).map(|_| rng.normal() as f32).collect();
    let inputs: Vec<Vec<f32>> = (0..600)
        .map(|_| (0..12).map(|_| rng.normal() as f32).collect())
        .collect();
    let labels: Vec<bool> = inputs
        .iter()
        .map(|x| x.iter().zip(&w).map(|(a, b)| a * b).sum::<f32>() > 0.0)
        .collect();
    let cfg = PredictorTrainConfig {
        hidden_dim: 32,
        epochs: 200,
        ..PredictorTrainConfig::default()
    };
    let (_, report) = train_on_vectors(&inputs, &labels, &cfg).map_err(|e| e.to_string())?;
    ensure(
        report.train_accuracy >= 0.95,
        format!("accuracy {:.4}", report.train_accuracy),
    )?;

    let mut worst = 0f64;
    for i in 0..20 {
        let mut mlp = MlpF64::from_weights(&PredictorWeights::init(12, 8, 1000 + i));
        let mut flat = mlp.flat();
        for v in &mut flat {
            *v += rng.normal() * 0.05;
        }
        mlp.set_flat(&flat);
        let xs: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..12).map(|_| rng.normal()).collect())
            .collect();
        let ys: Vec<bool> = (0..6).map(|_| rng.below(2) == 1).collect();
        let ws: Vec<f64> = (0..6).map(|_| 0.5 + rng.next_f32() as f64).collect();
        let analytic = mlp.gradient(&xs, &ys, &ws).flat();
        let h = 1e-6;
        let mut probe = mlp.clone();
        let numeric: Vec<f64> = (0..flat.len())
            .map(|j| {
                let mut p = flat.clone();
                p[j] += h;
                probe.set_flat(&p);
                let up = probe.loss(&xs, &ys, &ws);
                p[j] -= 2.0 * h;
                probe.set_flat(&p);
                let down = probe.loss(&xs, &ys, &ws);
                (up - down) / (2.0 * h)
            })
            .collect();
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        let rel = diff / norm;
        ensure(
            rel <= 1e-4,
            format!("instance {i}: relative gradient error {rel:.2e}"),
        )?;
        worst = worst.max(rel);
    }
    Ok(format!(
        "train accuracy {:.4} after {} epochs; 20 gradient checks, worst relative error {worst:.1e}",
        report.train_accuracy, cfg.epochs
    ))
}

fn exit_trend(t: &Trained) -> Check {
    let o = &t.report.overall;
    let last = (t.report.num_layers - 1) as f64;
    let rows: Vec<String> = t
        .report
        .rows
        .iter()
        .map(|r| {
            format!(
                "{} {:.3}/{:.3}/{:.4}",
                r.name, r.avg_exit_layer, r.oracle_avg_exit_layer, r.agreement
            )
        })
        .collect();
    let detail = format!(
        "avg exit {:.3}, oracle {:.3}, agreement {:.4} (exit/oracle/agreement: {})",
        o.avg_exit_layer,
        o.oracle_avg_exit_layer,
        o.agreement,
        rows.join(", ")
    );
    ensure(
        o.avg_exit_layer < last,
        format!("average exit not below {last}: {detail}"),
    )?;
    ensure(
        (o.avg_exit_layer - o.oracle_avg_exit_layer).abs() <= 2.5,
        format!("too far from the oracle: {detail}"),
    )?;
    ensure(
        o.agreement >= 0.90,
        format!("agreement below 0.90: {detail}"),
    )?;
    Ok(detail)
}

fn context_similarity(t: &Trained) -> Check {
    let o = &t.report.overall;
    let (hit, base, ratio) = match (o.context_hit_rate, o.context_base_rate, o.context_ratio) {
        (Some(h), Some(b), Some(r)) => (h, b, r),
        _ => return Err("no online sets recorded".into()),
    };
    let detail = format!("hit rate {hit:.4}, uniform base rate {base:.4}, ratio {ratio:.4}");
    ensure(ratio > 1.2, detail.clone())?;
    Ok(detail)
}

fn determinism(t: &Trained) -> Check {
    let other = tempfile::tempdir().unwrap();
    Pipeline::open(config(), other.path())
        .unwrap()
        .run_all()
        .map_err(|e| e.to_string())?;
    let files = [
        "target.spxw",
        "draft.spxw",
        "predictors.spxp",
        "profile.spxs",
        "bench.json",
        "bench.jsonl",
        "bench.txt",
    ];
    for f in files {
        let a = fs::read(t.dir.path().join(f)).map_err(|e| e.to_string())?;
        let b = fs::read(other.path().join(f)).map_err(|e| e.to_string())?;
        ensure(a == b, format!("{f} differs between runs"))?;
    }
    Ok(format!(
        "{} artifacts byte-identical across two runs",
        files.len()
    ))
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default())
    });
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("criterion {n:>2} {name}: PASS ({detail}) [{secs:.1}s]");
            true
        }
        Err(detail) => {
            println!("criterion {n:>2} {name}: FAIL ({detail}) [{secs:.1}s]");
            false
        }
    }
}

fn main() {
    let trained = train();
    let mut ok = true;
    ok &= run(1, "slice/group equivalence", slice_group_equivalence);
    ok &= run(2, "oracle losslessness", || oracle_losslessness(&trained));
    ok &= run(3, "verification soundness", || {
        verification_soundness(&trained)
    });
    ok &= run(4, "predictor memory formula", memory_formula);
    ok &= run(5, "scheduler equivalence", scheduler_equivalence);
    ok &= run(6, "rearmost semantics", || rearmost_semantics(&trained));
    ok &= run(7, "mapping-complexity bound", || mapping_bound(&trained));
    ok &= run(8, "predictor trainability", predictor_trainability);
    ok &= run(9, "exit-layer trend", || exit_trend(&trained));
    ok &= run(10, "context similarity", || context_similarity(&trained));
    ok &= run(11, "pipeline determinism", || determinism(&trained));
    if !ok {
        std::process::exit(1);
    }
}
