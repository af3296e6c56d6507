use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use spex_core::engine::{generate, write_trace, ExitPolicy};
use spex_core::metrics::TreeSummary;
use spex_core::model::load_weights;
use spex_core::pipeline::{
    Pipeline, PipelineConfig, SampleConfig, Stage, StageOutcome, DRAFT_WEIGHTS, PREDICTORS,
    PROFILE, TARGET_WEIGHTS,
};
use spex_core::predictor::{load_predictors, predictor_param_count, PredictorBank};
use spex_core::scheduler::{load_profile, OfflineProfile, Scheduler};
use spex_core::tree::{tree_generate, TreeConfig};
use spex_core::{corpus, engine, Execution, TransformerModel};

#[derive(Parser)]
#[command(
    name = "spex",
    version,
    about = "Speculative early-exit decoding on toy transformers"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline config (JSON). Defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Derive every stage seed from this value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "spex-out")]
    out: PathBuf,
    /// Run everything on one thread.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the target model.
    TrainModel,
    /// Train the draft model.
    TrainDraft,
    /// Collect exit labels and train one predictor per layer.
    TrainPredictors,
    /// Count verified exits per layer with all predictors active.
    Profile,
    /// Score early-exit generation on the evaluation corpora.
    Bench,
    /// Run every stage in order, skipping those already current.
    Run,
    /// Generate from a prompt with early exit.
    Generate(GenerateArgs),
    /// Generate from a prompt with tree speculative decoding and early exit.
    TreeGenerate(TreeArgs),
    /// Exhaustive exit-layer oracle over the evaluation corpora.
    Oracle,
    /// Describe an artifact file.
    Inspect { file: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Predictors,
    Oracle,
    Never,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleArg {
    AllLayers,
    TwoLevel,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 64)]
    max_new: usize,
    #[arg(long, value_enum, default_value = "predictors")]
    policy: PolicyArg,
    #[arg(long, value_enum, default_value = "two-level")]
    schedule: ScheduleArg,
    /// Write per-token records as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct TreeArgs {
    #[command(flatten)]
    generate: GenerateArgs,
    /// Children per depth, e.g. 3,2.
    #[arg(long, value_delimiter = ',', default_value = "2,2")]
    branching: Vec<usize>,
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            PipelineConfig::load(path).with_context(|| format!("loading {}", path.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.reseed(seed);
    }
    if common.sequential {
        cfg.execution = Execution::Sequential;
    }
    Ok(cfg)
}

fn report_outcomes(outcomes: &[StageOutcome]) {
    for o in outcomes {
        if o.skipped {
            println!("{:<17} up to date", o.stage.name());
        } else {
            println!("{:<17} done in {:.1}s", o.stage.name(), o.seconds);
        }
    }
}

fn run_stage(common: &Common, stage: Stage) -> Result<()> {
    let mut pipeline = Pipeline::open(load_config(common)?, &common.out)?;
    let outcome = pipeline.run(stage)?;
    report_outcomes(&[outcome]);
    if stage == Stage::Bench {
        print!(
            "{}",
            fs::read_to_string(pipeline.artifact(spex_core::pipeline::BENCH_TABLE))?
        );
    }
    Ok(())
}

struct Loaded {
    cfg: PipelineConfig,
    target: TransformerModel,
    draft: TransformerModel,
}

fn load_models(common: &Common) -> Result<Loaded> {
    let cfg = load_config(common)?;
    let load = |name: &str| {
        let path = common.out.join(name);
        load_weights(&path).with_context(|| format!("loading {}", path.display()))
    };
    Ok(Loaded {
        target: load(TARGET_WEIGHTS)?,
        draft: load(DRAFT_WEIGHTS)?,
        cfg,
    })
}

fn policy_and_scheduler(
    common: &Common,
    l: &Loaded,
    args: &GenerateArgs,
) -> Result<(ExitPolicy, Scheduler)> {
    let policy = match args.policy {
        PolicyArg::Predictors => {
            ExitPolicy::Predictors(load_predictors(common.out.join(PREDICTORS))?)
        }
        PolicyArg::Oracle => ExitPolicy::Oracle,
        PolicyArg::Never => ExitPolicy::Constant(0.0),
    };
    let scheduler = match args.schedule {
        ScheduleArg::AllLayers => Scheduler::all_layers(l.target.num_layers()),
        ScheduleArg::TwoLevel => {
            let profile = load_profile(common.out.join(PROFILE), l.target.fingerprint())?;
            Scheduler::two_level(profile, l.cfg.schedule)?
        }
    };
    Ok((policy, scheduler))
}

fn prompt_tokens(prompt: &str) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        bail!("prompt must not be empty");
    }
    Ok(corpus::tokens(prompt.as_bytes()))
}

fn show(tokens: &[u32]) -> String {
    String::from_utf8_lossy(&tokens.iter().map(|&t| t as u8).collect::<Vec<_>>()).into_owned()
}

fn cmd_generate(common: &Common, args: &GenerateArgs) -> Result<()> {
    let l = load_models(common)?;
    let (policy, scheduler) = policy_and_scheduler(common, &l, args)?;
    let prompt = prompt_tokens(&args.prompt)?;
    let trace = generate(
        &l.target,
        &l.draft,
        &policy,
        scheduler,
        l.cfg.engine,
        &prompt,
        args.max_new,
    )?;
    println!("{}", show(&trace.tokens));
    let n = trace.records.len() as f64;
    let avg = trace
        .records
        .iter()
        .map(|r| r.exit_layer as f64)
        .sum::<f64>()
        / n;
    let early = trace.records.iter().filter(|r| r.verified).count();
    eprintln!(
        "{} tokens, {early} early exits, average exit layer {avg:.3}",
        trace.records.len()
    );
    if let Some(path) = &args.trace {
        let mut out = BufWriter::new(File::create(path)?);
        write_trace(&trace.records, &mut out)?;
        out.flush()?;
    }
    Ok(())
}

fn cmd_tree_generate(common: &Common, args: &TreeArgs) -> Result<()> {
    let l = load_models(common)?;
    let g = &args.generate;
    let (policy, scheduler) = policy_and_scheduler(common, &l, g)?;
    let prompt = prompt_tokens(&g.prompt)?;
    let cfg = TreeConfig {
        branching: args.branching.clone(),
        engine: l.cfg.engine,
        execution: l.cfg.execution,
    };
    let trace = tree_generate(
        &l.target, &l.draft, &policy, scheduler, cfg, &prompt, g.max_new,
    )?;
    println!("{}", show(&trace.tokens));
    let s = TreeSummary::from_steps(&args.branching, &trace.steps)?;
    eprintln!(
        "{} steps, {:.3} accepted per step, average exit layer {:.3}, {} predictor evals (bound {})",
        s.steps, s.mean_accepted_len, s.avg_exit_layer, s.predictor_evals, s.eval_bound
    );
    if let Some(path) = &g.trace {
        let mut out = BufWriter::new(File::create(path)?);
        for step in &trace.steps {
            let record = serde_json::json!({
                "branching": step.branching,
                "accepted_len": step.accepted_tokens.len(),
                "accepted_tokens": step.accepted_tokens,
                "correction_token": step.correction_token,
                "exit_layer": step.exit_layer,
                "path_fired": step.path_fired,
                "predictor_evals": step.predictor_evals,
            });
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
    }
    Ok(())
}

fn cmd_oracle(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let path = common.out.join(TARGET_WEIGHTS);
    let target = load_weights(&path).with_context(|| format!("loading {}", path.display()))?;
    let SampleConfig {
        num_prompts,
        prompt_len,
        gen_len,
    } = cfg.bench;
    let l = target.num_layers();
    for c in &cfg.eval_corpora {
        let bytes = fs::read(&c.path).with_context(|| format!("reading {}", c.path.display()))?;
        let prompts = corpus::prompts(&bytes, prompt_len, num_prompts)?;
        let tables = cfg
            .execution
            .map(&prompts, |p| -> spex_core::Result<Vec<Vec<usize>>> {
                let tokens = engine::greedy_generate(&target, p, gen_len)?;
                let mut seq = p.clone();
                seq.extend_from_slice(&tokens[..tokens.len() - 1]);
                engine::position_layer_argmaxes(&target, &seq, p.len() - 1)
            });
        let mut histogram = vec![0u64; l];
        for table in tables {
            for row in table? {
                let fin = row[l - 1];
                histogram[row
                    .iter()
                    .position(|&a| a == fin)
                    .expect("final layer agrees")] += 1;
            }
        }
        let total: u64 = histogram.iter().sum();
        let avg = histogram
            .iter()
            .enumerate()
            .map(|(i, c)| i as f64 * *c as f64)
            .sum::<f64>()
            / total as f64;
        let line = serde_json::json!({ "dataset": c.name, "tokens": total, "oracle_avg_exit_layer": avg, "histogram": histogram });
        println!("{line}");
    }
    Ok(())
}

fn cmd_inspect(file: &Path) -> Result<()> {
    let bytes = fs::read(file).with_context(|| format!("reading {}", file.display()))?;
    let summary = match bytes.get(..4) {
        Some(b"SPXW") => {
            let m = TransformerModel::from_bytes(&bytes)?;
            serde_json::json!({
                "kind": "weights",
                "config": m.config(),
                "parameters": m.parameter_count(),
                "fingerprint": format!("{:016x}", m.fingerprint()),
            })
        }
        Some(b"SPXP") => {
            let bank = PredictorBank::from_bytes(&bytes)?;
            let fp = predictor_param_count(bank.k, bank.hidden_dim, bank.predictors.len());
            serde_json::json!({
                "kind": "predictors",
                "k": bank.k,
                "hidden_dim": bank.hidden_dim,
                "layers": bank.layers().collect::<Vec<_>>(),
                "total_params": fp.total_params,
                "half_precision_kib": fp.half_precision_kib(),
                "f32_kib": fp.f32_kib(),
            })
        }
        Some(b"SPXS") => {
            let p = OfflineProfile::from_bytes(&bytes)?;
            serde_json::json!({
                "kind": "profile",
                "exit_counts": p.exit_counts,
                "ranked_layers": p.ranked_layers,
                "model_fingerprint": format!("{:016x}", p.model_fingerprint),
            })
        }
        _ => bail!(
            "{} is not a weight, predictor or profile file",
            file.display()
        ),
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match &cli.command {
        Command::TrainModel => run_stage(common, Stage::TrainModel),
        Command::TrainDraft => run_stage(common, Stage::TrainDraft),
        Command::TrainPredictors => run_stage(common, Stage::TrainPredictors),
        Command::Profile => run_stage(common, Stage::Profile),
        Command::Bench => run_stage(common, Stage::Bench),
        Command::Run => {
            let mut pipeline = Pipeline::open(load_config(common)?, &common.out)?;
            report_outcomes(&pipeline.run_all()?);
            print!(
                "{}",
                fs::read_to_string(pipeline.artifact(spex_core::pipeline::BENCH_TABLE))?
            );
            Ok(())
        }
        Command::Generate(args) => cmd_generate(common, args),
        Command::TreeGenerate(args) => cmd_tree_generate(common, args),
        Command::Oracle => cmd_oracle(common),
        Command::Inspect { file } => cmd_inspect(file),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
