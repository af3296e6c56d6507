//! End-to-end runs: train target and draft, train predictors, profile, bench.
//!
//! Each stage writes its artifacts into one output directory and records a
//! key in `manifest.json`: a hash of the stage's configuration and of every
//! input file it read. A stage whose key and outputs are unchanged is
//! skipped, so re-running an identical configuration does nothing.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus;
use crate::engine::{generate, EngineConfig, ExitPolicy, GenerationTrace};
use crate::error::{Error, Result};
use crate::metrics::{reference_argmaxes, BenchReport, Tally, TreeSummary};
use crate::model::{
    fingerprint_bytes, save_weights, LmTrainConfig, ModelConfig, TokenId, TransformerModel,
};
use crate::par::Execution;
use crate::predictor::{
    collect_training_data, group_by_layer, train_predictor_bank, CollectConfig, PredictorBank,
    PredictorTrainConfig,
};
use crate::rng::SplitMix64;
use crate::scheduler::{
    profile_offline, save_profile, OfflineProfile, ScheduleConfig, ScheduleMode, Scheduler,
};
use crate::tree::{tree_generate, TreeConfig};

pub const TARGET_WEIGHTS: &str = "target.spxw";
pub const DRAFT_WEIGHTS: &str = "draft.spxw";
pub const PREDICTORS: &str = "predictors.spxp";
pub const PROFILE: &str = "profile.spxs";
pub const BENCH_JSON: &str = "bench.json";
pub const BENCH_JSONL: &str = "bench.jsonl";
pub const BENCH_TABLE: &str = "bench.txt";
pub const TIMING: &str = "timing.json";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedCorpus {
    pub name: String,
    pub path: PathBuf,
}

/// Prompts cut from a corpus and the number of tokens generated after each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub num_prompts: usize,
    pub prompt_len: usize,
    pub gen_len: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            num_prompts: 8,
            prompt_len: 32,
            gen_len: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeBenchConfig {
    pub branching: Vec<usize>,
    /// Prompts per evaluation corpus; zero skips tree decoding.
    pub num_prompts: usize,
    pub prompt_len: usize,
    pub gen_len: usize,
}

impl Default for TreeBenchConfig {
    fn default() -> Self {
        Self {
            branching: vec![2, 2],
            num_prompts: 4,
            prompt_len: 32,
            gen_len: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub train_corpus: PathBuf,
    pub eval_corpora: Vec<NamedCorpus>,
    pub target: ModelConfig,
    pub draft: ModelConfig,
    pub target_training: LmTrainConfig,
    pub draft_training: LmTrainConfig,
    pub collect: CollectConfig,
    pub predictor: PredictorTrainConfig,
    pub profile: SampleConfig,
    pub schedule: ScheduleConfig,
    pub schedule_mode: ScheduleMode,
    pub engine: EngineConfig,
    pub bench: SampleConfig,
    pub tree: TreeBenchConfig,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let corpus = |name: &str| NamedCorpus {
            name: name.into(),
            path: PathBuf::from(format!("corpus/{name}.txt")),
        };
        Self {
            train_corpus: PathBuf::from("corpus/train.txt"),
            eval_corpora: vec![corpus("stories"), corpus("dialog")],
            target: ModelConfig::target(),
            draft: ModelConfig::draft(),
            target_training: LmTrainConfig::default(),
            draft_training: LmTrainConfig {
                seed: 18,
                ..LmTrainConfig::default()
            },
            collect: CollectConfig {
                num_prompts: 256,
                ..CollectConfig::default()
            },
            predictor: PredictorTrainConfig::default(),
            profile: SampleConfig {
                num_prompts: 32,
                ..SampleConfig::default()
            },
            schedule: ScheduleConfig::default(),
            schedule_mode: ScheduleMode::TwoLevel,
            engine: EngineConfig::default(),
            bench: SampleConfig::default(),
            tree: TreeBenchConfig::default(),
            execution: Execution::default(),
        }
    }
}

impl PipelineConfig {
    /// Reads a JSON config. Relative corpus paths resolve against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => e.into(),
        })?;
        let mut cfg: Self = serde_json::from_str(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.train_corpus);
        for c in &mut self.eval_corpora {
            fix(&mut c.path);
        }
    }

    /// Replaces every stage seed with one derived from `seed`.
    pub fn reseed(&mut self, seed: u64) {
        let stage = |i: u64| SplitMix64::fork(seed, i).next_u64();
        self.target.seed = stage(1);
        self.draft.seed = stage(2);
        self.target_training.seed = stage(3);
        self.draft_training.seed = stage(4);
        self.predictor.seed = stage(5);
    }

    pub fn validate(&self) -> Result<()> {
        self.target.validate()?;
        self.draft.validate()?;
        if self.draft.vocab_size != self.target.vocab_size {
            return Err(Error::InvalidConfig(
                "draft and target vocabularies differ".into(),
            ));
        }
        if self.collect.k != self.engine.k {
            return Err(Error::InvalidConfig(format!(
                "predictors collected with k = {} but the engine uses k = {}",
                self.collect.k, self.engine.k
            )));
        }
        self.schedule.validate(self.target.num_layers)?;
        if self.eval_corpora.is_empty() {
            return Err(Error::Empty("evaluation corpora"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    TrainModel,
    TrainDraft,
    TrainPredictors,
    Profile,
    Bench,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::TrainModel,
        Stage::TrainDraft,
        Stage::TrainPredictors,
        Stage::Profile,
        Stage::Bench,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::TrainModel => "train-model",
            Stage::TrainDraft => "train-draft",
            Stage::TrainPredictors => "train-predictors",
            Stage::Profile => "profile",
            Stage::Bench => "bench",
        }
    }

    fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::TrainModel => &[TARGET_WEIGHTS, "target_train.json"],
            Stage::TrainDraft => &[DRAFT_WEIGHTS, "draft_train.json"],
            Stage::TrainPredictors => &[PREDICTORS, "predictors_train.json"],
            Stage::Profile => &[PROFILE],
            Stage::Bench => &[BENCH_JSON, BENCH_JSONL, BENCH_TABLE],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub key: String,
    /// Output file name -> fingerprint of its bytes.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<Stage, StageRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub skipped: bool,
    pub seconds: f64,
}

fn hex(fp: u64) -> String {
    format!("{fp:016x}")
}

fn read_input(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => e.into(),
    })
}

/// Bench output for a set of named prompt lists.
pub struct BenchRun {
    pub report: BenchReport,
    pub traces: Vec<(String, Vec<GenerationTrace>)>,
    pub generated_tokens: usize,
}

/// Runs early-exit generation for every prompt (each on a fresh stream
/// cloned from `scheduler`) and scores the traces against full-depth references.
#[allow(clippy::too_many_arguments)]
pub fn bench_datasets(
    target: &TransformerModel,
    draft: &TransformerModel,
    policy: &ExitPolicy,
    scheduler: &Scheduler,
    engine: EngineConfig,
    online: ScheduleConfig,
    datasets: &[(String, Vec<Vec<TokenId>>)],
    gen_len: usize,
    execution: Execution,
) -> Result<BenchRun> {
    if datasets.is_empty() {
        return Err(Error::Empty("bench datasets"));
    }
    let jobs: Vec<(usize, &Vec<TokenId>)> = datasets
        .iter()
        .enumerate()
        .flat_map(|(d, (_, prompts))| prompts.iter().map(move |p| (d, p)))
        .collect();
    let results = execution.map(
        &jobs,
        |(_, prompt)| -> Result<(GenerationTrace, Vec<Vec<usize>>)> {
            let trace = generate(
                target,
                draft,
                policy,
                scheduler.clone(),
                engine,
                prompt,
                gen_len,
            )?;
            let reference = reference_argmaxes(target, &trace)?;
            Ok((trace, reference))
        },
    );
    let l = target.num_layers();
    let mut tallies: Vec<Tally> = datasets.iter().map(|_| Tally::new(l, online)).collect();
    let mut traces: Vec<(String, Vec<GenerationTrace>)> = datasets
        .iter()
        .map(|(n, _)| (n.clone(), Vec::new()))
        .collect();
    let mut generated = 0;
    for ((d, _), result) in jobs.iter().zip(results) {
        let (trace, reference) = result?;
        tallies[*d].add(&trace.records, &reference)?;
        generated += trace.tokens.len();
        traces[*d].1.push(trace);
    }
    let mut overall = Tally::new(l, online);
    let mut rows = Vec::with_capacity(datasets.len());
    for ((name, _), t) in datasets.iter().zip(&tallies) {
        overall.merge(t)?;
        rows.push(t.report(name)?);
    }
    let report = BenchReport {
        num_layers: l,
        k: if engine.full_vocab {
            target.vocab_size()
        } else {
            engine.k
        },
        schedule: format!("{:?}", scheduler.mode()),
        rows,
        overall: overall.report("overall")?,
        tree: None,
    };
    Ok(BenchRun {
        report,
        traces,
        generated_tokens: generated,
    })
}

/// Owns an output directory and its manifest.
pub struct Pipeline {
    config: PipelineConfig,
    out: PathBuf,
    manifest: Manifest,
}

impl Pipeline {
    pub fn open(config: PipelineConfig, out: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        let out = out.into();
        fs::create_dir_all(&out)?;
        let manifest = match fs::read(out.join(MANIFEST)) {
            Ok(bytes) => serde_json::from_slice(&bytes)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Manifest::default(),
            Err(e) => return Err(e.into()),
        };
        Ok(Self {
            config,
            out,
            manifest,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn run_all(&mut self) -> Result<Vec<StageOutcome>> {
        let stages: Vec<Stage> = Stage::ALL
            .into_iter()
            .filter(|&s| s != Stage::Profile || self.needs_profile())
            .collect();
        stages.into_iter().map(|s| self.run(s)).collect()
    }

    fn needs_profile(&self) -> bool {
        self.config.schedule_mode == ScheduleMode::TwoLevel
    }

    /// Reads an upstream artifact, checking it is the file its stage last wrote.
    fn upstream(&self, stage: Stage, name: &str) -> Result<Vec<u8>> {
        let bytes = read_input(&self.artifact(name))?;
        if let Some(expected) = self
            .manifest
            .stages
            .get(&stage)
            .and_then(|r| r.outputs.get(name))
        {
            let actual = hex(fingerprint_bytes(&bytes));
            if &actual != expected {
                return Err(Error::FingerprintMismatch {
                    expected: u64::from_str_radix(expected, 16).unwrap_or(0),
                    actual: fingerprint_bytes(&bytes),
                });
            }
        }
        Ok(bytes)
    }

    fn target(&self) -> Result<(TransformerModel, Vec<u8>)> {
        let bytes = self.upstream(Stage::TrainModel, TARGET_WEIGHTS)?;
        Ok((TransformerModel::from_bytes(&bytes)?, bytes))
    }

    fn draft(&self) -> Result<(TransformerModel, Vec<u8>)> {
        let bytes = self.upstream(Stage::TrainDraft, DRAFT_WEIGHTS)?;
        Ok((TransformerModel::from_bytes(&bytes)?, bytes))
    }

    fn predictors(&self) -> Result<(PredictorBank, Vec<u8>)> {
        let bytes = self.upstream(Stage::TrainPredictors, PREDICTORS)?;
        Ok((PredictorBank::from_bytes(&bytes)?, bytes))
    }

    fn stage_key(&self, stage: Stage, inputs: &[&[u8]]) -> Result<String> {
        let c = &self.config;
        let cfg = match stage {
            Stage::TrainModel => serde_json::json!([c.target, c.target_training]),
            Stage::TrainDraft => serde_json::json!([c.draft, c.draft_training]),
            Stage::TrainPredictors => serde_json::json!([c.collect, c.predictor]),
            Stage::Profile => serde_json::json!([c.profile, c.engine]),
            Stage::Bench => {
                let names: Vec<&str> = c.eval_corpora.iter().map(|n| n.name.as_str()).collect();
                serde_json::json!([
                    c.bench,
                    c.schedule,
                    c.schedule_mode,
                    c.engine,
                    c.tree,
                    names
                ])
            }
        };
        let mut buf = serde_json::to_vec(&serde_json::json!({ "stage": stage, "config": cfg }))?;
        for input in inputs {
            buf.extend_from_slice(&fingerprint_bytes(input).to_le_bytes());
        }
        Ok(hex(fingerprint_bytes(&buf)))
    }

    fn up_to_date(&self, stage: Stage, key: &str) -> bool {
        let Some(rec) = self.manifest.stages.get(&stage) else {
            return false;
        };
        rec.key == key
            && stage.outputs().iter().all(|name| {
                rec.outputs.get(*name).is_some_and(|fp| {
                    fs::read(self.artifact(name)).is_ok_and(|b| &hex(fingerprint_bytes(&b)) == fp)
                })
            })
    }

    fn write(
        &self,
        name: &str,
        bytes: &[u8],
        outputs: &mut BTreeMap<String, String>,
    ) -> Result<()> {
        fs::write(self.artifact(name), bytes)?;
        outputs.insert(name.to_string(), hex(fingerprint_bytes(bytes)));
        Ok(())
    }

    fn eval_prompts(&self, sample: SampleConfig) -> Result<Vec<(String, Vec<Vec<TokenId>>)>> {
        self.config
            .eval_corpora
            .iter()
            .map(|c| {
                let bytes = read_input(&c.path)?;
                Ok((
                    c.name.clone(),
                    corpus::prompts(&bytes, sample.prompt_len, sample.num_prompts)?,
                ))
            })
            .collect()
    }

    /// Runs one stage unless its manifest entry shows it is current.
    pub fn run(&mut self, stage: Stage) -> Result<StageOutcome> {
        let start = Instant::now();
        let c = self.config.clone();
        let ex = c.execution;
        let mut outputs = BTreeMap::new();
        let mut timing = None;
        let key = match stage {
            Stage::TrainModel | Stage::TrainDraft => {
                let corpus = read_input(&c.train_corpus)?;
                let key = self.stage_key(stage, &[&corpus])?;
                if self.up_to_date(stage, &key) {
                    return Ok(StageOutcome {
                        stage,
                        skipped: true,
                        seconds: 0.0,
                    });
                }
                let (model_cfg, train_cfg, weights, report) = match stage {
                    Stage::TrainModel => (
                        &c.target,
                        &c.target_training,
                        TARGET_WEIGHTS,
                        "target_train.json",
                    ),
                    _ => (
                        &c.draft,
                        &c.draft_training,
                        DRAFT_WEIGHTS,
                        "draft_train.json",
                    ),
                };
                let mut model = TransformerModel::init(model_cfg.clone())?;
                let train_cfg = LmTrainConfig {
                    execution: ex,
                    ..train_cfg.clone()
                };
                let rep = crate::model::train_language_model(&mut model, &corpus, &train_cfg)?;
                save_weights(&model, self.artifact(weights))?;
                outputs.insert(weights.to_string(), hex(model.fingerprint()));
                self.write(report, &serde_json::to_vec_pretty(&rep)?, &mut outputs)?;
                key
            }
            Stage::TrainPredictors => {
                let corpus = read_input(&c.train_corpus)?;
                let (target, tb) = self.target()?;
                let (draft, db) = self.draft()?;
                let key = self.stage_key(stage, &[&corpus, &tb, &db])?;
                if self.up_to_date(stage, &key) {
                    return Ok(StageOutcome {
                        stage,
                        skipped: true,
                        seconds: 0.0,
                    });
                }
                let layers: Vec<usize> = (0..target.num_layers() - 1).collect();
                let collect = CollectConfig {
                    execution: ex,
                    ..c.collect.clone()
                };
                let examples = collect_training_data(&target, &draft, &corpus, &layers, &collect)?;
                let (bank, reports) =
                    train_predictor_bank(collect.k, &group_by_layer(examples), &c.predictor, ex)?;
                self.write(PREDICTORS, &bank.to_bytes(), &mut outputs)?;
                self.write(
                    "predictors_train.json",
                    &serde_json::to_vec_pretty(&reports)?,
                    &mut outputs,
                )?;
                key
            }
            Stage::Profile => {
                let corpus = read_input(&c.train_corpus)?;
                let (target, tb) = self.target()?;
                let (draft, db) = self.draft()?;
                let (bank, pb) = self.predictors()?;
                let key = self.stage_key(stage, &[&corpus, &tb, &db, &pb])?;
                if self.up_to_date(stage, &key) {
                    return Ok(StageOutcome {
                        stage,
                        skipped: true,
                        seconds: 0.0,
                    });
                }
                let prompts =
                    corpus::prompts(&corpus, c.profile.prompt_len, c.profile.num_prompts)?;
                let policy = ExitPolicy::Predictors(bank);
                let profile = profile_offline(
                    &target,
                    &draft,
                    &policy,
                    &prompts,
                    c.profile.gen_len,
                    c.engine,
                    ex,
                )?;
                save_profile(&profile, self.artifact(PROFILE))?;
                outputs.insert(
                    PROFILE.to_string(),
                    hex(fingerprint_bytes(&profile.to_bytes())),
                );
                key
            }
            Stage::Bench => {
                let (target, tb) = self.target()?;
                let (draft, db) = self.draft()?;
                let (bank, pb) = self.predictors()?;
                let mut inputs: Vec<Vec<u8>> = vec![tb, db, pb];
                let scheduler = match c.schedule_mode {
                    ScheduleMode::AllLayers => Scheduler::all_layers(target.num_layers()),
                    ScheduleMode::TwoLevel => {
                        let bytes = self.upstream(Stage::Profile, PROFILE)?;
                        let profile = OfflineProfile::from_bytes(&bytes)?;
                        if profile.model_fingerprint != target.fingerprint() {
                            return Err(Error::FingerprintMismatch {
                                expected: target.fingerprint(),
                                actual: profile.model_fingerprint,
                            });
                        }
                        inputs.push(bytes);
                        Scheduler::two_level(profile, c.schedule)?
                    }
                };
                for corpus in &c.eval_corpora {
                    inputs.push(read_input(&corpus.path)?);
                }
                let refs: Vec<&[u8]> = inputs.iter().map(Vec::as_slice).collect();
                let key = self.stage_key(stage, &refs)?;
                if self.up_to_date(stage, &key) {
                    return Ok(StageOutcome {
                        stage,
                        skipped: true,
                        seconds: 0.0,
                    });
                }
                let policy = ExitPolicy::Predictors(bank);
                let datasets = self.eval_prompts(c.bench)?;
                let gen_start = Instant::now();
                let mut run = bench_datasets(
                    &target,
                    &draft,
                    &policy,
                    &scheduler,
                    c.engine,
                    c.schedule,
                    &datasets,
                    c.bench.gen_len,
                    ex,
                )?;
                let gen_secs = gen_start.elapsed().as_secs_f64();
                if c.tree.num_prompts > 0 {
                    let sample = SampleConfig {
                        num_prompts: c.tree.num_prompts,
                        prompt_len: c.tree.prompt_len,
                        gen_len: c.tree.gen_len,
                    };
                    let tree_cfg = TreeConfig {
                        branching: c.tree.branching.clone(),
                        engine: c.engine,
                        execution: Execution::Sequential,
                    };
                    let jobs: Vec<Vec<TokenId>> = self
                        .eval_prompts(sample)?
                        .into_iter()
                        .flat_map(|(_, p)| p)
                        .collect();
                    let traces = ex.map(&jobs, |prompt| {
                        tree_generate(
                            &target,
                            &draft,
                            &policy,
                            scheduler.clone(),
                            tree_cfg.clone(),
                            prompt,
                            sample.gen_len,
                        )
                    });
                    let mut steps = Vec::new();
                    for t in traces {
                        steps.extend(t?.steps);
                    }
                    run.report.tree = Some(TreeSummary::from_steps(&c.tree.branching, &steps)?);
                }
                let mut jsonl = Vec::new();
                run.report.write_jsonl(&mut jsonl)?;
                self.write(
                    BENCH_JSON,
                    &serde_json::to_vec_pretty(&run.report)?,
                    &mut outputs,
                )?;
                self.write(BENCH_JSONL, &jsonl, &mut outputs)?;
                self.write(BENCH_TABLE, run.report.to_table().as_bytes(), &mut outputs)?;
                timing = Some(serde_json::json!({
                    "generated_tokens": run.generated_tokens,
                    "generation_seconds": gen_secs,
                    "tokens_per_sec": run.generated_tokens as f64 / gen_secs.max(1e-9),
                }));
                key
            }
        };
        self.manifest
            .stages
            .insert(stage, StageRecord { key, outputs });
        fs::write(
            self.artifact(MANIFEST),
            serde_json::to_vec_pretty(&self.manifest)?,
        )?;
        let seconds = start.elapsed().as_secs_f64();
        let mut times: BTreeMap<String, serde_json::Value> = fs::read(self.artifact(TIMING))
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
            .unwrap_or_default();
        times.insert(
            stage.name().to_string(),
            serde_json::json!({ "seconds": seconds, "detail": timing }),
        );
        fs::write(self.artifact(TIMING), serde_json::to_vec_pretty(&times)?)?;
        Ok(StageOutcome {
            stage,
            skipped: false,
            seconds,
        })
    }
}
