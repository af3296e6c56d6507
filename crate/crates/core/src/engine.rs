//! Autoregressive decoding with speculative early exit.
//!
//! For each token the target runs layer by layer. At every scheduled layer
//! the sliced head scores the draft's speculative tokens, the layer's
//! predictor turns those scores into an exit probability, and a positive
//! prediction is checked against the full head: the exit is taken only if
//! the full-vocabulary argmax is one of the speculative tokens.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::model::{KvCache, KvMode, TokenId, TransformerModel};
use crate::predictor::{decide_exit, extract_features, uniform_probs, PredictorBank};
use crate::scheduler::Scheduler;
use crate::speculation::{draft_logits_after, topk_from_logits, SpeculativeSet};

/// Where exit probabilities come from.
#[derive(Debug, Clone)]
pub enum ExitPolicy {
    Predictors(PredictorBank),
    /// The same probability at every layer (e.g. 0 = never exit, 1 = always try).
    Constant(f32),
    /// Probability 1 exactly when the layer's argmax equals the final layer's.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// Speculative tokens per step.
    pub k: usize,
    /// Use the whole vocabulary as the speculative set (no draft model).
    pub full_vocab: bool,
    /// Overrides the thresholds stored with the predictors.
    pub threshold: Option<f32>,
    pub kv_mode: KvMode,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            k: 4,
            full_vocab: false,
            threshold: None,
            kv_mode: KvMode::Recompute,
        }
    }
}

/// One predictor call during a token's forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorEval {
    pub layer: usize,
    pub prob: f32,
    pub fired: bool,
    /// Set only when `fired`: the full-head argmax was in the speculative set.
    pub verified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitRecord {
    pub token: TokenId,
    /// Last layer computed for this token (`L-1` without an early exit).
    pub exit_layer: usize,
    pub predictor_fired: bool,
    pub verified: bool,
    pub active_layers: Vec<usize>,
    pub speculative_tokens: Vec<TokenId>,
    pub evals: Vec<PredictorEval>,
    pub full_head_projections: usize,
}

/// Per-stream instrumentation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub tokens: usize,
    pub layers_run: usize,
    pub predictor_evals: usize,
    pub full_head_projections: usize,
}

/// Returns the full-head argmax at `hidden` if it is in `spec`.
pub fn verify_exit(
    model: &TransformerModel,
    hidden: &[f32],
    spec: &SpeculativeSet,
) -> Result<Option<TokenId>> {
    let top = math::argmax(&model.full_head_logits(hidden)?) as TokenId;
    Ok(spec.contains(top).then_some(top))
}

/// One decoding stream: owns its caches, context and scheduler state.
pub struct Engine<'a> {
    target: &'a TransformerModel,
    draft: &'a TransformerModel,
    policy: &'a ExitPolicy,
    scheduler: Scheduler,
    config: EngineConfig,
    target_cache: KvCache,
    draft_cache: KvCache,
    context: Vec<TokenId>,
    counters: Counters,
}

impl<'a> Engine<'a> {
    pub fn new(
        target: &'a TransformerModel,
        draft: &'a TransformerModel,
        policy: &'a ExitPolicy,
        scheduler: Scheduler,
        config: EngineConfig,
    ) -> Result<Self> {
        if draft.vocab_size() != target.vocab_size() {
            return Err(Error::InvalidConfig(
                "draft and target vocabularies differ".into(),
            ));
        }
        if !config.full_vocab && (config.k == 0 || config.k > target.vocab_size()) {
            return Err(Error::InvalidConfig(format!(
                "k = {} must be in 1..={}",
                config.k,
                target.vocab_size()
            )));
        }
        if let ExitPolicy::Predictors(bank) = policy {
            let k = if config.full_vocab {
                target.vocab_size()
            } else {
                config.k
            };
            if bank.k != k {
                return Err(Error::InvalidConfig(format!(
                    "predictors expect k = {}, engine uses {k}",
                    bank.k
                )));
            }
        }
        if let Some(t) = config.threshold {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "threshold {t} outside (0, 1)"
                )));
            }
        }
        Ok(Self {
            target,
            draft,
            policy,
            scheduler,
            config,
            target_cache: KvCache::new(target),
            draft_cache: KvCache::new(draft),
            context: Vec::new(),
            counters: Counters::default(),
        })
    }

    /// Resets the stream to `prompt`. Scheduler state carries over.
    pub fn start(&mut self, prompt: &[TokenId]) -> Result<()> {
        if prompt.is_empty() {
            return Err(Error::Empty("prompt"));
        }
        self.target_cache = KvCache::new(self.target);
        self.draft_cache = KvCache::new(self.draft);
        self.context = prompt.to_vec();
        if prompt.len() > 1 {
            let last = self.target.num_layers() - 1;
            self.target.forward_to_layer(
                &prompt[..prompt.len() - 1],
                last,
                &mut self.target_cache,
            )?;
        }
        Ok(())
    }

    pub fn context(&self) -> &[TokenId] {
        &self.context
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn scheduler(&self) -> &Scheduler {
        &self.scheduler
    }

    fn speculative_set(&mut self) -> Result<SpeculativeSet> {
        if self.config.full_vocab {
            return Ok(SpeculativeSet::full_vocab(self.target.vocab_size()));
        }
        let logits = draft_logits_after(self.draft, &self.context, &mut self.draft_cache)?;
        topk_from_logits(&logits, self.config.k)
    }

    /// Final-layer argmax for the pending position, on a scratch copy of the cache.
    fn oracle_target(&self) -> Result<usize> {
        let mut scratch = self.target_cache.clone();
        let last = self.target.num_layers() - 1;
        let state = self.target.forward_to_layer(
            &self.context[self.context.len() - 1..],
            last,
            &mut scratch,
        )?;
        Ok(math::argmax(
            &self.target.full_head_logits(state.last_hidden())?,
        ))
    }

    /// Emits the next token and appends it to the context.
    pub fn generate_token(&mut self) -> Result<ExitRecord> {
        if self.context.is_empty() {
            return Err(Error::Empty("context"));
        }
        let target = self.target;
        let last = target.num_layers() - 1;
        let spec = self.speculative_set()?;
        let active = self.scheduler.active_layers();
        let oracle = match self.policy {
            ExitPolicy::Oracle => Some(self.oracle_target()?),
            _ => None,
        };

        let mut state =
            target.embed(&self.context[self.context.len() - 1..], &self.target_cache)?;
        let mut prev = uniform_probs(spec.len());
        let mut evals = Vec::new();
        let mut projections = 0;
        let mut emitted = None;
        for layer in 0..=last {
            target.step_layer(&mut state, &mut self.target_cache)?;
            self.counters.layers_run += 1;
            if layer == last || active.binary_search(&layer).is_err() {
                continue;
            }
            let hidden = state.last_hidden();
            let features =
                extract_features(&target.sliced_head_logits(hidden, &spec.tokens)?, &prev)?;
            let (prob, threshold) = match self.policy {
                ExitPolicy::Predictors(bank) => {
                    let w = bank.get(layer)?;
                    (
                        w.forward_features(&features)?,
                        self.config.threshold.unwrap_or(w.threshold),
                    )
                }
                ExitPolicy::Constant(p) => (*p, self.config.threshold.unwrap_or(0.5)),
                ExitPolicy::Oracle => {
                    let here = math::argmax(&target.full_head_logits(hidden)?);
                    let p = if Some(here) == oracle { 1.0 } else { 0.0 };
                    (p, self.config.threshold.unwrap_or(0.5))
                }
            };
            prev = features.local_probs;
            self.counters.predictor_evals += 1;
            let fired = decide_exit(prob, threshold);
            let mut verified = false;
            if fired {
                projections += 1;
                if let Some(token) = verify_exit(target, hidden, &spec)? {
                    verified = true;
                    emitted = Some((token, layer));
                }
            }
            evals.push(PredictorEval {
                layer,
                prob,
                fired,
                verified,
            });
            if verified {
                break;
            }
        }

        let (token, exit_layer, verified) = match emitted {
            Some((token, layer)) => (token, layer, true),
            None => {
                projections += 1;
                let token = math::argmax(&target.full_head_logits(state.last_hidden())?) as TokenId;
                (token, last, false)
            }
        };
        if verified && self.config.kv_mode == KvMode::Stale {
            target.fill_stale(&mut self.target_cache)?;
        }
        self.counters.tokens += 1;
        self.counters.full_head_projections += projections;
        self.context.push(token);
        self.scheduler.record_exit(exit_layer)?;
        Ok(ExitRecord {
            token,
            exit_layer,
            predictor_fired: evals.iter().any(|e| e.fired),
            verified,
            active_layers: active,
            speculative_tokens: if self.config.full_vocab {
                Vec::new()
            } else {
                spec.tokens
            },
            evals,
            full_head_projections: projections,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub prompt: Vec<TokenId>,
    pub tokens: Vec<TokenId>,
    pub records: Vec<ExitRecord>,
    pub counters: Counters,
}

/// Generates `max_new` tokens after `prompt` with a fresh stream.
pub fn generate(
    target: &TransformerModel,
    draft: &TransformerModel,
    policy: &ExitPolicy,
    scheduler: Scheduler,
    config: EngineConfig,
    prompt: &[TokenId],
    max_new: usize,
) -> Result<GenerationTrace> {
    if max_new == 0 {
        return Err(Error::InvalidConfig("max_new must be at least 1".into()));
    }
    let mut engine = Engine::new(target, draft, policy, scheduler, config)?;
    engine.start(prompt)?;
    let mut records = Vec::with_capacity(max_new);
    for _ in 0..max_new {
        records.push(engine.generate_token()?);
    }
    Ok(GenerationTrace {
        prompt: prompt.to_vec(),
        tokens: records.iter().map(|r| r.token).collect(),
        records,
        counters: engine.counters(),
    })
}

/// Plain full-depth greedy decoding.
pub fn greedy_generate(
    target: &TransformerModel,
    prompt: &[TokenId],
    max_new: usize,
) -> Result<Vec<TokenId>> {
    if prompt.is_empty() {
        return Err(Error::Empty("prompt"));
    }
    let last = target.num_layers() - 1;
    let mut cache = KvCache::new(target);
    let mut out = Vec::with_capacity(max_new);
    let mut pending = prompt.to_vec();
    for _ in 0..max_new {
        let state = target.forward_to_layer(&pending, last, &mut cache)?;
        let token = math::argmax(&target.full_head_logits(state.last_hidden())?) as TokenId;
        out.push(token);
        pending = vec![token];
    }
    Ok(out)
}

/// Full-head argmax of the last token after every layer.
pub fn layer_argmaxes(target: &TransformerModel, context: &[TokenId]) -> Result<Vec<usize>> {
    target
        .layer_hiddens(context)?
        .iter()
        .map(|h| Ok(math::argmax(&target.full_head_logits(h)?)))
        .collect()
}

/// Earliest layer whose argmax matches the final layer's.
pub fn oracle_exit_layer(target: &TransformerModel, context: &[TokenId]) -> Result<usize> {
    Ok(earliest_agreement(&layer_argmaxes(target, context)?))
}

pub(crate) fn earliest_agreement(argmaxes: &[usize]) -> usize {
    let fin = *argmaxes.last().expect("at least one layer");
    argmaxes
        .iter()
        .position(|&a| a == fin)
        .expect("the final layer agrees with itself")
}

/// `[position][layer]` argmaxes for next-token predictions at positions
/// `from..tokens.len()`, from one batched full-depth pass.
pub fn position_layer_argmaxes(
    target: &TransformerModel,
    tokens: &[TokenId],
    from: usize,
) -> Result<Vec<Vec<usize>>> {
    if from >= tokens.len() {
        return Err(Error::Empty("positions to score"));
    }
    let mut cache = KvCache::new(target);
    let mut state = target.embed(tokens, &cache)?;
    let mut out = vec![Vec::with_capacity(target.num_layers()); tokens.len() - from];
    for _ in 0..target.num_layers() {
        target.step_layer(&mut state, &mut cache)?;
        for (i, row) in out.iter_mut().enumerate() {
            row.push(math::argmax(&target.full_head_logits(state.row(from + i))?));
        }
    }
    Ok(out)
}

/// Writes one JSON object per record.
pub fn write_trace(records: &[ExitRecord], mut out: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
