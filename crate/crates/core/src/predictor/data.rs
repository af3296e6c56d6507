//! Labelled predictor training data from greedy generation.

use serde::{Deserialize, Serialize};

use super::{extract_features, uniform_probs, FeatureVector, TrainingExample};
use crate::corpus;
use crate::error::{Error, Result};
use crate::math;
use crate::model::{KvCache, TokenId, TransformerModel};
use crate::par::Execution;
use crate::speculation::{draft_logits_after, topk_from_logits};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectConfig {
    pub k: usize,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub num_prompts: usize,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            k: 4,
            prompt_len: 32,
            gen_len: 64,
            num_prompts: 32,
            execution: Execution::default(),
        }
    }
}

/// Runs greedy full-depth generation from prompts sliced out of `corpus`
/// and records, for every generated token and every layer in `layers`, the
/// exit features and whether that layer's argmax already equals the final
/// one.
///
/// Features chain across `layers` in ascending order: the variation at a
/// layer is measured against the previous layer in the set (uniform before
/// the first). The result is grouped by layer, then by prompt and position.
pub fn collect_training_data(
    target: &TransformerModel,
    draft: &TransformerModel,
    corpus: &[u8],
    layers: &[usize],
    config: &CollectConfig,
) -> Result<Vec<TrainingExample>> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let mut layers = layers.to_vec();
    layers.sort_unstable();
    layers.dedup();
    if let Some(&bad) = layers.iter().find(|&&l| l >= target.num_layers()) {
        return Err(Error::LayerOutOfRange {
            layer: bad,
            num_layers: target.num_layers(),
        });
    }
    if config.k == 0 || config.k > draft.vocab_size() {
        return Err(Error::InvalidConfig(format!(
            "k = {} must be in 1..={}",
            config.k,
            draft.vocab_size()
        )));
    }
    let prompts = corpus::prompts(corpus, config.prompt_len, config.num_prompts)?;
    let per_prompt = config.execution.map(&prompts, |prompt| {
        collect_prompt(target, draft, prompt, &layers, config)
    });
    let mut examples = Vec::new();
    for batch in per_prompt {
        examples.extend(batch?);
    }
    examples.sort_by_key(|e| e.layer);
    Ok(examples)
}

fn collect_prompt(
    target: &TransformerModel,
    draft: &TransformerModel,
    prompt: &[TokenId],
    layers: &[usize],
    config: &CollectConfig,
) -> Result<Vec<TrainingExample>> {
    let last = target.num_layers() - 1;
    let mut tcache = KvCache::new(target);
    let mut dcache = KvCache::new(draft);
    let mut context = prompt.to_vec();
    if context.len() > 1 {
        target.forward_to_layer(&context[..context.len() - 1], last, &mut tcache)?;
    }
    let mut out = Vec::with_capacity(config.gen_len * layers.len());
    for _ in 0..config.gen_len {
        let spec = topk_from_logits(&draft_logits_after(draft, &context, &mut dcache)?, config.k)?;
        let mut state = target.embed(&context[context.len() - 1..], &tcache)?;
        let mut argmaxes = Vec::with_capacity(last + 1);
        let mut captured: Vec<(usize, FeatureVector)> = Vec::with_capacity(layers.len());
        let mut prev = uniform_probs(config.k);
        for layer in 0..=last {
            target.step_layer(&mut state, &mut tcache)?;
            let hidden = state.last_hidden();
            argmaxes.push(math::argmax(&target.full_head_logits(hidden)?));
            if layers.binary_search(&layer).is_ok() {
                let features =
                    extract_features(&target.sliced_head_logits(hidden, &spec.tokens)?, &prev)?;
                prev.clone_from(&features.local_probs);
                captured.push((layer, features));
            }
        }
        let fin = argmaxes[last];
        for (layer, features) in captured {
            out.push(TrainingExample {
                features,
                label: argmaxes[layer] == fin,
                layer,
            });
        }
        context.push(fin as TokenId);
    }
    Ok(out)
}

/// Splits layer-sorted examples into one group per layer.
pub fn group_by_layer(examples: Vec<TrainingExample>) -> Vec<(usize, Vec<TrainingExample>)> {
    let mut groups: Vec<(usize, Vec<TrainingExample>)> = Vec::new();
    for e in examples {
        match groups.iter_mut().find(|(l, _)| *l == e.layer) {
            Some((_, g)) => g.push(e),
            None => groups.push((e.layer, vec![e])),
        }
    }
    groups.sort_by_key(|(l, _)| *l);
    groups
}
