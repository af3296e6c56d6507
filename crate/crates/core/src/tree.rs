//! Early exit under tree speculative decoding.
//!
//! Every root-to-leaf path of the draft tree is treated as one hyper-token:
//! at each scheduled layer the path exits only if the predictor fires for
//! every node on it, so a path leaves at the layer its slowest node is
//! ready. Predictor work therefore grows with the number of tree nodes,
//! not with the number of per-node decision combinations.

use serde::{Deserialize, Serialize};

use crate::engine::{earliest_agreement, EngineConfig, ExitPolicy};
use crate::error::{Error, Result};
use crate::math;
use crate::model::{KvCache, KvMode, TokenId, TransformerModel, TreeBatch};
use crate::par::Execution;
use crate::predictor::{decide_exit, extract_features, uniform_probs};
use crate::scheduler::Scheduler;
use crate::speculation::{
    build_token_tree_with_sets, enumerate_paths, propose_topk, SpeculativeSet, TokenTree,
};

/// A root-to-leaf path with the speculative set each of its nodes is checked against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperToken {
    /// Node indices from depth 1 to the leaf.
    pub path: Vec<usize>,
    /// Children for internal nodes, a fresh draft proposal for the leaf.
    pub per_node_spec: Vec<SpeculativeSet>,
}

/// Internal nodes get their children; leaves get `leaf_sets[leaf]`.
fn merge_with(
    tree: &TokenTree,
    leaf_set: impl Fn(usize) -> Result<SpeculativeSet>,
) -> Result<Vec<HyperToken>> {
    enumerate_paths(tree)
        .into_iter()
        .map(|path| {
            let per_node_spec = path
                .iter()
                .map(|&n| {
                    if tree.is_leaf(n) {
                        leaf_set(n)
                    } else {
                        let kids: Vec<usize> = tree.children(n).collect();
                        Ok(SpeculativeSet {
                            tokens: kids.iter().map(|&c| tree.nodes[c].token).collect(),
                            draft_probs: kids.iter().map(|&c| tree.nodes[c].draft_prob).collect(),
                        })
                    }
                })
                .collect::<Result<_>>()?;
            Ok(HyperToken {
                path,
                per_node_spec,
            })
        })
        .collect()
}

/// One hyper-token per leaf. Leaf sets are the draft's top-`k` after the
/// leaf's full path.
pub fn merge_paths(
    draft: &TransformerModel,
    context: &[TokenId],
    tree: &TokenTree,
    k: usize,
) -> Result<Vec<HyperToken>> {
    merge_with(tree, |leaf| {
        let mut ctx = context.to_vec();
        ctx.extend(tree.path_tokens(leaf));
        propose_topk(draft, &ctx, k)
    })
}

/// Sliced-head logits for many hidden states at once; row `j` scores `token_ids[j]` against `hidden[j]`.
pub fn grouped_speculative_logits(
    model: &TransformerModel,
    hidden: &[&[f32]],
    token_ids: &[&[TokenId]],
    execution: Execution,
) -> Result<Vec<Vec<f32>>> {
    if hidden.is_empty() {
        return Err(Error::Empty("tree nodes"));
    }
    if hidden.len() != token_ids.len() {
        return Err(Error::LengthMismatch(format!(
            "{} hidden states, {} id lists",
            hidden.len(),
            token_ids.len()
        )));
    }
    for ids in token_ids {
        if ids.is_empty() {
            return Err(Error::Empty("speculative token ids"));
        }
        for &t in ids.iter() {
            model.check_token(t)?;
        }
    }
    let rows: Vec<(&[f32], &[TokenId])> = hidden
        .iter()
        .copied()
        .zip(token_ids.iter().copied())
        .collect();
    execution
        .map(&rows, |(h, ids)| {
            Ok(model.sliced_from_normed(&model.normalize_for_head(h)?, ids))
        })
        .into_iter()
        .collect()
}

/// A path exits only when every node's probability clears the threshold.
pub fn hypertoken_exit_decision(probs: &[f32], threshold: f32) -> bool {
    !probs.is_empty() && probs.iter().all(|&p| decide_exit(p, threshold))
}

/// Latest of the per-node oracle exit layers along `path` (tokens after `context`).
pub fn hypertoken_oracle_exit(
    target: &TransformerModel,
    context: &[TokenId],
    path: &[TokenId],
) -> Result<usize> {
    if context.is_empty() || path.is_empty() {
        return Err(Error::Empty("context or path"));
    }
    let mut seq = context.to_vec();
    seq.extend_from_slice(path);
    let table = crate::engine::position_layer_argmaxes(target, &seq, context.len())?;
    Ok(table
        .iter()
        .map(|row| earliest_agreement(row))
        .max()
        .expect("non-empty path"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub branching: Vec<usize>,
    pub engine: EngineConfig,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            branching: vec![3, 2],
            engine: EngineConfig::default(),
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeStepResult {
    pub branching: Vec<usize>,
    /// Tree tokens committed this step, along one path.
    pub accepted_tokens: Vec<TokenId>,
    /// The target's own token after the accepted prefix.
    pub correction_token: TokenId,
    /// Layer the step finished at (`L-1` without an early exit).
    pub exit_layer: usize,
    /// Index into the step's path list of the path that exited early.
    pub exit_path: Option<usize>,
    /// Per path: first layer whose conjunction fired, if any.
    pub path_fired: Vec<Option<usize>>,
    pub active_layers: Vec<usize>,
    pub predictor_evals: usize,
    pub num_paths: usize,
    pub max_path_len: usize,
}

impl TreeStepResult {
    pub fn committed(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.accepted_tokens
            .iter()
            .copied()
            .chain(std::iter::once(self.correction_token))
    }
}

/// One tree-decoding stream.
pub struct TreeSession<'a> {
    target: &'a TransformerModel,
    draft: &'a TransformerModel,
    policy: &'a ExitPolicy,
    scheduler: Scheduler,
    config: TreeConfig,
    target_cache: KvCache,
    draft_cache: KvCache,
    context: Vec<TokenId>,
}

impl<'a> TreeSession<'a> {
    pub fn new(
        target: &'a TransformerModel,
        draft: &'a TransformerModel,
        policy: &'a ExitPolicy,
        scheduler: Scheduler,
        config: TreeConfig,
    ) -> Result<Self> {
        if config.engine.full_vocab {
            return Err(Error::InvalidConfig(
                "tree decoding needs draft speculative sets".into(),
            ));
        }
        if let ExitPolicy::Predictors(bank) = policy {
            if bank.k != config.engine.k {
                return Err(Error::InvalidConfig(format!(
                    "predictors expect k = {}, tree uses {}",
                    bank.k, config.engine.k
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
        })
    }

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

    fn threshold(&self, stored: f32) -> f32 {
        self.config.engine.threshold.unwrap_or(stored)
    }

    /// Final-layer argmax of the root (index 0) and every tree node, on scratch copies.
    fn oracle_finals(&self, root: TokenId, batch: &TreeBatch) -> Result<Vec<usize>> {
        let target = self.target;
        let mut cache = self.target_cache.clone();
        let mut batch = batch.clone();
        let mut root_state = target.embed(&[root], &cache)?;
        for _ in 0..target.num_layers() {
            target.step_layer(&mut root_state, &mut cache)?;
            target.step_tree_layer(&mut batch, &cache)?;
        }
        let mut out = vec![math::argmax(
            &target.full_head_logits(root_state.last_hidden())?,
        )];
        for h in &batch.hidden {
            out.push(math::argmax(&target.full_head_logits(h)?));
        }
        Ok(out)
    }

    /// Drafts a tree, runs the target over it and commits the accepted tokens.
    pub fn step(&mut self) -> Result<TreeStepResult> {
        let target = self.target;
        let last = target.num_layers() - 1;
        let n = self.context.len();
        let k = self.config.engine.k;
        let (tree, node_sets) = build_token_tree_with_sets(
            self.draft,
            &self.context,
            &self.config.branching,
            k,
            &mut self.draft_cache,
        )?;
        let hyper = merge_with(&tree, |leaf| Ok(node_sets[leaf].clone()))?;
        let paths: Vec<&[usize]> = hyper.iter().map(|h| &h.path[..]).collect();
        let max_path_len = paths.iter().map(|p| p.len()).max().unwrap_or(0);

        // Tree node `i` (i >= 1) is batch row `i - 1`.
        let tokens: Vec<TokenId> = tree.nodes[1..].iter().map(|nd| nd.token).collect();
        let parents: Vec<Option<usize>> = tree.nodes[1..]
            .iter()
            .map(|nd| nd.parent.filter(|&p| p != 0).map(|p| p - 1))
            .collect();
        let mut batch = TreeBatch::new(target, n, &tokens, &parents)?;
        let root = self.context[n - 1];
        let oracle = match self.policy {
            ExitPolicy::Oracle => Some(self.oracle_finals(root, &batch)?),
            _ => None,
        };
        let active = self.scheduler.active_layers();
        let feature_ids: Vec<&[TokenId]> = node_sets[1..].iter().map(|s| &s.tokens[..]).collect();

        let mut root_state = target.embed(&[root], &self.target_cache)?;
        let mut prev: Vec<Vec<f32>> = vec![uniform_probs(k); tokens.len()];
        let mut path_fired = vec![None; paths.len()];
        let mut evals = 0;
        let mut exit: Option<(usize, usize, TokenId)> = None;
        for layer in 0..=last {
            target.step_layer(&mut root_state, &mut self.target_cache)?;
            target.step_tree_layer(&mut batch, &self.target_cache)?;
            if layer == last || active.binary_search(&layer).is_err() {
                continue;
            }
            let hidden: Vec<&[f32]> = batch.hidden.iter().map(Vec::as_slice).collect();
            let logits =
                grouped_speculative_logits(target, &hidden, &feature_ids, self.config.execution)?;
            let mut probs = Vec::with_capacity(tokens.len());
            let mut thresholds = Vec::with_capacity(tokens.len());
            for (row, node_logits) in logits.iter().enumerate() {
                let features = extract_features(node_logits, &prev[row])?;
                let (p, t) = match self.policy {
                    ExitPolicy::Predictors(bank) => {
                        let w = bank.get(layer)?;
                        (w.forward_features(&features)?, self.threshold(w.threshold))
                    }
                    ExitPolicy::Constant(p) => (*p, self.threshold(0.5)),
                    ExitPolicy::Oracle => {
                        let here = math::argmax(&target.full_head_logits(hidden[row])?);
                        let finals = oracle.as_ref().expect("oracle finals computed");
                        (
                            if here == finals[row + 1] { 1.0 } else { 0.0 },
                            self.threshold(0.5),
                        )
                    }
                };
                prev[row] = features.local_probs;
                probs.push(p);
                thresholds.push(t);
                evals += 1;
            }

            let mut argmax_cache: Vec<Option<usize>> = vec![None; tree.len()];
            let mut argmax_at = |node: usize| -> Result<usize> {
                if let Some(a) = argmax_cache[node] {
                    return Ok(a);
                }
                let h = if node == 0 {
                    root_state.last_hidden()
                } else {
                    &batch.hidden[node - 1][..]
                };
                let a = math::argmax(&target.full_head_logits(h)?);
                argmax_cache[node] = Some(a);
                Ok(a)
            };
            for (pi, h) in hyper.iter().enumerate() {
                let fires = h
                    .path
                    .iter()
                    .all(|&nd| decide_exit(probs[nd - 1], thresholds[nd - 1]));
                if !fires {
                    continue;
                }
                path_fired[pi].get_or_insert(layer);
                if let Some(bonus) = verify_path(&tree, h, &mut argmax_at)? {
                    exit = Some((layer, pi, bonus));
                    break;
                }
            }
            if exit.is_some() {
                break;
            }
        }

        let (exit_layer, exit_path, accepted, correction) = match exit {
            Some((layer, pi, bonus)) => (layer, Some(pi), hyper[pi].path.clone(), bonus),
            None => {
                let mut finals = vec![math::argmax(
                    &target.full_head_logits(root_state.last_hidden())?,
                )];
                for h in &batch.hidden {
                    finals.push(math::argmax(&target.full_head_logits(h)?));
                }
                let (accepted, correction) = greedy_accept(&tree, &finals);
                (last, None, accepted, correction)
            }
        };

        for &node in &accepted {
            let row = node - 1;
            let keys: Vec<&[f32]> = (0..=exit_layer).map(|l| &batch.keys[l][row][..]).collect();
            let values: Vec<&[f32]> = (0..=exit_layer)
                .map(|l| &batch.values[l][row][..])
                .collect();
            self.target_cache
                .push_computed(&keys, &values, &batch.hidden[row])?;
        }
        if exit_layer < last && self.config.engine.kv_mode == KvMode::Stale {
            target.fill_stale(&mut self.target_cache)?;
        }
        let accepted_tokens: Vec<TokenId> =
            accepted.iter().map(|&nd| tree.nodes[nd].token).collect();
        self.context.extend_from_slice(&accepted_tokens);
        self.context.push(correction);
        for _ in 0..=accepted_tokens.len() {
            self.scheduler.record_exit(exit_layer)?;
        }
        Ok(TreeStepResult {
            branching: self.config.branching.clone(),
            accepted_tokens,
            correction_token: correction,
            exit_layer,
            exit_path,
            path_fired,
            active_layers: active,
            predictor_evals: evals,
            num_paths: paths.len(),
            max_path_len,
        })
    }
}

/// Checks a fired path node by node at the current layer. Returns the
/// leaf's argmax (the bonus token) when every check passes.
fn verify_path(
    tree: &TokenTree,
    hyper: &HyperToken,
    argmax_at: &mut impl FnMut(usize) -> Result<usize>,
) -> Result<Option<TokenId>> {
    let mut parent = 0;
    for &node in &hyper.path {
        if argmax_at(parent)? != tree.nodes[node].token as usize {
            return Ok(None);
        }
        parent = node;
    }
    let leaf_spec = hyper.per_node_spec.last().expect("non-empty path");
    let bonus = argmax_at(parent)? as TokenId;
    Ok(leaf_spec.contains(bonus).then_some(bonus))
}

/// Longest prefix whose tokens match the target's argmax at their parent.
fn greedy_accept(tree: &TokenTree, finals: &[usize]) -> (Vec<usize>, TokenId) {
    let mut accepted = Vec::new();
    let mut cur = 0;
    loop {
        let want = finals[cur] as TokenId;
        match tree.children(cur).find(|&c| tree.nodes[c].token == want) {
            Some(c) => {
                accepted.push(c);
                cur = c;
            }
            None => return (accepted, want),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeTrace {
    pub prompt: Vec<TokenId>,
    pub tokens: Vec<TokenId>,
    pub steps: Vec<TreeStepResult>,
}

/// Tree-decodes at least `max_new` tokens and returns exactly `max_new`.
pub fn tree_generate(
    target: &TransformerModel,
    draft: &TransformerModel,
    policy: &ExitPolicy,
    scheduler: Scheduler,
    config: TreeConfig,
    prompt: &[TokenId],
    max_new: usize,
) -> Result<TreeTrace> {
    if max_new == 0 {
        return Err(Error::InvalidConfig("max_new must be at least 1".into()));
    }
    let mut session = TreeSession::new(target, draft, policy, scheduler, config)?;
    session.start(prompt)?;
    let mut tokens = Vec::with_capacity(max_new + 8);
    let mut steps = Vec::new();
    while tokens.len() < max_new {
        let step = session.step()?;
        tokens.extend(step.committed());
        steps.push(step);
    }
    tokens.truncate(max_new);
    Ok(TreeTrace {
        prompt: prompt.to_vec(),
        tokens,
        steps,
    })
}
