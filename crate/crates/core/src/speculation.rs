//! Reduced search spaces from the draft model: top-k speculative sets for
//! autoregressive decoding and token trees for speculative decoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::model::{KvCache, TokenId, TransformerModel};

/// The draft's `k` most likely next tokens, most likely first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeculativeSet {
    pub tokens: Vec<TokenId>,
    pub draft_probs: Vec<f32>,
}

impl SpeculativeSet {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn contains(&self, token: TokenId) -> bool {
        self.tokens.contains(&token)
    }

    /// The whole vocabulary in id order; membership always holds.
    pub fn full_vocab(vocab_size: usize) -> Self {
        Self {
            tokens: (0..vocab_size as TokenId).collect(),
            draft_probs: vec![1.0 / vocab_size as f32; vocab_size],
        }
    }
}

/// Top-`k` of a logit vector: higher logit first, lower id on ties.
pub fn topk_from_logits(logits: &[f32], k: usize) -> Result<SpeculativeSet> {
    if k == 0 || k > logits.len() {
        return Err(Error::InvalidConfig(format!(
            "k = {k} must be in 1..={}",
            logits.len()
        )));
    }
    let probs = math::softmax(logits);
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(SpeculativeSet {
        draft_probs: order.iter().map(|&i| probs[i]).collect(),
        tokens: order.into_iter().map(|i| i as TokenId).collect(),
    })
}

/// The draft's top-`k` next tokens after `context`, from a fresh forward pass.
pub fn propose_topk(
    draft: &TransformerModel,
    context: &[TokenId],
    k: usize,
) -> Result<SpeculativeSet> {
    if context.is_empty() {
        return Err(Error::Empty("context"));
    }
    if k == 0 || k > draft.vocab_size() {
        return Err(Error::InvalidConfig(format!(
            "k = {k} must be in 1..={}",
            draft.vocab_size()
        )));
    }
    topk_from_logits(&draft.next_token_logits(context)?, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub token: TokenId,
    /// `None` for the root.
    pub parent: Option<usize>,
    pub depth: usize,
    /// Draft probability of this token given its parent path (1 for the root).
    pub draft_prob: f32,
}

/// Draft token tree. Node 0 is the root (the last committed context token);
/// nodes are stored breadth-first and each parent's children are contiguous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenTree {
    pub nodes: Vec<TreeNode>,
    pub branching: Vec<usize>,
}

impl TokenTree {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn max_depth(&self) -> usize {
        self.branching.len()
    }

    pub fn children(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(move |(_, n)| n.parent == Some(node))
            .map(|(i, _)| i)
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        self.children(node).next().is_none()
    }

    /// Tokens from depth 1 down to `node` (empty for the root).
    pub fn path_tokens(&self, node: usize) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.nodes[node].depth);
        let mut cur = node;
        while let Some(parent) = self.nodes[cur].parent {
            out.push(self.nodes[cur].token);
            cur = parent;
        }
        out.reverse();
        out
    }

    /// Node count implied by `branching`: the sum over depths of the running product.
    pub fn expected_len(branching: &[usize]) -> usize {
        let mut total = 1;
        let mut level = 1;
        for b in branching {
            level *= b;
            total += level;
        }
        total
    }
}

/// Expands `context` into a tree: each depth-`d` node's children are the
/// draft's top-`branching[d]` continuations of the path ending at that node.
pub fn build_token_tree(
    draft: &TransformerModel,
    context: &[TokenId],
    branching: &[usize],
) -> Result<TokenTree> {
    let mut cache = KvCache::new(draft);
    build_token_tree_cached(draft, context, branching, &mut cache)
}

/// Like [`build_token_tree`], reusing a draft cache that already holds a
/// prefix of `context`. On return the cache holds exactly `context`.
pub(crate) fn build_token_tree_cached(
    draft: &TransformerModel,
    context: &[TokenId],
    branching: &[usize],
    cache: &mut KvCache,
) -> Result<TokenTree> {
    Ok(expand_tree(draft, context, branching, None, cache)?.0)
}

/// Builds the tree and also returns, for every node, the draft's top-`k`
/// continuations of the path ending there. An internal node's children are
/// the first `branching[depth]` entries of its set (or all `k` of them
/// when the branching is wider).
pub(crate) fn build_token_tree_with_sets(
    draft: &TransformerModel,
    context: &[TokenId],
    branching: &[usize],
    k: usize,
    cache: &mut KvCache,
) -> Result<(TokenTree, Vec<SpeculativeSet>)> {
    if k == 0 || k > draft.vocab_size() {
        return Err(Error::InvalidConfig(format!(
            "k = {k} must be in 1..={}",
            draft.vocab_size()
        )));
    }
    let (tree, sets) = expand_tree(draft, context, branching, Some(k), cache)?;
    Ok((
        tree,
        sets.into_iter()
            .map(|s| s.expect("every node expanded"))
            .collect(),
    ))
}

fn expand_tree(
    draft: &TransformerModel,
    context: &[TokenId],
    branching: &[usize],
    node_k: Option<usize>,
    cache: &mut KvCache,
) -> Result<(TokenTree, Vec<Option<SpeculativeSet>>)> {
    if context.is_empty() {
        return Err(Error::Empty("context"));
    }
    if branching.is_empty() || branching.contains(&0) {
        return Err(Error::InvalidConfig(
            "branching must be non-empty with counts >= 1".into(),
        ));
    }
    let max = draft.config().max_context;
    if context.len() + branching.len() > max {
        return Err(Error::ContextOverflow {
            len: context.len() + branching.len(),
            max,
        });
    }
    let root_logits = draft_logits_after(draft, context, cache)?;
    let base = context.len();

    let mut nodes = vec![TreeNode {
        token: *context.last().expect("non-empty"),
        parent: None,
        depth: 0,
        draft_prob: 1.0,
    }];
    let mut sets: Vec<Option<SpeculativeSet>> = vec![None];
    let logits_after = |nodes: &[TreeNode], node: usize, cache: &mut KvCache| -> Result<Vec<f32>> {
        if node == 0 {
            return Ok(root_logits.clone());
        }
        let mut path = Vec::new();
        let mut cur = node;
        while cur != 0 {
            path.push(nodes[cur].token);
            cur = nodes[cur].parent.expect("non-root node has a parent");
        }
        path.reverse();
        cache.truncate(base);
        let state = draft.forward_to_layer(&path, draft.num_layers() - 1, cache)?;
        draft.full_head_logits(state.last_hidden())
    };
    let mut frontier = vec![0usize];
    for (depth, &b) in branching.iter().enumerate() {
        let mut next = Vec::with_capacity(frontier.len() * b);
        for &parent in &frontier {
            let logits = logits_after(&nodes, parent, cache)?;
            if let Some(k) = node_k {
                sets[parent] = Some(topk_from_logits(&logits, k)?);
            }
            let set = topk_from_logits(&logits, b)?;
            for (token, prob) in set.tokens.into_iter().zip(set.draft_probs) {
                next.push(nodes.len());
                nodes.push(TreeNode {
                    token,
                    parent: Some(parent),
                    depth: depth + 1,
                    draft_prob: prob,
                });
                sets.push(None);
            }
        }
        frontier = next;
    }
    if let Some(k) = node_k {
        for &leaf in &frontier {
            sets[leaf] = Some(topk_from_logits(&logits_after(&nodes, leaf, cache)?, k)?);
        }
    }
    cache.truncate(base);
    Ok((
        TokenTree {
            nodes,
            branching: branching.to_vec(),
        },
        sets,
    ))
}

/// Feeds whatever part of `context` the cache lacks and returns the next-token logits.
pub(crate) fn draft_logits_after(
    draft: &TransformerModel,
    context: &[TokenId],
    cache: &mut KvCache,
) -> Result<Vec<f32>> {
    if cache.len() >= context.len() {
        // Recompute the last position so its logits are available.
        cache.truncate(context.len() - 1);
    }
    let fresh = &context[cache.len()..];
    let state = draft.forward_to_layer(fresh, draft.num_layers() - 1, cache)?;
    draft.full_head_logits(state.last_hidden())
}

/// One path per leaf, in leaf order; each lists node indices from depth 1 to the leaf.
pub fn enumerate_paths(tree: &TokenTree) -> Vec<Vec<usize>> {
    let mut has_child = vec![false; tree.len()];
    for n in &tree.nodes {
        if let Some(p) = n.parent {
            has_child[p] = true;
        }
    }
    (1..tree.len())
        .filter(|&i| !has_child[i])
        .map(|leaf| {
            let mut path = Vec::with_capacity(tree.nodes[leaf].depth);
            let mut cur = leaf;
            while cur != 0 {
                path.push(cur);
                cur = tree.nodes[cur].parent.expect("non-root node has a parent");
            }
            path.reverse();
            path
        })
        .collect()
}
