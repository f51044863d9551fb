//! Candidate generation with the draft model: sampled chains and
//! dynamically expanded token trees.
//!
//! A [`DraftTree`] always has the root (the last committed token, not yet a
//! speculation) at index 0. Trees produced here are in canonical order:
//! breadth-first, siblings by descending draft probability, so parents come
//! before children and flattening is the identity on indices.

use std::collections::VecDeque;

use crate::error::{bail, Result};
use crate::kvcache::LayerKVCache;
use crate::model::{decode_speculative, AttentionConfig, Capture, Model, Token};
use crate::tensor::{distribution, sample_categorical, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct DraftNode {
    pub token: Token,
    /// `None` for the root.
    pub parent: Option<usize>,
    pub depth: usize,
    /// Sum of log draft probabilities along the path from the root.
    pub path_logprob: f64,
    /// Draft probability of `token` given its parent's context (1 for the
    /// root).
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DraftTree {
    pub nodes: Vec<DraftNode>,
    /// Draft distribution over the next token at each node, for the nodes the
    /// draft model evaluated.
    pub dists: Vec<Option<Vec<f64>>>,
}

impl DraftTree {
    pub fn root(token: Token) -> Self {
        Self {
            nodes: vec![DraftNode {
                token,
                parent: None,
                depth: 0,
                path_logprob: 0.0,
                prob: 1.0,
            }],
            dists: vec![None],
        }
    }

    /// Number of nodes including the root.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Speculated nodes (everything but the root).
    pub fn drafted(&self) -> usize {
        self.nodes.len().saturating_sub(1)
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    pub fn children(&self, i: usize) -> Vec<usize> {
        let mut c: Vec<usize> = (0..self.nodes.len())
            .filter(|&j| self.nodes[j].parent == Some(i))
            .collect();
        c.sort_by(|&a, &b| {
            self.nodes[b]
                .prob
                .total_cmp(&self.nodes[a].prob)
                .then(self.nodes[a].token.cmp(&self.nodes[b].token))
        });
        c
    }

    /// Root-to-`i` path, root excluded.
    pub fn path(&self, mut i: usize) -> Vec<usize> {
        let mut out = Vec::new();
        while let Some(p) = self.nodes[i].parent {
            out.push(i);
            i = p;
        }
        out.reverse();
        out
    }

    fn push(&mut self, parent: usize, token: Token, prob: f64) -> usize {
        let p = &self.nodes[parent];
        let node = DraftNode {
            token,
            parent: Some(parent),
            depth: p.depth + 1,
            path_logprob: p.path_logprob + prob.ln(),
            prob,
        };
        self.nodes.push(node);
        self.dists.push(None);
        self.nodes.len() - 1
    }

    /// Structural checks: parents precede children, depths and path
    /// log-probabilities are consistent.
    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() || self.nodes[0].parent.is_some() {
            bail!(Consistency, "tree must start with a root");
        }
        if self.dists.len() != self.nodes.len() {
            bail!(Consistency, "one distribution slot per node required");
        }
        for (i, n) in self.nodes.iter().enumerate().skip(1) {
            let Some(p) = n.parent else {
                bail!(Consistency, "node {i} has no parent");
            };
            if p >= i {
                bail!(Consistency, "node {i} precedes its parent {p}");
            }
            let pn = &self.nodes[p];
            if n.depth != pn.depth + 1 {
                bail!(Consistency, "node {i} depth {} under depth {}", n.depth, pn.depth);
            }
            if n.path_logprob > pn.path_logprob {
                bail!(Consistency, "node {i} more probable than its parent");
            }
        }
        Ok(())
    }

    /// Re-indexes the tree breadth-first with siblings by descending draft
    /// probability. Returns the tree and `order`, where new index `i` was old
    /// index `order[i]`.
    pub fn canonical(&self) -> (DraftTree, Vec<usize>) {
        let mut order = Vec::with_capacity(self.nodes.len());
        let mut queue = VecDeque::from([0usize]);
        while let Some(i) = queue.pop_front() {
            order.push(i);
            queue.extend(self.children(i));
        }
        let mut new_of = vec![0; self.nodes.len()];
        for (new, &old) in order.iter().enumerate() {
            new_of[old] = new;
        }
        let nodes = order
            .iter()
            .map(|&old| {
                let mut n = self.nodes[old].clone();
                n.parent = n.parent.map(|p| new_of[p]);
                n
            })
            .collect();
        let dists = order.iter().map(|&old| self.dists[old].clone()).collect();
        (DraftTree { nodes, dists }, order)
    }
}

/// Node/depth budget and expansion threshold for tree drafting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeBudget {
    /// Total nodes including the root.
    pub max_nodes: usize,
    pub max_depth: usize,
    pub expand_threshold: f64,
    /// Children added per expansion (the most probable ones).
    pub children: usize,
}

impl Default for TreeBudget {
    fn default() -> Self {
        Self {
            max_nodes: 50,
            max_depth: 10,
            expand_threshold: 0.7,
            children: 2,
        }
    }
}

impl TreeBudget {
    pub fn validate(&self) -> Result<()> {
        if self.max_nodes < 1 || self.max_depth < 1 || self.children < 1 {
            bail!(Parameter, "max_nodes, max_depth and children must be >= 1");
        }
        if !(self.expand_threshold > 0.0 && self.expand_threshold <= 1.0) {
            bail!(Parameter, "expand_threshold must be in (0, 1]");
        }
        Ok(())
    }
}

/// Supplies the draft distribution at a node. Called at most once per node,
/// and only after the node's parent was evaluated.
pub trait NodeDistributions {
    fn evaluate(&mut self, tree: &DraftTree, node: usize) -> Result<Vec<f64>>;
}

/// The `k` most probable tokens of `p` with nonzero probability, by
/// descending probability then ascending token.
pub fn top_children(p: &[f64], k: usize) -> Vec<(Token, f64)> {
    let mut idx: Vec<usize> = (0..p.len()).filter(|&i| p[i] > 0.0).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
    idx.truncate(k);
    idx.into_iter().map(|i| (i, p[i])).collect()
}

/// Grows a tree under `budget`.
///
/// First the greedy chain is laid down to `min(max_depth, max_nodes - 1)`
/// nodes. Then, while room remains, the most probable node that still lacks
/// some of its top children, sits above `max_depth`, and has path
/// probability at least `expand_threshold^depth` receives its missing
/// children (most probable first). Ties go to the earlier node.
pub fn build_tree<S: NodeDistributions>(root: Token, budget: &TreeBudget, source: &mut S) -> Result<DraftTree> {
    budget.validate()?;
    let mut tree = DraftTree::root(root);
    if budget.max_nodes == 1 {
        return Ok(tree);
    }
    let ensure = |tree: &mut DraftTree, i: usize, source: &mut S| -> Result<Vec<f64>> {
        if tree.dists[i].is_none() {
            let d = source.evaluate(tree, i)?;
            tree.dists[i] = Some(d);
        }
        Ok(tree.dists[i].clone().expect("set above"))
    };

    let chain_len = budget.max_depth.min(budget.max_nodes - 1);
    let mut cur = 0;
    for _ in 0..chain_len {
        let p = ensure(&mut tree, cur, source)?;
        let Some(&(tok, prob)) = top_children(&p, 1).first() else {
            break;
        };
        cur = tree.push(cur, tok, prob);
    }

    while tree.len() < budget.max_nodes {
        let mut best: Option<usize> = None;
        for i in 0..tree.len() {
            let n = &tree.nodes[i];
            if n.depth >= budget.max_depth {
                continue;
            }
            if n.path_logprob < (n.depth as f64) * budget.expand_threshold.ln() {
                continue;
            }
            if let Some(d) = &tree.dists[i] {
                let have = tree.children(i).len();
                let want = top_children(d, budget.children).len();
                if have >= want {
                    continue;
                }
            }
            if best.is_none_or(|b| n.path_logprob > tree.nodes[b].path_logprob) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        let p = ensure(&mut tree, b, source)?;
        let existing: Vec<Token> = tree.children(b).iter().map(|&c| tree.nodes[c].token).collect();
        for (tok, prob) in top_children(&p, budget.children) {
            if tree.len() >= budget.max_nodes {
                break;
            }
            if !existing.contains(&tok) {
                tree.push(b, tok, prob);
            }
        }
    }
    Ok(tree)
}

/// New tokens, ancestor-or-self mask and positions of a tree's speculated
/// nodes (root excluded), in index order.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatTree {
    pub tokens: Vec<Token>,
    pub mask: Vec<Vec<bool>>,
    pub positions: Vec<usize>,
}

impl FlatTree {
    /// Same batch with the root prepended; every node sees the root.
    pub fn with_root(&self, root: Token, root_pos: usize) -> FlatTree {
        let n = self.tokens.len() + 1;
        let mut mask = Vec::with_capacity(n);
        mask.push((0..n).map(|j| j == 0).collect());
        for row in &self.mask {
            let mut r = Vec::with_capacity(n);
            r.push(true);
            r.extend_from_slice(row);
            mask.push(r);
        }
        let mut tokens = vec![root];
        tokens.extend_from_slice(&self.tokens);
        let mut positions = vec![root_pos];
        positions.extend_from_slice(&self.positions);
        FlatTree {
            tokens,
            mask,
            positions,
        }
    }
}

/// Flattens the speculated nodes of `tree` for one masked forward pass.
/// Positions are `root_pos + depth`.
pub fn flatten_tree(tree: &DraftTree, root_pos: usize) -> Result<FlatTree> {
    tree.validate()?;
    let n = tree.drafted();
    let mut mask = vec![vec![false; n]; n];
    for i in 0..n {
        let mut a = i + 1;
        while a != 0 {
            mask[i][a - 1] = true;
            a = tree.nodes[a].parent.expect("non-root has a parent");
        }
    }
    Ok(FlatTree {
        tokens: tree.nodes[1..].iter().map(|n| n.token).collect(),
        mask,
        positions: tree.nodes[1..].iter().map(|n| root_pos + n.depth).collect(),
    })
}

/// Draft distributions from the draft model. The root's distribution comes
/// from the caller's catch-up forward; every other node is forwarded into
/// the speculative segment of `cache`, seeing its speculated ancestors.
pub struct ModelSource<'a> {
    pub model: &'a Model,
    pub cache: &'a mut LayerKVCache,
    pub root_dist: Vec<f64>,
    pub root_pos: usize,
    pub temperature: f64,
    pub attn: AttentionConfig,
    /// Speculative slot of each evaluated node (indexed like the tree being
    /// built).
    pub slots: Vec<Option<usize>>,
    /// Raw logits of each evaluated non-root node.
    pub logits: Vec<Option<Vec<f64>>>,
    /// Number of draft forward passes issued.
    pub forwards: usize,
}

/// A drafted tree with the draft-side bookkeeping, indexed like the tree.
#[derive(Debug, Clone)]
pub struct Drafted {
    pub tree: DraftTree,
    /// Speculative slot in the draft cache of every forwarded node.
    pub slots: Vec<Option<usize>>,
    /// Draft logits at every forwarded node.
    pub logits: Vec<Option<Vec<f64>>>,
}

impl<'a> ModelSource<'a> {
    pub fn new(
        model: &'a Model,
        cache: &'a mut LayerKVCache,
        root_dist: Vec<f64>,
        root_pos: usize,
        temperature: f64,
        attn: AttentionConfig,
    ) -> Self {
        Self {
            model,
            cache,
            root_dist,
            root_pos,
            temperature,
            attn,
            slots: Vec::new(),
            logits: Vec::new(),
            forwards: 0,
        }
    }
}

impl NodeDistributions for ModelSource<'_> {
    fn evaluate(&mut self, tree: &DraftTree, node: usize) -> Result<Vec<f64>> {
        if self.slots.len() < tree.len() {
            self.slots.resize(tree.len(), None);
            self.logits.resize(tree.len(), None);
        }
        if node == 0 {
            return Ok(self.root_dist.clone());
        }
        let width = self.cache.speculative_len() + 1;
        let mut vis = vec![false; width];
        for a in tree.path(node) {
            let slot = if a == node {
                width - 1
            } else {
                match self.slots[a] {
                    Some(s) => s,
                    None => bail!(State, "ancestor {a} of node {node} was never evaluated"),
                }
            };
            vis[slot] = true;
        }
        let n = &tree.nodes[node];
        let out = decode_speculative(
            self.model,
            &[n.token],
            self.cache,
            &[vis],
            &[self.root_pos + n.depth],
            Capture::None,
            self.attn,
        )?;
        self.forwards += 1;
        self.slots[node] = Some(width - 1);
        let logits = out.logits.into_data();
        let dist = distribution(&logits, self.temperature);
        self.logits[node] = Some(logits);
        Ok(dist)
    }
}

/// Dynamic tree drafting with the draft model, in canonical order.
pub fn draft_tree(source: &mut ModelSource<'_>, root: Token, budget: &TreeBudget) -> Result<Drafted> {
    let tree = build_tree(root, budget, source)?;
    source.slots.resize(tree.len(), None);
    source.logits.resize(tree.len(), None);
    let (canon, order) = tree.canonical();
    Ok(Drafted {
        tree: canon,
        slots: order.iter().map(|&old| source.slots[old]).collect(),
        logits: order.iter().map(|&old| source.logits[old].clone()).collect(),
    })
}

/// Samples a chain of `k` tokens. Each drafted token except the last is
/// forwarded so the next distribution is available; `p_i` is stored on the
/// parent of node `i`.
pub fn draft_chain(source: &mut ModelSource<'_>, root: Token, k: usize, rng: &mut Rng) -> Result<Drafted> {
    if k < 1 {
        bail!(Parameter, "chain length must be >= 1");
    }
    let mut tree = DraftTree::root(root);
    let mut cur = 0;
    for _ in 0..k {
        let p = source.evaluate(&tree, cur)?;
        let tok = sample_categorical(&p, rng)?;
        let prob = p[tok];
        tree.dists[cur] = Some(p);
        cur = tree.push(cur, tok, prob);
    }
    source.slots.resize(tree.len(), None);
    source.logits.resize(tree.len(), None);
    Ok(Drafted {
        tree,
        slots: source.slots.clone(),
        logits: source.logits.clone(),
    })
}

/// Chain tokens and their draft distributions, root to leaf.
pub fn chain_parts(tree: &DraftTree) -> Result<(Vec<Token>, Vec<Vec<f64>>)> {
    let mut tokens = Vec::new();
    let mut dists = Vec::new();
    for (i, n) in tree.nodes.iter().enumerate().skip(1) {
        if n.parent != Some(i - 1) {
            bail!(Parameter, "tree is not a chain");
        }
        let Some(p) = &tree.dists[i - 1] else {
            bail!(State, "missing draft distribution for chain node {i}");
        };
        tokens.push(n.token);
        dists.push(p.clone());
    }
    Ok((tokens, dists))
}
