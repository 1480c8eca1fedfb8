//! Draft-tree construction.
//!
//! The policy grows a tree layer by layer. At each depth every (frontier node,
//! next token) pair is a candidate scored by its path confidence, the product
//! of draft probabilities from the root. The `layer_topk` best candidates
//! across the whole layer are kept. After the last layer all leaves are
//! re-ranked by confidence and only the best `leaf_budget` survive; the
//! root-to-leaf paths of the survivors are the branches.
//!
//! Ordering rules, used everywhere a ranking is needed: higher confidence,
//! then higher single-step draft probability, then lower token id, then the
//! older parent (or older node, for leaves).

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{argmax, ConditionalModel, Temperature, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreePolicyConfig {
    pub depth: usize,
    pub layer_topk: usize,
    pub leaf_budget: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_budget: Option<usize>,
}

impl Default for TreePolicyConfig {
    fn default() -> Self {
        TreePolicyConfig { depth: 7, layer_topk: 10, leaf_budget: 60, token_budget: Some(60) }
    }
}

impl TreePolicyConfig {
    pub fn new(depth: usize, layer_topk: usize, leaf_budget: usize) -> Result<Self> {
        let cfg = TreePolicyConfig { depth, layer_topk, leaf_budget, token_budget: None };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_token_budget(mut self, budget: usize) -> Result<Self> {
        self.token_budget = Some(budget);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.layer_topk == 0 || self.leaf_budget == 0 {
            return Err(Error::Config(format!(
                "tree depth, layer_topk and leaf_budget must be >= 1 (got {}, {}, {})",
                self.depth, self.layer_topk, self.leaf_budget
            )));
        }
        if let Some(b) = self.token_budget {
            if b < self.depth {
                return Err(Error::Config(format!("token_budget {b} is smaller than depth {}", self.depth)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftNode {
    pub token: Token,
    /// Index into [`DraftTree::nodes`]; `None` for children of the root.
    pub parent: Option<usize>,
    pub draft_prob: f64,
    pub path_confidence: f64,
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub tokens: Vec<Token>,
    pub confidence: f64,
    pub leaf: usize,
}

impl Branch {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftTree {
    context: Vec<Token>,
    nodes: Vec<DraftNode>,
    branches: Vec<Branch>,
    layers: usize,
    greedy_branch: Option<usize>,
}

/// One row of the machine-readable tree dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyEntry {
    pub id: usize,
    pub parent: Option<usize>,
    pub token: Token,
    pub depth: usize,
    pub draft_prob: f64,
    pub confidence: f64,
}

struct Candidate {
    parent_rank: usize,
    parent: Option<usize>,
    token: Token,
    draft_prob: f64,
    confidence: f64,
}

fn rank_desc(a_conf: f64, a_prob: f64, b_conf: f64, b_prob: f64) -> Ordering {
    b_conf.total_cmp(&a_conf).then(b_prob.total_cmp(&a_prob))
}

fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    rank_desc(a.confidence, a.draft_prob, b.confidence, b.draft_prob)
        .then(a.token.cmp(&b.token))
        .then(a.parent_rank.cmp(&b.parent_rank))
}

/// Builds the draft tree for `ctx` with the two-stage policy. Drafting always
/// reads the draft model's base (temperature 1) distribution.
pub fn build_draft_tree<M>(draft: &M, ctx: &[Token], cfg: &TreePolicyConfig) -> Result<DraftTree>
where
    M: ConditionalModel + ?Sized,
{
    cfg.validate()?;
    draft.vocab().check_all(ctx)?;

    let mut nodes: Vec<DraftNode> = Vec::new();
    let mut has_child: Vec<bool> = Vec::new();
    // Frontier in selection order; `None` is the root.
    let mut frontier: Vec<Option<usize>> = vec![None];
    // Frontier entry on the draft-argmax chain, if that chain is still alive.
    let mut greedy_cursor: Option<Option<usize>> = Some(None);
    let mut layers = 0;
    let mut path = ctx.to_vec();

    for depth in 1..=cfg.depth {
        let remaining = cfg.token_budget.map_or(usize::MAX, |b| b.saturating_sub(nodes.len()));
        if remaining == 0 || frontier.is_empty() {
            break;
        }
        let mut candidates = Vec::new();
        let mut greedy_child: Option<(Option<usize>, Token)> = None;
        for (rank, &parent) in frontier.iter().enumerate() {
            path.truncate(ctx.len());
            path.extend(path_tokens(&nodes, parent));
            let dist = draft.next_distribution(&path, Temperature::UNIT)?;
            let parent_conf = parent.map_or(1.0, |p| nodes[p].path_confidence);
            if greedy_cursor == Some(parent) {
                greedy_child = Some((parent, argmax(&dist) as Token));
            }
            for (tok, &p) in dist.iter().enumerate() {
                if p > 0.0 {
                    candidates.push(Candidate {
                        parent_rank: rank,
                        parent,
                        token: tok as Token,
                        draft_prob: p,
                        confidence: parent_conf * p,
                    });
                }
            }
        }
        candidates.sort_by(candidate_order);
        candidates.truncate(cfg.layer_topk.min(remaining));

        let mut next_frontier = Vec::with_capacity(candidates.len());
        let mut next_greedy = None;
        for c in candidates {
            let id = nodes.len();
            if let Some(p) = c.parent {
                has_child[p] = true;
            }
            if greedy_child == Some((c.parent, c.token)) {
                next_greedy = Some(Some(id));
            }
            nodes.push(DraftNode {
                token: c.token,
                parent: c.parent,
                draft_prob: c.draft_prob,
                path_confidence: c.confidence,
                depth,
            });
            has_child.push(false);
            next_frontier.push(Some(id));
        }
        greedy_cursor = next_greedy;
        frontier = next_frontier;
        layers = depth;
    }

    // Stage two: re-rank leaves and keep the best `leaf_budget`.
    let mut leaves: Vec<usize> = (0..nodes.len()).filter(|&i| !has_child[i]).collect();
    leaves.sort_by(|&a, &b| {
        let (na, nb) = (&nodes[a], &nodes[b]);
        rank_desc(na.path_confidence, na.draft_prob, nb.path_confidence, nb.draft_prob)
            .then(na.token.cmp(&nb.token))
            .then(a.cmp(&b))
    });
    leaves.truncate(cfg.leaf_budget);

    // Keep only ancestors of retained leaves, preserving creation order.
    let mut keep = vec![false; nodes.len()];
    for &leaf in &leaves {
        let mut cur = Some(leaf);
        while let Some(i) = cur {
            if keep[i] {
                break;
            }
            keep[i] = true;
            cur = nodes[i].parent;
        }
    }
    let mut remap = vec![usize::MAX; nodes.len()];
    let mut kept = Vec::new();
    for (i, node) in nodes.iter().enumerate() {
        if keep[i] {
            remap[i] = kept.len();
            let mut n = node.clone();
            n.parent = n.parent.map(|p| remap[p]);
            kept.push(n);
        }
    }

    let mut branches: Vec<Branch> = leaves
        .iter()
        .map(|&leaf| Branch {
            tokens: path_tokens(&nodes, Some(leaf)),
            confidence: nodes[leaf].path_confidence,
            leaf: remap[leaf],
        })
        .collect();
    branches.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then_with(|| a.tokens.cmp(&b.tokens)));

    let greedy_branch = match greedy_cursor {
        Some(Some(leaf)) if keep[leaf] && nodes[leaf].depth == layers => {
            branches.iter().position(|b| b.leaf == remap[leaf])
        }
        _ => None,
    };

    Ok(DraftTree { context: ctx.to_vec(), nodes: kept, branches, layers, greedy_branch })
}

fn path_tokens(nodes: &[DraftNode], mut cur: Option<usize>) -> Vec<Token> {
    let mut out = Vec::new();
    while let Some(i) = cur {
        out.push(nodes[i].token);
        cur = nodes[i].parent;
    }
    out.reverse();
    out
}

impl DraftTree {
    /// Tree holding exactly the given branches, in the given order. Branches
    /// must be nonempty, distinct, and no branch may be a prefix of another.
    /// Draft probabilities are unknown here and recorded as 1.
    pub fn from_branches(ctx: Vec<Token>, branches: Vec<Vec<Token>>) -> Result<DraftTree> {
        if branches.is_empty() {
            return Err(Error::domain("a tree needs at least one branch"));
        }
        for (i, a) in branches.iter().enumerate() {
            if a.is_empty() {
                return Err(Error::domain("branches must be nonempty"));
            }
            for b in &branches[i + 1..] {
                if a.starts_with(b) || b.starts_with(a) {
                    return Err(Error::domain(format!("branch {a:?} overlaps {b:?}")));
                }
            }
        }
        let mut nodes: Vec<DraftNode> = Vec::new();
        let mut out = Vec::with_capacity(branches.len());
        for tokens in branches {
            let mut parent = None;
            for (d, &t) in tokens.iter().enumerate() {
                let existing = nodes.iter().position(|n| n.parent == parent && n.token == t);
                let id = existing.unwrap_or_else(|| {
                    nodes.push(DraftNode { token: t, parent, draft_prob: 1.0, path_confidence: 1.0, depth: d + 1 });
                    nodes.len() - 1
                });
                parent = Some(id);
            }
            out.push(Branch { tokens, confidence: 1.0, leaf: parent.expect("nonempty branch") });
        }
        let layers = out.iter().map(Branch::len).max().unwrap_or(0);
        Ok(DraftTree { context: ctx, nodes, branches: out, layers, greedy_branch: None })
    }

    pub fn context(&self) -> &[Token] {
        &self.context
    }

    pub fn nodes(&self) -> &[DraftNode] {
        &self.nodes
    }

    /// Branches in enumeration order: descending confidence, then
    /// lexicographic tokens.
    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    /// Number of layers actually expanded.
    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn max_branch_len(&self) -> usize {
        self.branches.iter().map(Branch::len).max().unwrap_or(0)
    }

    /// `(tokens, length, confidence)` per branch, in enumeration order.
    pub fn enumerate_branches(&self) -> Vec<(Vec<Token>, usize, f64)> {
        self.branches.iter().map(|b| (b.tokens.clone(), b.len(), b.confidence)).collect()
    }

    /// Index of the branch that follows the draft's locally most likely child
    /// at every layer, if that path survived both stages.
    pub fn greedy_branch(&self) -> Option<usize> {
        self.greedy_branch
    }

    pub fn to_adjacency(&self) -> Vec<AdjacencyEntry> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(id, n)| AdjacencyEntry {
                id,
                parent: n.parent,
                token: n.token,
                depth: n.depth,
                draft_prob: n.draft_prob,
                confidence: n.path_confidence,
            })
            .collect()
    }

    /// Indented dump, children listed in creation order.
    pub fn to_indented_text(&self) -> String {
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        let mut roots = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            match n.parent {
                Some(p) => children[p].push(i),
                None => roots.push(i),
            }
        }
        let mut out = String::from("root (1.0000)\n");
        let mut stack: Vec<usize> = roots.into_iter().rev().collect();
        while let Some(i) = stack.pop() {
            let n = &self.nodes[i];
            let leaf = if children[i].is_empty() { " *" } else { "" };
            let _ = writeln!(
                out,
                "{}{} p={:.4} ({:.4}){}",
                "  ".repeat(n.depth),
                n.token,
                n.draft_prob,
                n.path_confidence,
                leaf
            );
            stack.extend(children[i].iter().rev());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{TabularMarkovModel, Vocab};

    fn forced_cycle(v: usize) -> TabularMarkovModel {
        TabularMarkovModel::from_fn(Vocab::new(v).unwrap(), 1, 0, |s| {
            let mut row = vec![0.0; v];
            row[(s + 1) % v] = 1.0;
            row
        })
        .unwrap()
    }

    #[test]
    fn one_hot_drafter_gives_single_branch() {
        let m = forced_cycle(4);
        for k in 1..4 {
            let tree = build_draft_tree(&m, &[0], &TreePolicyConfig::new(3, k, 5).unwrap()).unwrap();
            assert_eq!(tree.branches().len(), 1);
            assert_eq!(tree.branches()[0].tokens, vec![1, 2, 3]);
            assert_eq!(tree.branches()[0].confidence, 1.0);
            assert_eq!(tree.greedy_branch(), Some(0));
        }
    }

    #[test]
    fn config_validation() {
        assert!(TreePolicyConfig::new(0, 1, 1).is_err());
        assert!(TreePolicyConfig::new(3, 0, 1).is_err());
        assert!(TreePolicyConfig::new(3, 1, 0).is_err());
        assert!(TreePolicyConfig::new(3, 1, 1).unwrap().with_token_budget(2).is_err());
        assert!(TreePolicyConfig::default().validate().is_ok());
    }

    #[test]
    fn token_budget_caps_nodes() {
        let m = TabularMarkovModel::from_fn(Vocab::new(4).unwrap(), 0, 0, |_| vec![0.4, 0.3, 0.2, 0.1]).unwrap();
        let cfg = TreePolicyConfig::new(3, 3, 10).unwrap().with_token_budget(5).unwrap();
        let tree = build_draft_tree(&m, &[], &cfg).unwrap();
        assert!(tree.nodes().len() <= 5);
        assert_eq!(tree.layers(), 2);
    }

    #[test]
    fn symmetric_drafter_greedy_uses_lowest_token() {
        let m = TabularMarkovModel::from_fn(Vocab::new(2).unwrap(), 0, 0, |_| vec![0.5, 0.5]).unwrap();
        let tree = build_draft_tree(&m, &[], &TreePolicyConfig::new(2, 2, 4).unwrap()).unwrap();
        let g = tree.greedy_branch().unwrap();
        assert_eq!(tree.branches()[g].tokens, vec![0, 0]);
        // full ties fall to the token id before the parent rank
        let toks: Vec<_> = tree.branches().iter().map(|b| b.tokens.clone()).collect();
        assert_eq!(toks, vec![vec![0, 0], vec![1, 0]]);

        // leaf budget 1 keeps the lowest-token leaf, which is the greedy path
        let tree = build_draft_tree(&m, &[], &TreePolicyConfig::new(2, 2, 1).unwrap()).unwrap();
        assert_eq!(tree.greedy_branch(), Some(0));
    }

    #[test]
    fn indented_dump_lists_every_node() {
        let m = TabularMarkovModel::from_fn(Vocab::new(3).unwrap(), 0, 0, |_| vec![0.5, 0.3, 0.2]).unwrap();
        let tree = build_draft_tree(&m, &[], &TreePolicyConfig::new(2, 2, 3).unwrap()).unwrap();
        let text = tree.to_indented_text();
        assert_eq!(text.lines().count(), tree.nodes().len() + 1);
        assert_eq!(tree.to_adjacency().len(), tree.nodes().len());
    }
}
