//! Target-side verification.
//!
//! Acceptance uses rollout-match semantics: the target produces one rollout
//! and the accepted length is the longest common prefix between that rollout
//! and any branch of the draft tree. Every cycle of the decode loop also emits
//! the rollout's next token after the matched prefix, so the output stream is
//! exactly the target's own sampling stream whatever the drafter does.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{argmax, sample_sequence, sequence_log_prob, ConditionalModel, Temperature, Token};
use crate::tree::{build_draft_tree, DraftTree, TreePolicyConfig};

/// Largest rollout space [`expected_acceptance_exact`] will enumerate.
pub const ENUMERATION_LIMIT: u128 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub tokens: Vec<Token>,
    pub log_prob: f64,
}

/// Argmax chain of the target, lowest token id on ties.
pub fn greedy_rollout<M>(target: &M, ctx: &[Token], depth: usize) -> Result<Vec<Token>>
where
    M: ConditionalModel + ?Sized,
{
    target.vocab().check_all(ctx)?;
    let mut buf = ctx.to_vec();
    for _ in 0..depth {
        let next = argmax(&target.base_distribution(&buf)?) as Token;
        buf.push(next);
    }
    Ok(buf.split_off(ctx.len()))
}

pub fn sample_rollout<M, R>(target: &M, ctx: &[Token], depth: usize, temp: Temperature, rng: &mut R) -> Result<Rollout>
where
    M: ConditionalModel + ?Sized,
    R: Rng + ?Sized,
{
    let tokens = sample_sequence(target, ctx, depth, temp, rng)?;
    let log_prob = sequence_log_prob(target, ctx, &tokens, temp)?;
    Ok(Rollout { tokens, log_prob })
}

fn common_prefix(a: &[Token], b: &[Token]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

/// Outcome of matching one rollout against a tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchMatch {
    pub accepted: usize,
    /// Highest-confidence branch achieving `accepted`; `None` when nothing matched.
    pub branch: Option<usize>,
    /// Number of branches achieving `accepted` (zero when nothing matched).
    pub ties: usize,
}

pub fn best_match(tree: &DraftTree, rollout: &[Token]) -> BranchMatch {
    let mut best = BranchMatch { accepted: 0, branch: None, ties: 0 };
    for (i, b) in tree.branches().iter().enumerate() {
        let lcp = common_prefix(&b.tokens, rollout);
        if lcp == 0 {
            continue;
        }
        if lcp > best.accepted {
            best = BranchMatch { accepted: lcp, branch: Some(i), ties: 1 };
        } else if lcp == best.accepted {
            best.ties += 1;
        }
    }
    best
}

/// Longest common prefix between the rollout and any branch.
pub fn acceptance_length(tree: &DraftTree, rollout: &[Token]) -> usize {
    best_match(tree, rollout).accepted
}

/// Exact expected acceptance length of `tree` (rooted at its own context) by
/// enumerating every target rollout as deep as the longest branch. At
/// temperature zero this is the acceptance against the greedy rollout.
pub fn expected_acceptance_exact<M>(target: &M, tree: &DraftTree, temp: Temperature) -> Result<f64>
where
    M: ConditionalModel + ?Sized,
{
    let depth = tree.max_branch_len();
    let ctx = tree.context();
    if temp.is_greedy() {
        let rollout = greedy_rollout(target, ctx, depth)?;
        return Ok(acceptance_length(tree, &rollout) as f64);
    }
    let v = target.vocab().size() as u128;
    let needed = v.checked_pow(depth as u32).unwrap_or(u128::MAX);
    if needed > ENUMERATION_LIMIT {
        return Err(Error::Capacity { needed, limit: ENUMERATION_LIMIT });
    }
    let mut buf = ctx.to_vec();
    let mut total = 0.0;
    enumerate_rollouts(target, tree, temp, ctx.len(), depth, 1.0, &mut buf, &mut total)?;
    Ok(total)
}

#[allow(clippy::too_many_arguments)]
fn enumerate_rollouts<M>(
    target: &M,
    tree: &DraftTree,
    temp: Temperature,
    root_len: usize,
    depth: usize,
    prob: f64,
    buf: &mut Vec<Token>,
    total: &mut f64,
) -> Result<()>
where
    M: ConditionalModel + ?Sized,
{
    if buf.len() - root_len == depth {
        *total += prob * acceptance_length(tree, &buf[root_len..]) as f64;
        return Ok(());
    }
    let dist = target.next_distribution(buf, temp)?;
    for (tok, &p) in dist.iter().enumerate() {
        if p > 0.0 {
            buf.push(tok as Token);
            enumerate_rollouts(target, tree, temp, root_len, depth, prob * p, buf, total)?;
            buf.pop();
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
}

/// Monte-Carlo estimate of the expected acceptance length from `n_samples`
/// independent target rollouts.
pub fn expected_acceptance_mc<M, R>(
    target: &M,
    tree: &DraftTree,
    temp: Temperature,
    n_samples: usize,
    rng: &mut R,
) -> Result<McEstimate>
where
    M: ConditionalModel + ?Sized,
    R: Rng + ?Sized,
{
    if temp.is_greedy() {
        return Err(Error::domain("Monte-Carlo estimation needs a positive temperature"));
    }
    if n_samples == 0 {
        return Err(Error::domain("n_samples must be >= 1"));
    }
    let depth = tree.max_branch_len();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n_samples {
        let rollout = sample_sequence(target, tree.context(), depth, temp, rng)?;
        let a = acceptance_length(tree, &rollout) as f64;
        sum += a;
        sum_sq += a * a;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let std_error = if n_samples > 1 {
        let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(McEstimate { mean, std_error })
}

/// Simulated cost of one verification pass and of one draft layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub target_pass_cost: f64,
    pub draft_pass_cost: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel { target_pass_cost: 1.0, draft_pass_cost: 0.05 }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_pass_cost > 0.0) || !(self.draft_pass_cost >= 0.0) {
            return Err(Error::Config(format!(
                "cost model needs target_pass_cost > 0 and draft_pass_cost >= 0, got {:?}",
                self
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeMetrics {
    pub tau: f64,
    pub cycles: u64,
    pub total_tokens: u64,
    pub speedup_proxy: f64,
    pub greedy_pruned_frac: f64,
    pub greedy_accept_match_frac: f64,
    /// `per_cycle_histogram[a]` counts cycles that emitted `a` tokens.
    pub per_cycle_histogram: Vec<u64>,
    pub greedy_pruned_cycles: u64,
    pub greedy_match_cycles: u64,
    /// Cycles where several branches tied for the longest match.
    pub tie_cycles: u64,
    pub total_cost: f64,
    pub target_pass_cost: f64,
}

impl DecodeMetrics {
    pub fn empty(cost: &CostModel) -> Self {
        DecodeMetrics {
            tau: 0.0,
            cycles: 0,
            total_tokens: 0,
            speedup_proxy: 0.0,
            greedy_pruned_frac: 0.0,
            greedy_accept_match_frac: 0.0,
            per_cycle_histogram: Vec::new(),
            greedy_pruned_cycles: 0,
            greedy_match_cycles: 0,
            tie_cycles: 0,
            total_cost: 0.0,
            target_pass_cost: cost.target_pass_cost,
        }
    }

    fn record_cycle(&mut self, emitted: usize, cost: f64, pruned: bool, matched: bool, tied: bool) {
        if self.per_cycle_histogram.len() <= emitted {
            self.per_cycle_histogram.resize(emitted + 1, 0);
        }
        self.per_cycle_histogram[emitted] += 1;
        self.cycles += 1;
        self.total_tokens += emitted as u64;
        self.total_cost += cost;
        self.greedy_pruned_cycles += pruned as u64;
        self.greedy_match_cycles += matched as u64;
        self.tie_cycles += tied as u64;
        self.refresh();
    }

    fn refresh(&mut self) {
        if self.cycles == 0 {
            return;
        }
        let c = self.cycles as f64;
        self.tau = self.total_tokens as f64 / c;
        self.speedup_proxy = self.total_tokens as f64 * self.target_pass_cost / self.total_cost;
        self.greedy_pruned_frac = self.greedy_pruned_cycles as f64 / c;
        self.greedy_accept_match_frac = self.greedy_match_cycles as f64 / c;
    }

    /// Pools the cycles of two runs.
    pub fn merge(&mut self, other: &DecodeMetrics) {
        if self.per_cycle_histogram.len() < other.per_cycle_histogram.len() {
            self.per_cycle_histogram.resize(other.per_cycle_histogram.len(), 0);
        }
        for (a, b) in self.per_cycle_histogram.iter_mut().zip(&other.per_cycle_histogram) {
            *a += b;
        }
        self.cycles += other.cycles;
        self.total_tokens += other.total_tokens;
        self.total_cost += other.total_cost;
        self.greedy_pruned_cycles += other.greedy_pruned_cycles;
        self.greedy_match_cycles += other.greedy_match_cycles;
        self.tie_cycles += other.tie_cycles;
        self.refresh();
    }

    /// The per-run JSON record.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "tau": self.tau,
            "cycles": self.cycles,
            "total_tokens": self.total_tokens,
            "speedup_proxy": self.speedup_proxy,
            "greedy_pruned_frac": self.greedy_pruned_frac,
            "greedy_accept_match_frac": self.greedy_accept_match_frac,
            "per_cycle_histogram": self.per_cycle_histogram,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub tokens: Vec<Token>,
    pub metrics: DecodeMetrics,
    /// Tokens emitted by each cycle, in order.
    pub cycle_accepts: Vec<usize>,
}

/// Draft-then-verify loop until `max_tokens` tokens have been emitted.
#[allow(clippy::too_many_arguments)]
pub fn speculative_decode<T, D, R>(
    target: &T,
    draft: &D,
    prompt: &[Token],
    max_tokens: usize,
    policy: &TreePolicyConfig,
    temp: Temperature,
    cost: &CostModel,
    rng: &mut R,
) -> Result<DecodeOutput>
where
    T: ConditionalModel + ?Sized,
    D: ConditionalModel + ?Sized,
    R: Rng + ?Sized,
{
    if max_tokens == 0 {
        return Err(Error::domain("max_tokens must be >= 1"));
    }
    if target.vocab() != draft.vocab() {
        return Err(Error::VocabMismatch { left: target.vocab().size(), right: draft.vocab().size() });
    }
    policy.validate()?;
    cost.validate()?;

    let mut ctx = prompt.to_vec();
    let mut metrics = DecodeMetrics::empty(cost);
    let mut cycle_accepts = Vec::new();
    let cycle_cost = cost.target_pass_cost + policy.depth as f64 * cost.draft_pass_cost;

    while ctx.len() - prompt.len() < max_tokens {
        let tree = build_draft_tree(draft, &ctx, policy)?;
        let rollout = if temp.is_greedy() {
            greedy_rollout(target, &ctx, policy.depth + 1)?
        } else {
            sample_sequence(target, &ctx, policy.depth + 1, temp, rng)?
        };
        let m = best_match(&tree, &rollout);
        let room = max_tokens - (ctx.len() - prompt.len());
        let emitted = (m.accepted + 1).min(room);
        ctx.extend_from_slice(&rollout[..emitted]);

        let greedy = tree.greedy_branch();
        let matched = m.branch.is_some() && m.branch == greedy;
        if m.ties > 1 {
            log::trace!("cycle {}: {} branches tie at {} tokens", metrics.cycles, m.ties, m.accepted);
        }
        metrics.record_cycle(emitted, cycle_cost, greedy.is_none(), matched, m.ties > 1);
        cycle_accepts.push(emitted);
    }

    Ok(DecodeOutput { tokens: ctx.split_off(prompt.len()), metrics, cycle_accepts })
}
