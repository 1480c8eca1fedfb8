//! Sampling-free tree reward.
//!
//! Each branch gets its expected number of accepted tokens under the target,
//! `L = Σ_j Π_{k≤j} p_target(token_k | ctx, tokens_<k)`, and the tree reward
//! aggregates the per-branch values, by default with a log-sum-exp smooth max.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{ConditionalModel, Temperature, Token};
use crate::tree::DraftTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    /// `(1/η) log Σ exp(η L_i)`
    Lse,
    Max,
    /// `(1/N) Σ L_i`
    SumAvg,
}

impl Aggregator {
    pub const ALL: [Aggregator; 3] = [Aggregator::Lse, Aggregator::Max, Aggregator::SumAvg];

    pub fn name(self) -> &'static str {
        match self {
            Aggregator::Lse => "lse",
            Aggregator::Max => "max",
            Aggregator::SumAvg => "sum_avg",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub eta: f64,
    pub aggregator: Aggregator,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig { eta: 1.0, aggregator: Aggregator::Lse }
    }
}

impl RewardConfig {
    pub fn lse(eta: f64) -> Self {
        RewardConfig { eta, aggregator: Aggregator::Lse }
    }

    pub fn validate(&self) -> Result<()> {
        if self.aggregator == Aggregator::Lse && !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be a positive finite number, got {}", self.eta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchScore {
    pub branch: usize,
    pub expected_len: f64,
    /// Cumulative match probability at each depth.
    pub chain: Vec<f64>,
}

/// Expected accepted length of one branch under the target at `temp`.
pub fn branch_expected_acceptance<M>(target: &M, ctx: &[Token], branch: &[Token], temp: Temperature) -> Result<BranchScore>
where
    M: ConditionalModel + ?Sized,
{
    if branch.is_empty() {
        return Err(Error::domain("branch must be nonempty"));
    }
    target.vocab().check_all(branch)?;
    let mut buf = ctx.to_vec();
    let mut chain = Vec::with_capacity(branch.len());
    let mut running = 1.0;
    for &tok in branch {
        if running > 0.0 {
            running *= target.next_distribution(&buf, temp)?[tok as usize];
        }
        chain.push(running);
        buf.push(tok);
    }
    let expected_len = chain.iter().sum();
    Ok(BranchScore { branch: 0, expected_len, chain })
}

/// Scores every branch of `tree` against the target.
pub fn score_tree<M>(target: &M, tree: &DraftTree, temp: Temperature) -> Result<Vec<BranchScore>>
where
    M: ConditionalModel + ?Sized,
{
    tree.branches()
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let mut s = branch_expected_acceptance(target, tree.context(), &b.tokens, temp)?;
            s.branch = i;
            Ok(s)
        })
        .collect()
}

/// `(1/η) log Σ exp(η x_i)` with the max shifted out.
pub fn smooth_max(values: &[f64], eta: f64) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.iter().map(|&x| (eta * (x - max)).exp()).sum();
    max + sum.ln() / eta
}

pub fn aggregate(values: &[f64], cfg: &RewardConfig) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::domain("tree reward needs at least one branch score"));
    }
    cfg.validate()?;
    Ok(match cfg.aggregator {
        Aggregator::Lse => smooth_max(values, cfg.eta),
        Aggregator::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Aggregator::SumAvg => values.iter().sum::<f64>() / values.len() as f64,
    })
}

pub fn tree_reward(scores: &[BranchScore], cfg: &RewardConfig) -> Result<f64> {
    let values: Vec<f64> = scores.iter().map(|s| s.expected_len).collect();
    aggregate(&values, cfg)
}

/// `∂r/∂L_i` for the smooth max: the softmax of `η L`.
pub fn grad_tree_reward_wrt_target_chain(scores: &[BranchScore], cfg: &RewardConfig) -> Result<Vec<f64>> {
    if cfg.aggregator != Aggregator::Lse {
        return Err(Error::domain("reward weights are defined for the lse aggregator only"));
    }
    if scores.is_empty() {
        return Err(Error::domain("tree reward needs at least one branch score"));
    }
    cfg.validate()?;
    let max = scores.iter().map(|s| s.expected_len).fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = scores.iter().map(|s| (cfg.eta * (s.expected_len - max)).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= z);
    Ok(w)
}
