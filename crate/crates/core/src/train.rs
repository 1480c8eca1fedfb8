//! Two-phase draft training.
//!
//! Phase I fits the draft to the target with the token-level cross-entropy
//! and freezes the result as the reference model. Phase II keeps the token
//! loss and adds a group-based clipped surrogate on the tree reward:
//!
//! 1. pick non-overlapping groups of `m` adjacent prefix positions,
//! 2. build a tree from each prefix with the current and the reference
//!    drafter and score both,
//! 3. debias (current minus reference) and standardize within the group,
//! 4. take the branch with the highest expected acceptance as the accepted
//!    sequence and form the per-token geometric-mean likelihood ratio,
//! 5. minimize `token_loss + ω · clipped_surrogate`.
//!
//! Tree topology, accepted sequences, rewards and advantages are constants
//! within a step; only the ratio carries gradient.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{ConditionalModel, LinearSoftmaxDraftModel, Temperature, Token, TokenLossBatch};
use crate::reward::{score_tree, tree_reward, RewardConfig};
use crate::tree::{build_draft_tree, DraftTree, TreePolicyConfig};
use crate::verify::{best_match, greedy_rollout};

/// `G = {start, …, start + size − 1}` over 1-based prefix lengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub start: usize,
    pub size: usize,
}

impl Group {
    pub fn indices(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.size
    }

    pub fn end(&self) -> usize {
        self.start + self.size - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupPlacement {
    /// Uniform over all non-overlapping placements.
    #[default]
    Uniform,
    /// Back to back from position 1.
    Packed,
}

/// Up to `min(max_groups, ⌊seq_len/size⌋)` non-overlapping groups, sorted by
/// start. Empty when the sequence is shorter than one group.
pub fn sample_groups<R: Rng + ?Sized>(
    seq_len: usize,
    size: usize,
    max_groups: usize,
    placement: GroupPlacement,
    rng: &mut R,
) -> Vec<Group> {
    if size == 0 || seq_len < size {
        return Vec::new();
    }
    let n = max_groups.min(seq_len / size);
    if n == 0 {
        return Vec::new();
    }
    let slack = seq_len - n * size;
    let offsets: Vec<usize> = match placement {
        GroupPlacement::Packed => (0..n).collect(),
        GroupPlacement::Uniform => {
            // Stars and bars: n sorted picks from slack + n slots fix the gaps.
            let mut picks = sample(rng, slack + n, n).into_vec();
            picks.sort_unstable();
            picks
        }
    };
    offsets
        .into_iter()
        .enumerate()
        .map(|(k, c)| Group { start: 1 + c + k * (size - 1), size })
        .collect()
}

pub fn debiased_reward(reward: f64, reference_reward: f64) -> f64 {
    reward - reference_reward
}

/// `(R_i − mean) / (std + δ)` with the population standard deviation.
pub fn standardize_group(rewards: &[f64], std_floor: f64) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let n = rewards.len() as f64;
    // Centering on the first value keeps constant groups exactly at zero.
    let first = rewards[0];
    let mean = first + rewards.iter().map(|r| r - first).sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + std_floor;
    rewards.iter().map(|r| (r - mean) / denom).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Branch with the largest expected acceptance under the target.
    #[default]
    ExpectedAcceptance,
    /// Branch matching the target's greedy rollout longest, cut to the match.
    GreedyMatch,
}

/// The accepted sequence used by the surrogate, with its length.
pub fn longest_accepted_sequence<M>(
    tree: &DraftTree,
    target: &M,
    temp: Temperature,
    mode: SelectionMode,
) -> Result<(Vec<Token>, usize)>
where
    M: ConditionalModel + ?Sized,
{
    match mode {
        SelectionMode::ExpectedAcceptance => {
            let scores = score_tree(target, tree, temp)?;
            // Branches are already in (confidence, lexicographic) order, so the
            // first maximum wins ties.
            let mut best: Option<(usize, f64)> = None;
            for s in &scores {
                if s.expected_len > 0.0 && best.is_none_or(|(_, l)| s.expected_len > l) {
                    best = Some((s.branch, s.expected_len));
                }
            }
            Ok(match best {
                Some((i, _)) => {
                    let tokens = tree.branches()[i].tokens.clone();
                    let len = tokens.len();
                    (tokens, len)
                }
                None => (Vec::new(), 0),
            })
        }
        SelectionMode::GreedyMatch => {
            let rollout = greedy_rollout(target, tree.context(), tree.max_branch_len())?;
            let m = best_match(tree, &rollout);
            Ok(match m.branch {
                Some(i) => (tree.branches()[i].tokens[..m.accepted].to_vec(), m.accepted),
                None => (Vec::new(), 0),
            })
        }
    }
}

/// Per-token geometric-mean likelihood ratio of `seq` under the draft versus
/// the reference, with per-token log-probabilities floored.
pub fn likelihood_ratio<A, B>(draft: &A, reference: &B, ctx: &[Token], seq: &[Token]) -> Result<f64>
where
    A: ConditionalModel + ?Sized,
    B: ConditionalModel + ?Sized,
{
    let num = crate::lm::clamped_log_prob(draft, ctx, seq)?;
    let den = crate::lm::clamped_log_prob(reference, ctx, seq)?;
    Ok(((num - den) / seq.len().max(1) as f64).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMember {
    /// 1-based prefix length.
    pub position: usize,
    pub context: Vec<Token>,
    pub reward: f64,
    pub reference_reward: f64,
    pub debiased: f64,
    pub advantage: f64,
    pub accepted: Vec<Token>,
    pub ratio: f64,
}

impl GroupMember {
    pub fn accepted_len(&self) -> usize {
        self.accepted.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSample {
    pub group: Group,
    pub members: Vec<GroupMember>,
}

fn clip_selected(ratio: f64, advantage: f64, eps: f64) -> bool {
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    ratio * advantage > clipped * advantage
}

impl GroupSample {
    /// Recomputes every ratio for the given draft, holding the accepted
    /// sequences fixed.
    pub fn refresh_ratios(&mut self, draft: &LinearSoftmaxDraftModel, reference: &LinearSoftmaxDraftModel) -> Result<()> {
        for m in &mut self.members {
            m.ratio = likelihood_ratio(draft, reference, &m.context, &m.accepted)?;
        }
        Ok(())
    }

    /// Surrogate evaluated at `draft` with accepted sequences and advantages frozen.
    pub fn surrogate_at(
        &self,
        draft: &LinearSoftmaxDraftModel,
        reference: &LinearSoftmaxDraftModel,
        eps: f64,
    ) -> Result<f64> {
        let mut g = self.clone();
        g.refresh_ratios(draft, reference)?;
        Ok(gto_surrogate(&g, eps))
    }

    pub fn clip_active_fraction(&self, eps: f64) -> f64 {
        if self.members.is_empty() {
            return 0.0;
        }
        let n = self.members.iter().filter(|m| clip_selected(m.ratio, m.advantage, eps)).count();
        n as f64 / self.members.len() as f64
    }
}

/// `−(1/m) Σ min(s·A, clip(s, 1−ε, 1+ε)·A)` from the stored ratios.
pub fn gto_surrogate(group: &GroupSample, eps: f64) -> f64 {
    let m = group.members.len();
    if m == 0 {
        return 0.0;
    }
    let total: f64 = group
        .members
        .iter()
        .map(|mem| {
            let clipped = mem.ratio.clamp(1.0 - eps, 1.0 + eps);
            (mem.ratio * mem.advantage).min(clipped * mem.advantage)
        })
        .sum();
    -total / m as f64
}

/// Adds `scale · ∇θ gto_surrogate` into `grad`. Terms where the clipped value
/// wins the min contribute nothing.
pub fn accumulate_grad_gto(
    draft: &LinearSoftmaxDraftModel,
    group: &GroupSample,
    eps: f64,
    scale: f64,
    grad: &mut [f64],
) -> Result<()> {
    let m = group.members.len();
    for mem in &group.members {
        if mem.advantage == 0.0 || clip_selected(mem.ratio, mem.advantage, eps) {
            continue;
        }
        let coeff = -scale * mem.advantage * mem.ratio / (m as f64 * mem.accepted_len().max(1) as f64);
        draft.accumulate_log_prob_grad(&mem.context, &mem.accepted, coeff, grad)?;
    }
    Ok(())
}

pub fn grad_gto(draft: &LinearSoftmaxDraftModel, group: &GroupSample, eps: f64) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; draft.num_params()];
    accumulate_grad_gto(draft, group, eps, 1.0, &mut grad)?;
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtoConfig {
    pub group_size: usize,
    pub groups_per_seq: usize,
    pub clip_eps: f64,
    pub std_floor: f64,
    pub omega: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub debias: bool,
    #[serde(default)]
    pub placement: GroupPlacement,
    #[serde(default)]
    pub selection: SelectionMode,
}

fn default_true() -> bool {
    true
}

impl Default for GtoConfig {
    fn default() -> Self {
        GtoConfig {
            group_size: 8,
            groups_per_seq: 16,
            clip_eps: 0.2,
            std_floor: 1e-6,
            omega: 0.5,
            learning_rate: 0.05,
            epochs: 1,
            seed: 0,
            debias: true,
            placement: GroupPlacement::Uniform,
            selection: SelectionMode::ExpectedAcceptance,
        }
    }
}

impl GtoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("gto: {what}")));
        if self.group_size == 0 {
            return bad("group_size must be >= 1");
        }
        if !(self.clip_eps > 0.0) {
            return bad("clip_eps must be > 0");
        }
        if !(self.std_floor > 0.0) {
            return bad("std_floor must be > 0");
        }
        if !(self.omega >= 0.0) || !self.omega.is_finite() {
            return bad("omega must be >= 0");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be > 0");
        }
        Ok(())
    }
}

/// Everything a Phase-II step needs besides the models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSetup {
    pub policy: TreePolicyConfig,
    pub reward: RewardConfig,
    pub reward_temperature: Temperature,
    pub gto: GtoConfig,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        self.reward.validate()?;
        self.gto.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub token_loss: f64,
    pub gto_loss: f64,
    pub mean_abs_advantage: f64,
    pub mean_ratio: f64,
    pub clip_active_frac: f64,
    pub groups: usize,
}

/// Reference-tree rewards keyed by the context window that determines them.
#[derive(Debug, Default)]
pub struct ReferenceCache {
    window: usize,
    rewards: HashMap<Vec<Token>, f64>,
}

impl ReferenceCache {
    /// `window` must cover every model that feeds the reference reward.
    pub fn new(window: usize) -> Self {
        ReferenceCache { window, rewards: HashMap::new() }
    }

    fn key(&self, ctx: &[Token]) -> Vec<Token> {
        // Shorter contexts keep their full length so padding stays distinct.
        ctx[ctx.len().saturating_sub(self.window)..].to_vec()
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

fn reward_of<M>(tree: &DraftTree, target: &M, setup: &TrainSetup) -> Result<f64>
where
    M: ConditionalModel + ?Sized,
{
    tree_reward(&score_tree(target, tree, setup.reward_temperature)?, &setup.reward)
}

/// Builds, scores and standardizes one group against the current draft.
pub fn collect_group<M>(
    draft: &LinearSoftmaxDraftModel,
    reference: &LinearSoftmaxDraftModel,
    target: &M,
    sequence: &[Token],
    group: Group,
    setup: &TrainSetup,
    mut cache: Option<&mut ReferenceCache>,
) -> Result<GroupSample>
where
    M: ConditionalModel + ?Sized,
{
    if group.end() > sequence.len() || group.start == 0 {
        return Err(Error::domain(format!(
            "group {}..={} does not fit a sequence of length {}",
            group.start,
            group.end(),
            sequence.len()
        )));
    }
    let mut members = Vec::with_capacity(group.size);
    for position in group.indices() {
        let ctx = &sequence[..position];
        let tree = build_draft_tree(draft, ctx, &setup.policy)?;
        let reward = reward_of(&tree, target, setup)?;
        let reference_reward = if setup.gto.debias {
            let compute = || -> Result<f64> { reward_of(&build_draft_tree(reference, ctx, &setup.policy)?, target, setup) };
            match cache.as_deref_mut() {
                Some(c) => {
                    let key = c.key(ctx);
                    match c.rewards.get(&key) {
                        Some(&r) => r,
                        None => {
                            let r = compute()?;
                            c.rewards.insert(key, r);
                            r
                        }
                    }
                }
                None => compute()?,
            }
        } else {
            0.0
        };
        let debiased = if setup.gto.debias { debiased_reward(reward, reference_reward) } else { reward };
        let (accepted, _) = longest_accepted_sequence(&tree, target, setup.reward_temperature, setup.gto.selection)?;
        let ratio = likelihood_ratio(draft, reference, ctx, &accepted)?;
        members.push(GroupMember {
            position,
            context: ctx.to_vec(),
            reward,
            reference_reward,
            debiased,
            advantage: 0.0,
            accepted,
            ratio,
        });
    }
    let rewards: Vec<f64> = members.iter().map(|m| m.debiased).collect();
    for (m, a) in members.iter_mut().zip(standardize_group(&rewards, setup.gto.std_floor)) {
        m.advantage = a;
    }
    Ok(GroupSample { group, members })
}

/// Loss terms and gradient of `token_loss + ω·mean_k surrogate_k` for one
/// sequence, without touching the draft.
#[derive(Debug, Clone)]
pub struct StepGradient {
    pub token_loss: f64,
    pub gto_loss: f64,
    pub groups: Vec<GroupSample>,
    pub grad: Vec<f64>,
}

pub fn step_gradient<M, R>(
    draft: &LinearSoftmaxDraftModel,
    reference: &LinearSoftmaxDraftModel,
    target: &M,
    sequence: &[Token],
    setup: &TrainSetup,
    rng: &mut R,
    mut cache: Option<&mut ReferenceCache>,
) -> Result<StepGradient>
where
    M: ConditionalModel,
    R: Rng + ?Sized,
{
    if sequence.is_empty() {
        return Err(Error::domain("training sequence is empty"));
    }
    let batch = TokenLossBatch::from_sequences(draft, target, &[sequence])?;
    let token_loss = batch.loss(draft);
    let mut grad = batch.gradient(draft);

    let gto = &setup.gto;
    let mut groups = Vec::new();
    let mut gto_loss = 0.0;
    // Weight zero means a plain token-loss step, bit for bit.
    if gto.omega != 0.0 {
        let placed = sample_groups(sequence.len(), gto.group_size, gto.groups_per_seq, gto.placement, rng);
        let scale = gto.omega / placed.len().max(1) as f64;
        for g in placed {
            let sample = collect_group(draft, reference, target, sequence, g, setup, cache.as_deref_mut())?;
            gto_loss += gto_surrogate(&sample, gto.clip_eps);
            accumulate_grad_gto(draft, &sample, gto.clip_eps, scale, &mut grad)?;
            groups.push(sample);
        }
        if !groups.is_empty() {
            gto_loss /= groups.len() as f64;
        }
    }
    Ok(StepGradient { token_loss, gto_loss, groups, grad })
}

/// One Phase-II update of `draft` on `sequence`.
pub fn train_step<M, R>(
    draft: &mut LinearSoftmaxDraftModel,
    reference: &LinearSoftmaxDraftModel,
    target: &M,
    sequence: &[Token],
    setup: &TrainSetup,
    rng: &mut R,
    cache: Option<&mut ReferenceCache>,
) -> Result<StepReport>
where
    M: ConditionalModel,
    R: Rng + ?Sized,
{
    let sg = step_gradient(draft, reference, target, sequence, setup, rng, cache)?;
    draft.apply_gradient(&sg.grad, setup.gto.learning_rate)?;

    let members: Vec<&GroupMember> = sg.groups.iter().flat_map(|g| &g.members).collect();
    let n = members.len().max(1) as f64;
    let clip_active = sg
        .groups
        .iter()
        .map(|g| g.clip_active_fraction(setup.gto.clip_eps) * g.members.len() as f64)
        .fold(0.0, |a, b| a + b);
    Ok(StepReport {
        step: draft.steps(),
        token_loss: sg.token_loss,
        gto_loss: sg.gto_loss,
        mean_abs_advantage: members.iter().fold(0.0, |a, m| a + m.advantage.abs()) / n,
        mean_ratio: if members.is_empty() { 1.0 } else { members.iter().map(|m| m.ratio).sum::<f64>() / n },
        clip_active_frac: clip_active / n,
        groups: sg.groups.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupReport {
    /// Token loss over the whole corpus after each epoch, starting with the
    /// initial model.
    pub epoch_losses: Vec<f64>,
}

/// Phase I: per-sequence gradient descent on the token loss.
pub fn warmup_phase1<S, M>(
    init: &LinearSoftmaxDraftModel,
    target: &M,
    corpus: &[S],
    epochs: usize,
    learning_rate: f64,
) -> Result<(LinearSoftmaxDraftModel, WarmupReport)>
where
    S: AsRef<[Token]>,
    M: ConditionalModel,
{
    if corpus.is_empty() || corpus.iter().all(|s| s.as_ref().is_empty()) {
        return Err(Error::domain("warmup corpus is empty"));
    }
    let mut model = init.clone();
    let full = TokenLossBatch::from_sequences(&model, target, corpus)?;
    let batches = corpus
        .iter()
        .filter(|s| !s.as_ref().is_empty())
        .map(|s| TokenLossBatch::from_sequences(&model, target, &[s.as_ref()]))
        .collect::<Result<Vec<_>>>()?;
    let mut epoch_losses = vec![full.loss(&model)];
    for _ in 0..epochs {
        for b in &batches {
            let g = b.gradient(&model);
            model.apply_gradient(&g, learning_rate)?;
        }
        epoch_losses.push(full.loss(&model));
    }
    Ok((model, WarmupReport { epoch_losses }))
}

/// Phase II over the corpus. The reference is only read.
pub fn run_phase2<S, M>(
    start: &LinearSoftmaxDraftModel,
    reference: &LinearSoftmaxDraftModel,
    target: &M,
    corpus: &[S],
    setup: &TrainSetup,
) -> Result<(LinearSoftmaxDraftModel, Vec<StepReport>)>
where
    S: AsRef<[Token]>,
    M: ConditionalModel,
{
    setup.validate()?;
    let mut model = start.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(setup.gto.seed);
    let mut cache = ReferenceCache::new(reference.order().max(target.context_window()));
    let mut log = Vec::new();
    for _ in 0..setup.gto.epochs {
        for seq in corpus {
            let seq = seq.as_ref();
            if seq.is_empty() {
                continue;
            }
            log.push(train_step(&mut model, reference, target, seq, setup, &mut rng, Some(&mut cache))?);
        }
    }
    Ok((model, log))
}
