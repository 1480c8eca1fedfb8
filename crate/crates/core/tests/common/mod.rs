//! Shared generators and independent oracles for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use gto_core::lm::{ConditionalModel, LinearSoftmaxDraftModel, TabularMarkovModel, Temperature, Token, Vocab};
use gto_core::tree::DraftTree;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Target with strictly positive rows.
pub fn positive_target(rng: &mut impl Rng, v: usize, order: usize) -> TabularMarkovModel {
    TabularMarkovModel::from_fn(Vocab::new(v).unwrap(), order, 0, |_| {
        let w: Vec<f64> = (0..v).map(|_| rng.random_range(0.05..1.0)).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|x| x / z).collect()
    })
    .unwrap()
}

/// Target whose rows put most of their mass on one token.
pub fn peaked_target(rng: &mut impl Rng, v: usize, order: usize) -> TabularMarkovModel {
    TabularMarkovModel::from_fn(Vocab::new(v).unwrap(), order, 0, |_| {
        let hot = rng.random_range(0..v);
        let w: Vec<f64> = (0..v).map(|i| if i == hot { 4.0 } else { rng.random_range(0.01..1.0) }).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|x| x / z).collect()
    })
    .unwrap()
}

pub fn random_drafter(rng: &mut impl Rng, v: usize, order: usize, scale: f64) -> LinearSoftmaxDraftModel {
    LinearSoftmaxDraftModel::random(Vocab::new(v).unwrap(), order, 0, scale, rng).unwrap()
}

/// Tabular drafter whose rows are drawn from a few coarse values, so that
/// confidence and probability ties are common.
pub fn coarse_drafter(rng: &mut impl Rng, v: usize, order: usize) -> TabularMarkovModel {
    TabularMarkovModel::from_fn(Vocab::new(v).unwrap(), order, 0, |_| {
        let w: Vec<f64> = (0..v).map(|_| [0.0, 1.0, 1.0, 2.0][rng.random_range(0..4)]).collect();
        let z: f64 = w.iter().sum();
        if z == 0.0 {
            vec![1.0 / v as f64; v]
        } else {
            w.into_iter().map(|x| x / z).collect()
        }
    })
    .unwrap()
}

pub fn random_tokens(rng: &mut impl Rng, v: usize, len: usize) -> Vec<Token> {
    (0..len).map(|_| rng.random_range(0..v) as Token).collect()
}

/// Random prefix-free branch set with lengths in `1..=max_len`.
pub fn random_branches(rng: &mut impl Rng, v: usize, count: usize, max_len: usize) -> Vec<Vec<Token>> {
    let mut out: Vec<Vec<Token>> = Vec::new();
    let mut attempts = 0;
    while out.len() < count && attempts < 200 {
        attempts += 1;
        let len = rng.random_range(1..=max_len);
        let b = random_tokens(rng, v, len);
        if out.iter().all(|o| !o.starts_with(&b) && !b.starts_with(o)) {
            out.push(b);
        }
    }
    out
}

pub fn lowest_argmax(p: &[f64]) -> usize {
    let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    p.iter().position(|&x| x == max).unwrap()
}

/// Product of target probabilities of `seq` after `ctx`, one factor at a time.
pub fn path_prob<M: ConditionalModel + ?Sized>(m: &M, ctx: &[Token], seq: &[Token], temp: Temperature) -> f64 {
    let mut buf = ctx.to_vec();
    let mut p = 1.0;
    for &t in seq {
        p *= m.next_distribution(&buf, temp).unwrap()[t as usize];
        buf.push(t);
    }
    p
}

/// `Σ_j P(E_j)` where `E_j` is the event that the target's first `j` tokens
/// equal the first `j` tokens of some branch. Distinct length-`j` prefixes
/// are disjoint events, so `P(E_j)` is the sum of their path probabilities.
pub fn acceptance_event_sum<M: ConditionalModel + ?Sized>(target: &M, tree: &DraftTree, temp: Temperature) -> f64 {
    let depth = tree.max_branch_len();
    let mut total = 0.0;
    for j in 1..=depth {
        let prefixes: BTreeSet<&[Token]> =
            tree.branches().iter().filter(|b| b.tokens.len() >= j).map(|b| &b.tokens[..j]).collect();
        total += prefixes.iter().map(|p| path_prob(target, tree.context(), p, temp)).sum::<f64>();
    }
    total
}

/// Branches `(tokens, confidence)` and the surviving greedy path, as
/// produced by an independent implementation of the two-stage policy that
/// scores every path of the full V-ary tree from scratch.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleTree {
    pub branches: Vec<(Vec<Token>, f64)>,
    pub greedy: Option<Vec<Token>>,
    pub nodes: usize,
    pub layers: usize,
}

struct Scored {
    path: Vec<Token>,
    conf: f64,
    prob: f64,
    parent_rank: usize,
}

fn draft_step<M: ConditionalModel + ?Sized>(m: &M, ctx: &[Token], path: &[Token]) -> Vec<f64> {
    let mut full = ctx.to_vec();
    full.extend_from_slice(path);
    m.next_distribution(&full, Temperature::UNIT).unwrap()
}

pub fn oracle_tree<M: ConditionalModel + ?Sized>(
    draft: &M,
    ctx: &[Token],
    depth: usize,
    k: usize,
    g: usize,
    token_budget: Option<usize>,
) -> OracleTree {
    let v = draft.vocab().size();
    // Every selected path, with its confidence, last-step probability and
    // global selection index.
    let mut selected: Vec<(Vec<Token>, f64, f64)> = Vec::new();
    let mut previous: Vec<Vec<Token>> = vec![Vec::new()];
    let mut layers = 0;
    for _ in 1..=depth {
        let remaining = token_budget.map_or(usize::MAX, |b| b.saturating_sub(selected.len()));
        if remaining == 0 {
            break;
        }
        let mut layer = Vec::new();
        for (rank, parent) in previous.iter().enumerate() {
            for t in 0..v {
                let mut path = parent.clone();
                path.push(t as Token);
                let mut conf = 1.0;
                let mut prob = 0.0;
                for i in 0..path.len() {
                    prob = draft_step(draft, ctx, &path[..i])[path[i] as usize];
                    conf *= prob;
                }
                if prob > 0.0 {
                    layer.push(Scored { path, conf, prob, parent_rank: rank });
                }
            }
        }
        layer.sort_by(|a, b| {
            b.conf
                .total_cmp(&a.conf)
                .then(b.prob.total_cmp(&a.prob))
                .then(a.path.last().cmp(&b.path.last()))
                .then(a.parent_rank.cmp(&b.parent_rank))
        });
        layer.truncate(k.min(remaining));
        if layer.is_empty() {
            break;
        }
        previous = layer.iter().map(|s| s.path.clone()).collect();
        selected.extend(layer.into_iter().map(|s| (s.path, s.conf, s.prob)));
        layers += 1;
    }

    let mut leaves: Vec<usize> = (0..selected.len())
        .filter(|&i| !selected.iter().any(|(p, _, _)| p.len() > selected[i].0.len() && p.starts_with(&selected[i].0)))
        .collect();
    leaves.sort_by(|&a, &b| {
        let (pa, ca, qa) = &selected[a];
        let (pb, cb, qb) = &selected[b];
        cb.total_cmp(ca).then(qb.total_cmp(qa)).then(pa.last().cmp(&pb.last())).then(a.cmp(&b))
    });
    leaves.truncate(g);

    let mut branches: Vec<(Vec<Token>, f64)> = leaves.iter().map(|&i| (selected[i].0.clone(), selected[i].1)).collect();
    branches.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut greedy_path = Vec::new();
    for _ in 0..layers {
        let p = draft_step(draft, ctx, &greedy_path);
        greedy_path.push(lowest_argmax(&p) as Token);
    }
    let greedy = branches.iter().any(|(p, _)| *p == greedy_path).then_some(greedy_path);

    let mut kept = BTreeSet::new();
    for (p, _) in &branches {
        for i in 1..=p.len() {
            kept.insert(p[..i].to_vec());
        }
    }
    OracleTree { branches, greedy, nodes: kept.len(), layers }
}

/// Relative error `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of `f` at `x` with step `h` in every coordinate.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Target plus a tree and the same tree with one branch extended by a few
/// tokens. The extension adds a prefix no other branch shares, so with a
/// positive target its `L` strictly grows and every other `L` is unchanged.
pub fn extension_pair(rng: &mut impl Rng) -> (TabularMarkovModel, DraftTree, DraftTree) {
    loop {
        let v = rng.random_range(2..=4);
        let order = rng.random_range(1..=2);
        let target = positive_target(rng, v, order);
        let ctx = random_tokens(rng, v, 2);
        let count = rng.random_range(1..=5);
        let branches = random_branches(rng, v, count, 3);
        let mut extended = branches.clone();
        let i = rng.random_range(0..branches.len());
        let extra = rng.random_range(1..=2);
        extended[i].extend(random_tokens(rng, v, extra));
        if let (Ok(b), Ok(a)) = (DraftTree::from_branches(ctx.clone(), branches), DraftTree::from_branches(ctx, extended)) {
            return (target, b, a);
        }
    }
}

/// A tree holding a prefix of the target's greedy rollout among random
/// branches, and the same tree with that branch pushed further along the
/// rollout. Branch count is unchanged.
pub fn greedy_extension_pair(rng: &mut impl Rng) -> (TabularMarkovModel, DraftTree, DraftTree) {
    loop {
        let v = rng.random_range(2..=4);
        let order = rng.random_range(1..=2);
        let target = positive_target(rng, v, order);
        let ctx = random_tokens(rng, v, 2);
        let greedy = gto_core::verify::greedy_rollout(&target, &ctx, 7).unwrap();
        let j = rng.random_range(1..=2);
        let e = rng.random_range(1..=5);
        let others = rng.random_range(0..=3);
        let mut branches = random_branches(rng, v, others, 3);
        branches.retain(|b| !b.starts_with(&greedy[..j]) && !greedy[..j + e].starts_with(b));
        let mut extended = branches.clone();
        branches.push(greedy[..j].to_vec());
        extended.push(greedy[..j + e].to_vec());
        if let (Ok(b), Ok(a)) = (DraftTree::from_branches(ctx.clone(), branches), DraftTree::from_branches(ctx, extended)) {
            return (target, b, a);
        }
    }
}

pub fn with_logits(m: &LinearSoftmaxDraftModel, logits: &[f64]) -> LinearSoftmaxDraftModel {
    let w = m.window();
    LinearSoftmaxDraftModel::from_logits(w.vocab, w.order, w.pad, logits.to_vec()).unwrap()
}

/// Target, reference, a perturbed current drafter, a training sequence and
/// a Phase-II setup small enough for finite differences.
pub struct GtoFixture {
    pub target: TabularMarkovModel,
    pub reference: LinearSoftmaxDraftModel,
    pub draft: LinearSoftmaxDraftModel,
    pub sequence: Vec<Token>,
    pub setup: gto_core::train::TrainSetup,
}

pub fn gto_fixture(rng: &mut impl Rng) -> GtoFixture {
    use gto_core::reward::RewardConfig;
    use gto_core::train::{GtoConfig, TrainSetup};
    use gto_core::tree::TreePolicyConfig;

    let v = 4;
    let target = peaked_target(rng, v, 1);
    let reference = random_drafter(rng, v, 1, 1.0);
    let noise: Vec<f64> = reference.logits().iter().map(|l| l + rng.random_range(-0.15..0.15)).collect();
    let draft = with_logits(&reference, &noise);
    let sequence = gto_core::lm::sample_sequence(&target, &[], 24, Temperature::UNIT, rng).unwrap();
    let setup = TrainSetup {
        policy: TreePolicyConfig::new(3, 2, 4).unwrap(),
        reward: RewardConfig::default(),
        reward_temperature: Temperature::UNIT,
        gto: GtoConfig { group_size: 6, groups_per_seq: 3, ..GtoConfig::default() },
    };
    GtoFixture { target, reference, draft, sequence, setup }
}
