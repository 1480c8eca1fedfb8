mod common;

use common::{extension_pair, greedy_extension_pair, rng};
use gto_core::lm::Temperature;
use gto_core::reward::{score_tree, tree_reward, RewardConfig};
use gto_core::verify::expected_acceptance_exact;

fn lens(scores: &[gto_core::reward::BranchScore]) -> Vec<f64> {
    scores.iter().map(|s| s.expected_len).collect()
}

#[test]
fn dominating_trees_gain_reward_and_acceptance() {
    let cfg = RewardConfig::default();
    for (seed, t) in [(31, 0.7), (32, 1.0)] {
        let temp = Temperature::new(t).unwrap();
        let mut r = rng(seed);
        for _ in 0..100 {
            let (target, b, a) = extension_pair(&mut r);
            let (sb, sa) = (score_tree(&target, &b, temp).unwrap(), score_tree(&target, &a, temp).unwrap());
            let (lb, la) = (lens(&sb), lens(&sa));
            assert!(la.iter().zip(&lb).all(|(x, y)| x >= y));
            assert!(la.iter().zip(&lb).any(|(x, y)| x > y));
            assert!(tree_reward(&sa, &cfg).unwrap() > tree_reward(&sb, &cfg).unwrap());
            assert!(
                expected_acceptance_exact(&target, &a, temp).unwrap() > expected_acceptance_exact(&target, &b, temp).unwrap()
            );
        }
    }
}

#[test]
fn greedy_reward_gain_beyond_slack_raises_best_branch() {
    let cfg = RewardConfig::default();
    let mut r = rng(33);
    let mut checked = 0;
    let mut drawn = 0;
    while checked < 100 {
        drawn += 1;
        assert!(drawn < 10_000);
        let (target, b, a) = greedy_extension_pair(&mut r);
        let (sb, sa) = (score_tree(&target, &b, Temperature::GREEDY).unwrap(), score_tree(&target, &a, Temperature::GREEDY).unwrap());
        let max_b = lens(&sb).into_iter().fold(f64::NEG_INFINITY, f64::max);
        let max_a = lens(&sa).into_iter().fold(f64::NEG_INFINITY, f64::max);
        let n = sb.len() as f64;
        if tree_reward(&sa, &cfg).unwrap() > max_b + n.ln() / cfg.eta {
            assert!(max_a > max_b);
            checked += 1;
        }
    }
}
