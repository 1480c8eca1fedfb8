//! Finite-vocabulary autoregressive models.
//!
//! Both model kinds here are order-`o` Markov: the next-token distribution
//! depends only on the last `o` tokens of the context, left-padded with a
//! fixed padding token when the context is shorter than `o`. That keeps every
//! quantity enumerable, so the tree reward and training code can be checked
//! against brute-force oracles.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Token = u32;

/// Per-token log-probability floor used wherever a finite value is required.
pub const LOG_PROB_FLOOR: f64 = -30.0;

const ROW_SUM_TOL: f64 = 1e-9;
const MAX_STATES: usize = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct Vocab(usize);

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::domain(format!("vocabulary size must be >= 2, got {size}")));
        }
        if size > Token::MAX as usize {
            return Err(Error::domain(format!("vocabulary size {size} does not fit a token id")));
        }
        Ok(Vocab(size))
    }

    pub fn size(self) -> usize {
        self.0
    }

    pub fn check(self, token: Token) -> Result<()> {
        if (token as usize) < self.0 {
            Ok(())
        } else {
            Err(Error::InvalidToken { token, vocab: self.0 })
        }
    }

    pub fn check_all(self, tokens: &[Token]) -> Result<()> {
        tokens.iter().try_for_each(|&t| self.check(t))
    }
}

impl TryFrom<usize> for Vocab {
    type Error = Error;
    fn try_from(size: usize) -> Result<Self> {
        Vocab::new(size)
    }
}

impl From<Vocab> for usize {
    fn from(v: Vocab) -> usize {
        v.0
    }
}

/// Sampling temperature. Zero means deterministic argmax decoding.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub const GREEDY: Temperature = Temperature(0.0);
    pub const UNIT: Temperature = Temperature(1.0);

    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value >= 0.0 {
            Ok(Temperature(value))
        } else {
            Err(Error::domain(format!("temperature must be finite and >= 0, got {value}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_greedy(self) -> bool {
        self.0 == 0.0
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;
    fn try_from(value: f64) -> Result<Self> {
        Temperature::new(value)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

/// Maps a context onto the row of a Markov table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkovWindow {
    pub vocab: Vocab,
    pub order: usize,
    pub pad: Token,
}

impl MarkovWindow {
    pub fn new(vocab: Vocab, order: usize, pad: Token) -> Result<Self> {
        vocab.check(pad)?;
        let states = (vocab.size() as u128).checked_pow(order as u32).unwrap_or(u128::MAX);
        if states > MAX_STATES as u128 {
            return Err(Error::domain(format!(
                "order {order} over vocabulary {} gives {states} states, limit {MAX_STATES}",
                vocab.size()
            )));
        }
        Ok(MarkovWindow { vocab, order, pad })
    }

    pub fn num_states(&self) -> usize {
        self.vocab.size().pow(self.order as u32)
    }

    pub fn state(&self, ctx: &[Token]) -> Result<usize> {
        self.vocab.check_all(ctx)?;
        Ok(self.state_unchecked(ctx))
    }

    fn state_unchecked(&self, ctx: &[Token]) -> usize {
        let v = self.vocab.size();
        let missing = self.order.saturating_sub(ctx.len());
        let tail = &ctx[ctx.len() - (self.order - missing)..];
        let mut idx = 0usize;
        for _ in 0..missing {
            idx = idx * v + self.pad as usize;
        }
        for &t in tail {
            idx = idx * v + t as usize;
        }
        idx
    }
}

/// An autoregressive next-token distribution over a finite vocabulary whose
/// dependence on the context factors through a finite state.
pub trait ConditionalModel: Send + Sync {
    fn vocab(&self) -> Vocab;

    /// Number of trailing context tokens the state depends on.
    fn context_window(&self) -> usize;

    /// Conditioning state of `ctx`. Errors on invalid token ids.
    fn state(&self, ctx: &[Token]) -> Result<usize>;

    /// Base (temperature 1) distribution for a state returned by [`state`](Self::state).
    fn state_distribution(&self, state: usize) -> Vec<f64>;

    fn base_distribution(&self, ctx: &[Token]) -> Result<Vec<f64>> {
        Ok(self.state_distribution(self.state(ctx)?))
    }

    fn next_distribution(&self, ctx: &[Token], temp: Temperature) -> Result<Vec<f64>> {
        Ok(apply_temperature(&self.base_distribution(ctx)?, temp))
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Power-renormalizes `base` to temperature `temp`; argmax one-hot at zero.
pub fn apply_temperature(base: &[f64], temp: Temperature) -> Vec<f64> {
    let t = temp.value();
    if t == 0.0 {
        let mut out = vec![0.0; base.len()];
        out[argmax(base)] = 1.0;
        return out;
    }
    if t == 1.0 {
        return base.to_vec();
    }
    // log-space so tiny probabilities at small T neither underflow to all-zero
    // nor overflow at large 1/T.
    let max_log = base
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p.ln())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = base
        .iter()
        .map(|&p| if p > 0.0 { ((p.ln() - max_log) / t).exp() } else { 0.0 })
        .collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    out
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    out
}

/// Draws an index from `probs` using one uniform variate.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Samples `length` tokens autoregressively after `ctx`. At temperature zero
/// this is the greedy argmax chain and consumes no randomness.
pub fn sample_sequence<M, R>(
    model: &M,
    ctx: &[Token],
    length: usize,
    temp: Temperature,
    rng: &mut R,
) -> Result<Vec<Token>>
where
    M: ConditionalModel + ?Sized,
    R: Rng + ?Sized,
{
    model.vocab().check_all(ctx)?;
    let mut buf = ctx.to_vec();
    for _ in 0..length {
        let dist = model.next_distribution(&buf, temp)?;
        let next = if temp.is_greedy() { argmax(&dist) } else { sample_index(&dist, rng) };
        buf.push(next as Token);
    }
    Ok(buf.split_off(ctx.len()))
}

/// Sum of next-token log-probabilities of `seq` after `ctx`. A zero-probability
/// token yields negative infinity.
pub fn sequence_log_prob<M>(model: &M, ctx: &[Token], seq: &[Token], temp: Temperature) -> Result<f64>
where
    M: ConditionalModel + ?Sized,
{
    let vocab = model.vocab();
    vocab.check_all(ctx)?;
    vocab.check_all(seq)?;
    let mut buf = ctx.to_vec();
    let mut total = 0.0;
    for &tok in seq {
        let p = model.next_distribution(&buf, temp)?[tok as usize];
        if p <= 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        total += p.ln();
        buf.push(tok);
    }
    Ok(total)
}

/// Tabular order-`o` Markov model; the concrete target model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMarkovModel {
    window: MarkovWindow,
    table: Vec<f64>,
}

impl TabularMarkovModel {
    /// `table` is row-major, one row of `vocab` probabilities per state.
    pub fn new(vocab: Vocab, order: usize, pad: Token, table: Vec<f64>) -> Result<Self> {
        let window = MarkovWindow::new(vocab, order, pad)?;
        let v = vocab.size();
        if table.len() != window.num_states() * v {
            return Err(Error::domain(format!(
                "table has {} entries, expected {}",
                table.len(),
                window.num_states() * v
            )));
        }
        for (r, row) in table.chunks(v).enumerate() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::domain(format!("row {r} has a negative or non-finite entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::domain(format!("row {r} sums to {sum}")));
            }
        }
        Ok(TabularMarkovModel { window, table })
    }

    /// Builds a model from a function giving each state's row.
    pub fn from_fn(vocab: Vocab, order: usize, pad: Token, mut row: impl FnMut(usize) -> Vec<f64>) -> Result<Self> {
        let window = MarkovWindow::new(vocab, order, pad)?;
        let table = (0..window.num_states()).flat_map(&mut row).collect();
        Self::new(vocab, order, pad, table)
    }

    pub fn window(&self) -> MarkovWindow {
        self.window
    }

    pub fn order(&self) -> usize {
        self.window.order
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn row(&self, state: usize) -> &[f64] {
        let v = self.window.vocab.size();
        &self.table[state * v..(state + 1) * v]
    }
}

impl ConditionalModel for TabularMarkovModel {
    fn vocab(&self) -> Vocab {
        self.window.vocab
    }

    fn context_window(&self) -> usize {
        self.window.order
    }

    fn state(&self, ctx: &[Token]) -> Result<usize> {
        self.window.state(ctx)
    }

    fn state_distribution(&self, state: usize) -> Vec<f64> {
        self.row(state).to_vec()
    }
}

/// Trainable order-`o` softmax model: one free logit per (state, next token).
/// Used for the draft model and its frozen reference copy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSoftmaxDraftModel {
    window: MarkovWindow,
    logits: Vec<f64>,
    steps: u64,
}

impl LinearSoftmaxDraftModel {
    /// All-zero logits, i.e. uniform rows.
    pub fn uniform(vocab: Vocab, order: usize, pad: Token) -> Result<Self> {
        let window = MarkovWindow::new(vocab, order, pad)?;
        let logits = vec![0.0; window.num_states() * vocab.size()];
        Ok(LinearSoftmaxDraftModel { window, logits, steps: 0 })
    }

    pub fn from_logits(vocab: Vocab, order: usize, pad: Token, logits: Vec<f64>) -> Result<Self> {
        let mut model = Self::uniform(vocab, order, pad)?;
        if logits.len() != model.logits.len() {
            return Err(Error::domain(format!(
                "expected {} logits, got {}",
                model.logits.len(),
                logits.len()
            )));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::domain("logits must be finite"));
        }
        model.logits = logits;
        Ok(model)
    }

    /// Logits drawn uniformly from `[-scale, scale]`.
    pub fn random<R: Rng + ?Sized>(vocab: Vocab, order: usize, pad: Token, scale: f64, rng: &mut R) -> Result<Self> {
        let mut model = Self::uniform(vocab, order, pad)?;
        model.logits.iter_mut().for_each(|l| *l = rng.random_range(-scale..=scale));
        Ok(model)
    }

    pub fn window(&self) -> MarkovWindow {
        self.window
    }

    pub fn order(&self) -> usize {
        self.window.order
    }

    pub fn num_params(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub(crate) fn set_steps(&mut self, steps: u64) {
        self.steps = steps;
    }

    pub fn row_logits(&self, state: usize) -> &[f64] {
        let v = self.window.vocab.size();
        &self.logits[state * v..(state + 1) * v]
    }

    /// Plain gradient-descent step `θ ← θ − lr·g`.
    pub fn apply_gradient(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != self.logits.len() {
            return Err(Error::domain(format!(
                "gradient has {} entries, model has {}",
                grad.len(),
                self.logits.len()
            )));
        }
        for (l, g) in self.logits.iter_mut().zip(grad) {
            *l -= lr * g;
        }
        self.steps += 1;
        Ok(())
    }

    /// Accumulates `scale · ∇θ log p(seq | ctx)` into `grad`, with the same
    /// per-token floor as [`clamped_log_prob`](Self::clamped_log_prob): a token
    /// whose log-probability sits below the floor contributes no gradient.
    pub fn accumulate_log_prob_grad(&self, ctx: &[Token], seq: &[Token], scale: f64, grad: &mut [f64]) -> Result<()> {
        let v = self.window.vocab.size();
        let mut buf = ctx.to_vec();
        for &tok in seq {
            let state = self.window.state(&buf)?;
            self.window.vocab.check(tok)?;
            let probs = softmax(self.row_logits(state));
            if probs[tok as usize].ln() >= LOG_PROB_FLOOR {
                let row = &mut grad[state * v..(state + 1) * v];
                for (j, (g, p)) in row.iter_mut().zip(&probs).enumerate() {
                    let indicator = if j == tok as usize { 1.0 } else { 0.0 };
                    *g += scale * (indicator - p);
                }
            }
            buf.push(tok);
        }
        Ok(())
    }

    /// log p(seq | ctx) with each token's log-probability floored at
    /// [`LOG_PROB_FLOOR`].
    pub fn clamped_log_prob(&self, ctx: &[Token], seq: &[Token]) -> Result<f64> {
        clamped_log_prob(self, ctx, seq)
    }
}

impl ConditionalModel for LinearSoftmaxDraftModel {
    fn vocab(&self) -> Vocab {
        self.window.vocab
    }

    fn context_window(&self) -> usize {
        self.window.order
    }

    fn state(&self, ctx: &[Token]) -> Result<usize> {
        self.window.state(ctx)
    }

    fn state_distribution(&self, state: usize) -> Vec<f64> {
        softmax(self.row_logits(state))
    }
}

/// Sequence log-probability at temperature 1 with a per-token floor.
pub fn clamped_log_prob<M: ConditionalModel + ?Sized>(model: &M, ctx: &[Token], seq: &[Token]) -> Result<f64> {
    let mut buf = ctx.to_vec();
    let mut total = 0.0;
    for &tok in seq {
        model.vocab().check(tok)?;
        let p = model.base_distribution(&buf)?[tok as usize];
        total += if p > 0.0 { p.ln().max(LOG_PROB_FLOOR) } else { LOG_PROB_FLOOR };
        buf.push(tok);
    }
    Ok(total)
}

fn ensure_same_vocab(a: Vocab, b: Vocab) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::VocabMismatch { left: a.size(), right: b.size() })
    }
}

/// Contexts for the token loss, collapsed to weighted (draft state, target
/// state) pairs so repeated windows cost one row evaluation.
#[derive(Debug, Clone)]
pub struct TokenLossBatch {
    entries: Vec<TokenLossEntry>,
    vocab: Vocab,
}

#[derive(Debug, Clone)]
struct TokenLossEntry {
    draft_state: usize,
    target_probs: Vec<f64>,
    weight: f64,
}

impl TokenLossBatch {
    pub fn from_contexts<'a, I>(draft: &LinearSoftmaxDraftModel, target: &dyn ConditionalModel, ctxs: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [Token]>,
    {
        ensure_same_vocab(draft.vocab(), target.vocab())?;
        let mut counts: std::collections::BTreeMap<(usize, usize), usize> = Default::default();
        let mut total = 0usize;
        for ctx in ctxs {
            let key = (draft.state(ctx)?, target.state(ctx)?);
            *counts.entry(key).or_default() += 1;
            total += 1;
        }
        if total == 0 {
            return Err(Error::domain("token loss needs at least one context"));
        }
        let entries = counts
            .into_iter()
            .map(|((draft_state, target_state), count)| TokenLossEntry {
                draft_state,
                target_probs: target.state_distribution(target_state),
                weight: count as f64 / total as f64,
            })
            .collect();
        Ok(TokenLossBatch { entries, vocab: draft.vocab() })
    }

    /// Every teacher-forced prefix `x[..i]`, `i < len`, of each sequence.
    pub fn from_sequences<S: AsRef<[Token]>>(
        draft: &LinearSoftmaxDraftModel,
        target: &dyn ConditionalModel,
        sequences: &[S],
    ) -> Result<Self> {
        let ctxs = sequences
            .iter()
            .flat_map(|s| {
                let s = s.as_ref();
                (0..s.len()).map(move |i| &s[..i])
            });
        Self::from_contexts(draft, target, ctxs)
    }

    /// Mean cross-entropy H(p_target, p_draft) over the contexts.
    pub fn loss(&self, draft: &LinearSoftmaxDraftModel) -> f64 {
        self.entries
            .iter()
            .map(|e| {
                let logits = draft.row_logits(e.draft_state);
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let log_z = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
                let ce: f64 = e
                    .target_probs
                    .iter()
                    .zip(logits)
                    .filter(|(p, _)| **p > 0.0)
                    .map(|(p, l)| -p * (l - log_z))
                    .sum();
                e.weight * ce
            })
            .sum()
    }

    /// Analytic gradient of [`loss`](Self::loss): `weight · (p_draft − p_target)`
    /// on each visited row, zero elsewhere.
    pub fn gradient(&self, draft: &LinearSoftmaxDraftModel) -> Vec<f64> {
        let mut grad = vec![0.0; draft.num_params()];
        self.accumulate_gradient(draft, 1.0, &mut grad);
        grad
    }

    pub fn accumulate_gradient(&self, draft: &LinearSoftmaxDraftModel, scale: f64, grad: &mut [f64]) {
        let v = self.vocab.size();
        for e in &self.entries {
            let probs = softmax(draft.row_logits(e.draft_state));
            let row = &mut grad[e.draft_state * v..(e.draft_state + 1) * v];
            for ((g, pm), pt) in row.iter_mut().zip(&probs).zip(&e.target_probs) {
                *g += scale * e.weight * (pm - pt);
            }
        }
    }
}

/// Mean full-vocabulary cross-entropy of the draft against the target.
pub fn token_loss(draft: &LinearSoftmaxDraftModel, target: &dyn ConditionalModel, ctxs: &[&[Token]]) -> Result<f64> {
    Ok(TokenLossBatch::from_contexts(draft, target, ctxs.iter().copied())?.loss(draft))
}

/// Gradient of [`token_loss`] with respect to the draft logits.
pub fn grad_token_loss(
    draft: &LinearSoftmaxDraftModel,
    target: &dyn ConditionalModel,
    ctxs: &[&[Token]],
) -> Result<Vec<f64>> {
    Ok(TokenLossBatch::from_contexts(draft, target, ctxs.iter().copied())?.gradient(draft))
}

/// Mean Shannon entropy of the target's next-token rows over the contexts,
/// the floor of [`token_loss`].
pub fn mean_conditional_entropy<'a, I>(target: &dyn ConditionalModel, ctxs: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a [Token]>,
{
    let mut total = 0.0;
    let mut n = 0usize;
    for ctx in ctxs {
        let p = target.base_distribution(ctx)?;
        total += p.iter().filter(|&&q| q > 0.0).map(|q| -q * q.ln()).sum::<f64>();
        n += 1;
    }
    if n == 0 {
        return Err(Error::domain("entropy needs at least one context"));
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(n: usize) -> Vocab {
        Vocab::new(n).unwrap()
    }

    fn order0(row: Vec<f64>) -> TabularMarkovModel {
        let n = row.len();
        TabularMarkovModel::new(v(n), 0, 0, row).unwrap()
    }

    #[test]
    fn vocab_rejects_tiny() {
        assert!(Vocab::new(1).is_err());
        assert!(Vocab::new(2).is_ok());
    }

    #[test]
    fn uniform_row_at_unit_temperature() {
        let m = order0(vec![0.25; 4]);
        let d = m.next_distribution(&[], Temperature::UNIT).unwrap();
        assert_eq!(d, vec![0.25; 4]);
    }

    #[test]
    fn greedy_temperature_is_one_hot() {
        let m = order0(vec![0.7, 0.3]);
        assert_eq!(m.next_distribution(&[], Temperature::GREEDY).unwrap(), vec![1.0, 0.0]);
        // ties go to the lowest id
        let m = order0(vec![0.4, 0.4, 0.2]);
        assert_eq!(m.next_distribution(&[], Temperature::GREEDY).unwrap(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn half_temperature_squares_and_renormalizes() {
        let m = order0(vec![0.8, 0.2]);
        let d = m.next_distribution(&[], Temperature::new(0.5).unwrap()).unwrap();
        assert_abs_diff_eq!(d[0], 0.64 / 0.68, epsilon = 1e-12);
        assert_abs_diff_eq!(d[0], 0.9412, epsilon = 1e-4);
        assert_abs_diff_eq!(d[1], 0.0588, epsilon = 1e-4);
    }

    #[test]
    fn invalid_context_token_is_rejected() {
        let m = TabularMarkovModel::new(v(2), 1, 0, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        assert!(matches!(
            m.next_distribution(&[3], Temperature::UNIT),
            Err(Error::InvalidToken { token: 3, vocab: 2 })
        ));
    }

    #[test]
    fn negative_temperature_is_rejected() {
        assert!(Temperature::new(-0.1).is_err());
        assert!(Temperature::new(f64::NAN).is_err());
    }

    #[test]
    fn table_validation() {
        assert!(TabularMarkovModel::new(v(2), 0, 0, vec![0.6, 0.5]).is_err());
        assert!(TabularMarkovModel::new(v(2), 0, 0, vec![1.2, -0.2]).is_err());
        assert!(TabularMarkovModel::new(v(2), 1, 0, vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn short_context_is_left_padded() {
        let w = MarkovWindow::new(v(3), 2, 2).unwrap();
        assert_eq!(w.state(&[]).unwrap(), 2 * 3 + 2);
        assert_eq!(w.state(&[1]).unwrap(), 2 * 3 + 1);
        assert_eq!(w.state(&[0, 1, 0]).unwrap(), 3);
    }

    #[test]
    fn sample_zero_length_is_empty() {
        let m = order0(vec![0.25; 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_sequence(&m, &[], 0, Temperature::UNIT, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn one_hot_model_forces_continuation() {
        // token t -> (t + 1) mod 3
        let m = TabularMarkovModel::from_fn(v(3), 1, 0, |s| {
            let mut row = vec![0.0; 3];
            row[(s + 1) % 3] = 1.0;
            row
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seq = sample_sequence(&m, &[1], 3, Temperature::UNIT, &mut rng).unwrap();
        assert_eq!(seq, vec![2, 0, 1]);
        assert_eq!(sequence_log_prob(&m, &[1], &seq, Temperature::UNIT).unwrap(), 0.0);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let m = order0(vec![0.25; 4]);
        let a = sample_sequence(&m, &[], 5, Temperature::UNIT, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_sequence(&m, &[], 5, Temperature::UNIT, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn log_prob_examples() {
        let m = order0(vec![0.5, 0.5]);
        assert_eq!(sequence_log_prob(&m, &[], &[], Temperature::UNIT).unwrap(), 0.0);
        assert_abs_diff_eq!(
            sequence_log_prob(&m, &[], &[0, 1], Temperature::UNIT).unwrap(),
            -1.3863,
            epsilon = 1e-4
        );
        let z = order0(vec![1.0, 0.0]);
        assert_eq!(sequence_log_prob(&z, &[], &[1], Temperature::UNIT).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn token_loss_examples() {
        let ctx: &[Token] = &[];
        let target = order0(vec![0.5, 0.5]);
        let draft = LinearSoftmaxDraftModel::uniform(v(2), 0, 0).unwrap();
        assert_abs_diff_eq!(token_loss(&draft, &target, &[ctx]).unwrap(), 2f64.ln(), epsilon = 1e-12);

        let target = order0(vec![1.0, 0.0]);
        // softmax([ln 0.9, ln 0.1]) = [0.9, 0.1]
        let draft = LinearSoftmaxDraftModel::from_logits(v(2), 0, 0, vec![0.9f64.ln(), 0.1f64.ln()]).unwrap();
        assert_abs_diff_eq!(token_loss(&draft, &target, &[ctx]).unwrap(), 0.1054, epsilon = 1e-4);

        let draft = LinearSoftmaxDraftModel::from_logits(v(2), 0, 0, vec![0.0, -1e6]).unwrap();
        assert_abs_diff_eq!(token_loss(&draft, &target, &[ctx]).unwrap(), 0.0, epsilon = 1e-12);

        assert!(token_loss(&draft, &target, &[]).is_err());
    }

    #[test]
    fn token_loss_gradient_examples() {
        let ctx: &[Token] = &[];
        let target = order0(vec![1.0, 0.0]);
        let draft = LinearSoftmaxDraftModel::uniform(v(2), 0, 0).unwrap();
        assert_eq!(grad_token_loss(&draft, &target, &[ctx]).unwrap(), vec![-0.5, 0.5]);

        let target = order0(vec![0.5, 0.5]);
        assert_eq!(grad_token_loss(&draft, &target, &[ctx]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn unvisited_rows_have_zero_gradient() {
        let target = TabularMarkovModel::from_fn(v(3), 1, 0, |_| vec![0.2, 0.3, 0.5]).unwrap();
        let draft = LinearSoftmaxDraftModel::uniform(v(3), 1, 0).unwrap();
        let ctxs: Vec<&[Token]> = vec![&[1], &[0, 1]];
        let g = grad_token_loss(&draft, &target, &ctxs).unwrap();
        assert!(g[0..3].iter().all(|&x| x == 0.0));
        assert!(g[6..9].iter().all(|&x| x == 0.0));
        assert!(g[3..6].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn vocab_mismatch_is_reported() {
        let target = order0(vec![0.5, 0.5]);
        let draft = LinearSoftmaxDraftModel::uniform(v(3), 0, 0).unwrap();
        let ctx: &[Token] = &[];
        assert!(matches!(
            token_loss(&draft, &target, &[ctx]),
            Err(Error::VocabMismatch { .. })
        ));
    }
}
