//! Seeded experiment harness.
//!
//! A run synthesizes a Dirichlet-Markov target, samples a training corpus and
//! disjoint held-out prompts, warms up a drafter on the token loss, then
//! continues from that snapshot twice: once with the token loss alone
//! (control) and once with the group tree objective added. All three drafters
//! are evaluated with speculative decoding on the same prompts and seeds.
//!
//! Every random stream is derived from the top-level seed, so a config fully
//! determines the report down to the byte.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{
    mean_conditional_entropy, sample_sequence, ConditionalModel, LinearSoftmaxDraftModel, TabularMarkovModel,
    Temperature, Token, Vocab,
};
use crate::reward::{Aggregator, RewardConfig};
use crate::train::{run_phase2, warmup_phase1, GtoConfig, StepReport, TrainSetup, WarmupReport};
use crate::tree::TreePolicyConfig;
use crate::verify::{speculative_decode, CostModel, DecodeMetrics};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Pad token of every model the harness builds.
pub const PAD: Token = 0;

mod stream {
    pub const WORLD: u64 = 1;
    pub const CORPUS: u64 = 2;
    pub const PROMPTS: u64 = 3;
    pub const DRAFT_INIT: u64 = 4;
    pub const PHASE2: u64 = 5;
    pub const EVAL: u64 = 6;
}

/// Independent seed for one named stream of a run.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Target whose rows are independent symmetric Dirichlet draws.
pub fn make_world(seed: u64, vocab: usize, order: usize, concentration: f64) -> Result<TabularMarkovModel> {
    let v = Vocab::new(vocab)?;
    if order == 0 {
        return Err(Error::Config("world order must be >= 1".into()));
    }
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(Error::Config(format!("concentration must be positive, got {concentration}")));
    }
    let gamma = Gamma::new(concentration, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TabularMarkovModel::from_fn(v, order, PAD, |_| {
        let mut row: Vec<f64> = (0..vocab).map(|_| gamma.sample(&mut rng)).collect();
        let sum: f64 = row.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            row.iter_mut().for_each(|x| *x /= sum);
        } else {
            // Every draw underflowed: the limit of a tiny concentration is a
            // single random vertex.
            row.iter_mut().for_each(|x| *x = 0.0);
            row[rng.random_range(0..vocab)] = 1.0;
        }
        row
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub vocab: usize,
    pub order: usize,
    pub concentration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub sequences: usize,
    pub seq_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DraftConfig {
    pub order: usize,
    /// Half-width of the uniform logit initialization; 0 starts uniform.
    pub init_scale: f64,
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub temperatures: Vec<Temperature>,
    pub prompts: usize,
    pub prompt_len: usize,
    pub max_tokens: usize,
    pub cost: CostModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub corpus: CorpusConfig,
    pub draft: DraftConfig,
    pub policy: TreePolicyConfig,
    pub reward: RewardConfig,
    /// Target temperature used when scoring trees during training.
    pub reward_temperature: Temperature,
    pub gto: GtoConfig,
    pub eval: EvalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            world: WorldConfig { vocab: 16, order: 2, concentration: 0.3 },
            corpus: CorpusConfig { sequences: 48, seq_len: 64 },
            draft: DraftConfig { order: 1, init_scale: 0.0, warmup_epochs: 20, warmup_lr: 10.0 },
            policy: TreePolicyConfig { depth: 4, layer_topk: 3, leaf_budget: 8, token_budget: None },
            reward: RewardConfig::default(),
            reward_temperature: Temperature::UNIT,
            gto: GtoConfig { learning_rate: 0.5, epochs: 3, ..GtoConfig::default() },
            eval: EvalConfig {
                temperatures: vec![Temperature::GREEDY, Temperature::UNIT],
                prompts: 256,
                prompt_len: 6,
                max_tokens: 16,
                cost: CostModel::default(),
            },
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        Vocab::new(self.world.vocab).map_err(|e| Error::Config(e.to_string()))?;
        if self.world.order == 0 {
            return bad("world.order must be >= 1".into());
        }
        if !(self.world.concentration > 0.0 && self.world.concentration.is_finite()) {
            return bad("world.concentration must be positive".into());
        }
        if self.corpus.sequences == 0 || self.corpus.seq_len == 0 {
            return bad("corpus.sequences and corpus.seq_len must be >= 1".into());
        }
        if !(self.draft.init_scale >= 0.0 && self.draft.init_scale.is_finite()) {
            return bad("draft.init_scale must be >= 0".into());
        }
        if !(self.draft.warmup_lr > 0.0 && self.draft.warmup_lr.is_finite()) {
            return bad("draft.warmup_lr must be > 0".into());
        }
        if self.eval.temperatures.is_empty() {
            return bad("eval.temperatures must be nonempty".into());
        }
        if self.eval.prompts == 0 || self.eval.prompt_len == 0 || self.eval.max_tokens == 0 {
            return bad("eval.prompts, eval.prompt_len and eval.max_tokens must be >= 1".into());
        }
        if self.eval.prompt_len > self.corpus.seq_len {
            return bad("eval.prompt_len must not exceed corpus.seq_len".into());
        }
        self.eval.cost.validate()?;
        self.setup().validate()
    }

    /// Phase-II setup with the group-sampling seed mixed into the run seed.
    pub fn setup(&self) -> TrainSetup {
        let mut gto = self.gto;
        gto.seed = derive_seed(self.seed, stream::PHASE2) ^ self.gto.seed;
        TrainSetup { policy: self.policy, reward: self.reward, reward_temperature: self.reward_temperature, gto }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        ExperimentConfig { seed, ..self.clone() }
    }
}

/// Target, training corpus and held-out prompts of one run.
#[derive(Debug, Clone)]
pub struct World {
    pub target: TabularMarkovModel,
    pub corpus: Vec<Vec<Token>>,
    pub prompts: Vec<Vec<Token>>,
}

impl World {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let target = make_world(
            derive_seed(cfg.seed, stream::WORLD),
            cfg.world.vocab,
            cfg.world.order,
            cfg.world.concentration,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream::CORPUS));
        let corpus = (0..cfg.corpus.sequences)
            .map(|_| sample_sequence(&target, &[], cfg.corpus.seq_len, Temperature::UNIT, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let prompts = heldout_prompts(&target, &corpus, cfg.eval.prompts, cfg.eval.prompt_len, derive_seed(cfg.seed, stream::PROMPTS))?;
        Ok(World { target, corpus, prompts })
    }
}

/// Prompts sampled from the target that differ from every same-length
/// prefix of the corpus.
pub fn heldout_prompts(
    target: &TabularMarkovModel,
    corpus: &[Vec<Token>],
    count: usize,
    len: usize,
    seed: u64,
) -> Result<Vec<Vec<Token>>> {
    let seen: HashSet<&[Token]> = corpus.iter().filter(|s| s.len() >= len).map(|s| &s[..len]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut tries = 0usize;
    while out.len() < count {
        tries += 1;
        if tries > 1000 * count.max(1) {
            return Err(Error::Config(format!("could not find {count} held-out prompts of length {len}")));
        }
        let p = sample_sequence(target, &[], len, Temperature::UNIT, &mut rng)?;
        if !seen.contains(p.as_slice()) {
            out.push(p);
        }
    }
    Ok(out)
}

pub fn initial_draft(cfg: &ExperimentConfig) -> Result<LinearSoftmaxDraftModel> {
    let v = Vocab::new(cfg.world.vocab)?;
    if cfg.draft.init_scale == 0.0 {
        return LinearSoftmaxDraftModel::uniform(v, cfg.draft.order, PAD);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream::DRAFT_INIT));
    LinearSoftmaxDraftModel::random(v, cfg.draft.order, PAD, cfg.draft.init_scale, &mut rng)
}

/// Decodes every prompt at every temperature. Prompt `j` at temperature `t`
/// always gets the same random stream, whichever drafter is evaluated.
pub fn evaluate<D: ConditionalModel>(
    target: &TabularMarkovModel,
    draft: &D,
    prompts: &[Vec<Token>],
    cfg: &ExperimentConfig,
) -> Result<Vec<(Temperature, DecodeMetrics)>> {
    let base = derive_seed(cfg.seed, stream::EVAL);
    cfg.eval
        .temperatures
        .iter()
        .enumerate()
        .map(|(ti, &temp)| {
            let per_prompt = prompts
                .par_iter()
                .enumerate()
                .map(|(j, p)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(base);
                    rng.set_stream(((ti as u64) << 32) | j as u64);
                    speculative_decode(target, draft, p, cfg.eval.max_tokens, &cfg.policy, temp, &cfg.eval.cost, &mut rng)
                        .map(|o| o.metrics)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut total = DecodeMetrics::empty(&cfg.eval.cost);
            for m in &per_prompt {
                total.merge(m);
            }
            Ok((temp, total))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub token_loss: f64,
    pub gto_loss: f64,
    pub mean_abs_advantage: f64,
    pub mean_ratio: f64,
    pub clip_active_frac: f64,
}

pub fn summarize_epochs(log: &[StepReport], epochs: usize) -> Vec<EpochSummary> {
    if epochs == 0 || log.is_empty() {
        return Vec::new();
    }
    let per = log.len() / epochs;
    log.chunks(per.max(1))
        .enumerate()
        .map(|(epoch, chunk)| {
            let n = chunk.len() as f64;
            let mean = |f: fn(&StepReport) -> f64| chunk.iter().map(f).sum::<f64>() / n;
            EpochSummary {
                epoch,
                steps: chunk.len(),
                token_loss: mean(|s| s.token_loss),
                gto_loss: mean(|s| s.gto_loss),
                mean_abs_advantage: mean(|s| s.mean_abs_advantage),
                mean_ratio: mean(|s| s.mean_ratio),
                clip_active_frac: mean(|s| s.clip_active_frac),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseCurve {
    pub model: String,
    pub epochs: Vec<EpochSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub model: String,
    pub temperature: Temperature,
    pub metrics: DecodeMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    /// τ averaged over the evaluation temperatures.
    pub mean_tau: f64,
    pub mean_speedup_proxy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Aggregator,
    GroupSize,
    Debias,
}

impl AblationAxis {
    pub const GROUP_SIZES: [usize; 5] = [1, 4, 8, 16, 32];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Aggregator => "aggregator",
            AblationAxis::GroupSize => "group_size",
            AblationAxis::Debias => "debias",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "aggregator" => Ok(AblationAxis::Aggregator),
            "group_size" | "group-size" | "m" => Ok(AblationAxis::GroupSize),
            "debias" => Ok(AblationAxis::Debias),
            other => Err(Error::Config(format!("unknown ablation axis {other:?}; use aggregator, group_size or debias"))),
        }
    }

    /// One (label, config) per setting; everything but the swept field is
    /// copied from `cfg`.
    pub fn settings(self, cfg: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        match self {
            AblationAxis::Aggregator => Aggregator::ALL
                .iter()
                .map(|&a| {
                    let mut c = cfg.clone();
                    c.reward.aggregator = a;
                    (a.name().to_string(), c)
                })
                .collect(),
            AblationAxis::GroupSize => Self::GROUP_SIZES
                .iter()
                .map(|&m| {
                    let mut c = cfg.clone();
                    c.gto.group_size = m;
                    (format!("m={m}"), c)
                })
                .collect(),
            AblationAxis::Debias => [true, false]
                .iter()
                .map(|&on| {
                    let mut c = cfg.clone();
                    c.gto.debias = on;
                    (if on { "on" } else { "off" }.to_string(), c)
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub temperature: Temperature,
    pub tau: f64,
    pub speedup_proxy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Temperature-averaged τ per setting, in sweep order.
    pub fn mean_tau(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64, usize)> = Vec::new();
        for r in &self.rows {
            match out.iter_mut().find(|(s, _, _)| *s == r.setting) {
                Some(e) => {
                    e.1 += r.tau;
                    e.2 += 1;
                }
                None => out.push((r.setting.clone(), r.tau, 1)),
            }
        }
        out.into_iter().map(|(s, t, n)| (s, t / n as f64)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("axis,setting,temperature,tau,speedup_proxy\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", self.axis.name(), r.setting, r.temperature.value(), r.tau, r.speedup_proxy);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSummary {
    pub target_entropy: f64,
    pub corpus_tokens: usize,
    pub heldout_prompts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub world: WorldSummary,
    pub phase1: WarmupReport,
    pub phase2: Vec<PhaseCurve>,
    pub evals: Vec<EvalRecord>,
    pub summary: Vec<ModelSummary>,
    #[serde(default)]
    pub ablations: Vec<AblationTable>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses and checks the structural invariants of a report.
    pub fn from_json(text: &str) -> Result<Self> {
        let r: RunReport = serde_json::from_str(text)?;
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Format(format!("report: {m}")));
        if self.schema_version != REPORT_SCHEMA_VERSION {
            return fail(format!("schema version {} is not {}", self.schema_version, REPORT_SCHEMA_VERSION));
        }
        for e in &self.evals {
            let m = &e.metrics;
            if m.per_cycle_histogram.iter().sum::<u64>() != m.cycles {
                return fail(format!("{} histogram mass differs from the cycle count", e.model));
            }
            for f in [m.greedy_pruned_frac, m.greedy_accept_match_frac] {
                if !(0.0..=1.0).contains(&f) {
                    return fail(format!("{} has a fraction outside [0, 1]", e.model));
                }
            }
        }
        for s in &self.summary {
            if !self.evals.iter().any(|e| e.model == s.model) {
                return fail(format!("summary model {} has no evaluations", s.model));
            }
        }
        Ok(())
    }

    pub fn summary_for(&self, model: &str) -> Option<&ModelSummary> {
        self.summary.iter().find(|s| s.model == model)
    }
}

/// The three drafters of a run.
#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub reference: LinearSoftmaxDraftModel,
    pub control: LinearSoftmaxDraftModel,
    pub gto: LinearSoftmaxDraftModel,
}

pub struct RunOutcome {
    pub report: RunReport,
    pub world: World,
    pub models: TrainedModels,
    pub control_log: Vec<StepReport>,
    pub gto_log: Vec<StepReport>,
}

fn summarize(model: &str, evals: &[(Temperature, DecodeMetrics)]) -> ModelSummary {
    let n = evals.len() as f64;
    ModelSummary {
        model: model.to_string(),
        mean_tau: evals.iter().map(|(_, m)| m.tau).sum::<f64>() / n,
        mean_speedup_proxy: evals.iter().map(|(_, m)| m.speedup_proxy).sum::<f64>() / n,
    }
}

/// World, corpus, prompts and the Phase-I reference for `cfg`.
pub fn prepare(cfg: &ExperimentConfig) -> Result<(World, LinearSoftmaxDraftModel, WarmupReport)> {
    cfg.validate()?;
    let world = World::build(cfg)?;
    let init = initial_draft(cfg)?;
    let (reference, warm) = warmup_phase1(&init, &world.target, &world.corpus, cfg.draft.warmup_epochs, cfg.draft.warmup_lr)?;
    Ok((world, reference, warm))
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    Ok(run_experiment_full(cfg)?.report)
}

/// Like [`run_experiment`] but also hands back the world, the models and
/// the per-step training logs.
pub fn run_experiment_full(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let (world, reference, warm) = prepare(cfg)?;
    let setup = cfg.setup();
    let control_setup = TrainSetup { gto: GtoConfig { omega: 0.0, ..setup.gto }, ..setup };
    let (control, gto) = rayon::join(
        || run_phase2(&reference, &reference, &world.target, &world.corpus, &control_setup),
        || run_phase2(&reference, &reference, &world.target, &world.corpus, &setup),
    );
    let (control, control_log) = control?;
    let (gto, gto_log) = gto?;
    let models = TrainedModels { reference, control, gto };

    let mut evals = Vec::new();
    let mut summary = Vec::new();
    for (name, model) in [("reference", &models.reference), ("control", &models.control), ("gto", &models.gto)] {
        let rows = evaluate(&world.target, model, &world.prompts, cfg)?;
        summary.push(summarize(name, &rows));
        evals.extend(rows.into_iter().map(|(temperature, metrics)| EvalRecord { model: name.into(), temperature, metrics }));
    }

    let ctxs = world.corpus.iter().flat_map(|s| (0..s.len()).map(move |i| &s[..i]));
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: cfg.clone(),
        world: WorldSummary {
            target_entropy: mean_conditional_entropy(&world.target, ctxs)?,
            corpus_tokens: world.corpus.iter().map(Vec::len).sum(),
            heldout_prompts: world.prompts.len(),
        },
        phase1: warm,
        phase2: vec![
            PhaseCurve { model: "control".into(), epochs: summarize_epochs(&control_log, cfg.gto.epochs) },
            PhaseCurve { model: "gto".into(), epochs: summarize_epochs(&gto_log, cfg.gto.epochs) },
        ],
        evals,
        summary,
        ablations: Vec::new(),
    };
    report.validate()?;
    Ok(RunOutcome { report, world, models, control_log, gto_log })
}

/// Sweeps one axis from a shared Phase-I reference. Rows come back in sweep
/// order, one per (setting, temperature).
pub fn run_ablation(cfg: &ExperimentConfig, axis: AblationAxis) -> Result<AblationTable> {
    let (world, reference, _) = prepare(cfg)?;
    let settings = axis.settings(cfg);
    let per_setting = settings
        .par_iter()
        .map(|(label, c)| {
            c.validate()?;
            let (model, _) = run_phase2(&reference, &reference, &world.target, &world.corpus, &c.setup())?;
            let evals = evaluate(&world.target, &model, &world.prompts, c)?;
            Ok(evals
                .into_iter()
                .map(|(temperature, m)| AblationRow {
                    setting: label.clone(),
                    temperature,
                    tau: m.tau,
                    speedup_proxy: m.speedup_proxy,
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { axis, rows: per_setting.into_iter().flatten().collect() })
}

/// Writes `report.json`, `diagnostics.csv` and `histograms.csv` into `dir`
/// and returns the paths written.
pub fn emit_diagnostics(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let path = dir.join("report.json");
    fs::write(&path, report.to_json()?)?;
    written.push(path);

    let mut diag = String::from("model,temperature,tau,speedup_proxy,cycles,total_tokens,greedy_pruned_frac,greedy_accept_match_frac\n");
    let mut hist = String::from("model,temperature,emitted,cycles\n");
    for e in &report.evals {
        let m = &e.metrics;
        let t = e.temperature.value();
        let _ = writeln!(
            diag,
            "{},{},{},{},{},{},{},{}",
            e.model, t, m.tau, m.speedup_proxy, m.cycles, m.total_tokens, m.greedy_pruned_frac, m.greedy_accept_match_frac
        );
        for (a, c) in m.per_cycle_histogram.iter().enumerate() {
            let _ = writeln!(hist, "{},{},{},{}", e.model, t, a, c);
        }
    }
    for (name, body) in [("diagnostics.csv", diag), ("histograms.csv", hist)] {
        let path = dir.join(name);
        fs::write(&path, body)?;
        written.push(path);
    }
    for table in &report.ablations {
        let path = dir.join(format!("ablation_{}.csv", table.axis.name()));
        fs::write(&path, table.to_csv())?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worlds_are_seeded() {
        let a = make_world(9, 6, 2, 0.3).unwrap();
        let b = make_world(9, 6, 2, 0.3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, make_world(10, 6, 2, 0.3).unwrap());
    }

    #[test]
    fn world_rows_are_normalized() {
        let w = make_world(1, 8, 2, 0.05).unwrap();
        for row in w.table().chunks(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn large_concentration_is_nearly_uniform() {
        let v = 8;
        let w = make_world(2, v, 1, 1000.0).unwrap();
        let tv: f64 = w
            .table()
            .chunks(v)
            .map(|row| 0.5 * row.iter().map(|p| (p - 1.0 / v as f64).abs()).sum::<f64>())
            .sum::<f64>()
            / (w.table().len() / v) as f64;
        assert!(tv < 0.05, "mean total variation {tv}");
    }

    #[test]
    fn world_config_errors() {
        assert!(make_world(0, 1, 1, 1.0).is_err());
        assert!(make_world(0, 4, 0, 1.0).is_err());
        assert!(make_world(0, 4, 1, 0.0).is_err());
    }

    #[test]
    fn prompts_avoid_corpus_prefixes() {
        let cfg = ExperimentConfig::default();
        let world = World::build(&cfg).unwrap();
        let seen: HashSet<&[Token]> = world.corpus.iter().map(|s| &s[..cfg.eval.prompt_len]).collect();
        assert_eq!(world.prompts.len(), cfg.eval.prompts);
        assert!(world.prompts.iter().all(|p| !seen.contains(p.as_slice())));
    }

    #[test]
    fn ablation_settings_vary_one_field() {
        let cfg = ExperimentConfig::default();
        let s = AblationAxis::Aggregator.settings(&cfg);
        assert_eq!(s.len(), 3);
        for (_, c) in &s {
            assert_eq!(ExperimentConfig { reward: cfg.reward, ..c.clone() }, cfg);
        }
        let s = AblationAxis::GroupSize.settings(&cfg);
        assert_eq!(s.iter().map(|(_, c)| c.gto.group_size).collect::<Vec<_>>(), vec![1, 4, 8, 16, 32]);
        let s = AblationAxis::Debias.settings(&cfg);
        assert_eq!(s.len(), 2);
        assert!(!s[1].1.gto.debias);
        assert!(AblationAxis::parse("nope").is_err());
    }

    #[test]
    fn default_config_is_valid() {
        ExperimentConfig::default().validate().unwrap();
        let mut c = ExperimentConfig::default();
        c.eval.temperatures.clear();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
