//! `gtolab`: command-line front end for the draft-tree lab.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gto_core::io::AnyModel;
use gto_core::lab::{
    emit_diagnostics, heldout_prompts, run_ablation, run_experiment_full, AblationAxis, AblationTable,
    ExperimentConfig, RunReport, World,
};
use gto_core::lm::Token;
use gto_core::verify::{speculative_decode, DecodeMetrics};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod config;

#[derive(Parser)]
#[command(name = "gtolab", version, about = "Draft-tree speculative decoding lab on synthetic Markov worlds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config; missing keys take the defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set gto.omega=0.0` or `--set eval.temperatures=[0.0]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        config::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the default config as TOML.
    Defaults,
    /// Generate the target world of a config and save it.
    World {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(short, long, default_value = "target.json")]
        out: PathBuf,
    },
    /// Run Phase I and both Phase-II arms, evaluate, and write models, logs and reports.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Defaults to `output_dir` from the config, then `runs/seed-<seed>`.
        #[arg(short, long)]
        out_dir: Option<PathBuf>,
    },
    /// Evaluate a saved drafter against a saved target.
    Decode {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        draft: PathBuf,
        /// Comma-separated prompt tokens; without it, held-out prompts are sampled from the target.
        #[arg(long)]
        prompt: Option<String>,
    },
    /// Sweep one axis: aggregator, group_size or debias.
    Ablate {
        axis: String,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of consecutive seeds starting at the config seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(short, long)]
        out_dir: Option<PathBuf>,
    },
    /// Re-render tables and CSV files from a saved report.
    Report {
        report: PathBuf,
        #[arg(short, long)]
        out_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let config = e.chain().any(|c| {
        c.downcast_ref::<config::ConfigError>().is_some()
            || matches!(c.downcast_ref::<gto_core::Error>(), Some(gto_core::Error::Config(_)))
    });
    if config {
        1
    } else {
        2
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Defaults => {
            print!("{}", config::defaults_toml()?);
            Ok(())
        }
        Command::World { cfg, out } => {
            let cfg = cfg.load()?;
            cfg.validate()?;
            let world = World::build(&cfg)?;
            AnyModel::from(world.target).save(&out).with_context(|| format!("writing {}", out.display()))?;
            log::info!("wrote target world to {}", out.display());
            Ok(())
        }
        Command::Train { cfg, out_dir } => train(cfg.load()?, out_dir),
        Command::Decode { cfg, target, draft, prompt } => decode(cfg.load()?, &target, &draft, prompt.as_deref()),
        Command::Ablate { axis, cfg, seeds, out_dir } => ablate(&axis, cfg.load()?, seeds, out_dir),
        Command::Report { report, out_dir } => {
            let text = fs::read_to_string(&report).with_context(|| format!("reading {}", report.display()))?;
            let report = RunReport::from_json(&text)?;
            print_report(&report);
            if let Some(dir) = out_dir {
                for p in emit_diagnostics(&report, &dir)? {
                    log::info!("wrote {}", p.display());
                }
            }
            Ok(())
        }
    }
}

fn out_dir_for(cfg: &ExperimentConfig, flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from(format!("runs/seed-{}", cfg.seed)))
}

fn train(cfg: ExperimentConfig, out_dir: Option<PathBuf>) -> Result<()> {
    let dir = out_dir_for(&cfg, out_dir);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    log::info!("training with seed {} into {}", cfg.seed, dir.display());
    let outcome = run_experiment_full(&cfg)?;

    let mut log_file = fs::File::create(dir.join("train_log.jsonl"))?;
    for (model, steps) in [("control", &outcome.control_log), ("gto", &outcome.gto_log)] {
        for s in steps {
            let mut rec = serde_json::to_value(s)?;
            rec["model"] = model.into();
            writeln!(log_file, "{rec}")?;
        }
    }
    AnyModel::from(outcome.world.target.clone()).save(dir.join("target.json"))?;
    AnyModel::from(outcome.models.reference.clone()).save(dir.join("reference.json"))?;
    AnyModel::from(outcome.models.control.clone()).save(dir.join("control.json"))?;
    AnyModel::from(outcome.models.gto.clone()).save(dir.join("gto.json"))?;
    fs::write(dir.join("config.toml"), config::to_toml(&cfg)?)?;
    emit_diagnostics(&outcome.report, &dir)?;
    print_report(&outcome.report);
    Ok(())
}

fn parse_prompt(text: &str) -> Result<Vec<Token>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<Token>().with_context(|| format!("bad prompt token {s:?}")))
        .collect()
}

fn decode(cfg: ExperimentConfig, target: &Path, draft: &Path, prompt: Option<&str>) -> Result<()> {
    cfg.validate()?;
    let target = AnyModel::load(target).with_context(|| format!("loading {}", target.display()))?.into_tabular()?;
    let draft = AnyModel::load(draft).with_context(|| format!("loading {}", draft.display()))?.into_draft()?;
    let prompts = match prompt {
        Some(p) => vec![parse_prompt(p)?],
        None => heldout_prompts(&target, &[], cfg.eval.prompts, cfg.eval.prompt_len, cfg.seed)?,
    };
    for (ti, &temp) in cfg.eval.temperatures.iter().enumerate() {
        let mut total = DecodeMetrics::empty(&cfg.eval.cost);
        for (j, p) in prompts.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(((ti as u64) << 32) | j as u64);
            let out = speculative_decode(&target, &draft, p, cfg.eval.max_tokens, &cfg.policy, temp, &cfg.eval.cost, &mut rng)?;
            if prompts.len() == 1 {
                let toks: Vec<String> = out.tokens.iter().map(|t| t.to_string()).collect();
                println!("T={} tokens: {}", temp.value(), toks.join(","));
            }
            total.merge(&out.metrics);
        }
        let mut rec = total.to_json();
        rec["temperature"] = temp.value().into();
        println!("{rec}");
    }
    Ok(())
}

fn ablate(axis: &str, cfg: ExperimentConfig, seeds: u64, out_dir: Option<PathBuf>) -> Result<()> {
    let axis = AblationAxis::parse(axis)?;
    if seeds == 0 {
        bail!(config::ConfigError("--seeds must be >= 1".into()));
    }
    cfg.validate()?;
    let dir = out_dir_for(&cfg, out_dir);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tables = Vec::new();
    for seed in cfg.seed..cfg.seed + seeds {
        log::info!("ablating {} at seed {seed}", axis.name());
        let table = run_ablation(&cfg.with_seed(seed), axis)?;
        fs::write(dir.join(format!("ablation_{}_seed{seed}.csv", axis.name())), table.to_csv())?;
        tables.push(table);
    }
    fs::write(dir.join(format!("ablation_{}.json", axis.name())), serde_json::to_string_pretty(&tables)?)?;
    print_ablation_means(&tables);
    Ok(())
}

fn print_ablation_means(tables: &[AblationTable]) {
    let Some(first) = tables.first() else { return };
    println!("{:<12} {:>10}   (τ averaged over temperatures and {} seed(s))", "setting", "tau", tables.len());
    for (i, (setting, _)) in first.mean_tau().iter().enumerate() {
        let mean = tables.iter().map(|t| t.mean_tau()[i].1).sum::<f64>() / tables.len() as f64;
        println!("{setting:<12} {mean:>10.4}");
    }
}

fn print_report(report: &RunReport) {
    println!("{:<10} {:>6} {:>8} {:>10} {:>8} {:>8}", "model", "T", "tau", "speedup", "pruned", "match");
    for e in &report.evals {
        let m = &e.metrics;
        println!(
            "{:<10} {:>6} {:>8.4} {:>10.4} {:>8.4} {:>8.4}",
            e.model,
            e.temperature.value(),
            m.tau,
            m.speedup_proxy,
            m.greedy_pruned_frac,
            m.greedy_accept_match_frac
        );
    }
    for s in &report.summary {
        println!("{:<10} mean tau {:.4}, mean speedup {:.4}", s.model, s.mean_tau, s.mean_speedup_proxy);
    }
    for t in &report.ablations {
        print_ablation_means(std::slice::from_ref(t));
    }
}
