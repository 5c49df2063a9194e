use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mue::checkpoint::{load_checkpoint, save_checkpoint};
use mue::config::RunConfig;
use mue::data::{self, detokenize};
use mue::engine::generate;
use mue::evalbench::{bench_csv, format_float, profile_csv, saturation_profile, threshold_sweep, SweepOptions};
use mue::training::{evaluate_loss, train_with};
use mue::{Model, SyntheticExample};
use serde_json::json;

#[derive(Parser)]
#[command(name = "mue", about = "Early-exit encoder-decoder: data, training, inference and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset to data.path.
    GenData(Common),
    /// Train on data.path; write output.checkpoint and output.loss_csv.
    Train(Common),
    /// Print one JSON line per example of data.path.
    Infer(Common),
    /// Sweep exit thresholds; write output.bench_csv.
    Bench(Common),
    /// Mean layer-to-layer similarity; write output.profile_csv.
    Profile(Common),
}

fn load_config(common: &Common) -> Result<RunConfig> {
    RunConfig::load(common.config.as_deref(), &common.overrides).context("loading configuration")
}

fn dataset(cfg: &RunConfig) -> Result<Vec<SyntheticExample>> {
    let path = cfg.require("data.path", &cfg.data.path)?;
    data::read_dataset(Path::new(path)).with_context(|| format!("reading dataset {path}"))
}

fn trained_model(cfg: &RunConfig) -> Result<Model> {
    let path = cfg.require("output.checkpoint", &cfg.output.checkpoint)?;
    let params = load_checkpoint(Path::new(path), &cfg.model).with_context(|| format!("loading checkpoint {path}"))?;
    Ok(Model {
        config: cfg.model.clone(),
        params,
    })
}

fn ensure_parent(path: &str) -> Result<()> {
    match Path::new(path).parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
        }
        _ => Ok(()),
    }
}

fn write(path: &str, contents: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, contents).with_context(|| format!("writing {path}"))
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let path = cfg.require("data.path", &cfg.data.path)?;
    let examples = data::generate(cfg.data.seed, cfg.data.count, cfg.data.task, &cfg.model)?;
    ensure_parent(path)?;
    data::write_dataset(Path::new(path), &examples).with_context(|| format!("writing {path}"))?;
    println!("wrote {} {} examples to {path}", examples.len(), cfg.data.task.as_str());
    Ok(())
}

fn train(cfg: &RunConfig) -> Result<()> {
    let checkpoint = cfg.require("output.checkpoint", &cfg.output.checkpoint)?;
    let examples = dataset(cfg)?;
    let mut model = Model::init(cfg.model.clone(), cfg.train.seed)?;
    let layers = if cfg.train.layerwise_loss { cfg.model.n_dec_layers } else { 1 };
    let mut csv = String::from("step,total");
    for i in 1..=layers {
        csv.push_str(&format!(",layer_{i}"));
    }
    csv.push('\n');
    train_with(&mut model, &examples, &cfg.train, |step, report| {
        csv.push_str(&format!("{step},{}", format_float(report.total)));
        for v in &report.per_layer {
            csv.push(',');
            csv.push_str(&format_float(*v));
        }
        csv.push('\n');
    })?;
    ensure_parent(checkpoint)?;
    save_checkpoint(&model.params, Path::new(checkpoint)).with_context(|| format!("writing {checkpoint}"))?;
    if let Some(path) = &cfg.output.loss_csv {
        write(path, &csv)?;
    }
    let held = match cfg.data.eval_count {
        0 => &examples[..],
        n => &examples[..n.min(examples.len())],
    };
    let eval = evaluate_loss(&model, held, cfg.train.layerwise_loss)?;
    println!("final_eval_loss {}", format_float(eval.total));
    Ok(())
}

fn infer(cfg: &RunConfig) -> Result<()> {
    let model = trained_model(cfg)?;
    let policy = cfg.exit_policy();
    policy.validate()?;
    for ex in dataset(cfg)? {
        let out = generate(&model, &ex, &policy)?;
        let line = json!({
            "task": ex.task.as_str(),
            "text": detokenize(&ex.text),
            "output": detokenize(&out.tokens),
            "reference": detokenize(ex.reference()),
            "hit_limit": out.hit_limit,
            "trace": out.trace,
        });
        println!("{line}");
    }
    Ok(())
}

fn bench(cfg: &RunConfig) -> Result<()> {
    let out = cfg.require("output.bench_csv", &cfg.output.bench_csv)?;
    let model = trained_model(cfg)?;
    let policy = cfg.exit_policy();
    policy.validate()?;
    let opts = SweepOptions {
        weighting: cfg.time_weighting,
        wall_clock: cfg.output.wall_clock,
    };
    let rows = threshold_sweep(&model, &dataset(cfg)?, &cfg.theta_grid, &policy, &opts)?;
    write(out, &bench_csv(&rows))
}

fn profile(cfg: &RunConfig) -> Result<()> {
    let out = cfg.require("output.profile_csv", &cfg.output.profile_csv)?;
    let model = trained_model(cfg)?;
    let p = saturation_profile(&model, &dataset(cfg)?, cfg.data.sample_count)?;
    write(out, &profile_csv(&p))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let (common, run): (&Common, fn(&RunConfig) -> Result<()>) = match &cli.command {
        Command::GenData(c) => (c, gen_data),
        Command::Train(c) => (c, train),
        Command::Infer(c) => (c, infer),
        Command::Bench(c) => (c, bench),
        Command::Profile(c) => (c, profile),
    };
    run(&load_config(common)?)
}
