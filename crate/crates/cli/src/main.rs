//! Command-line front end: dataset generation, training, evaluation and
//! ablations. Every command writes into a staging directory first and only
//! moves its results into `--out` on success.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use agentseg::harness::{
    ablate, evaluate_model, generate_synthetic, load_model, train, write_eval_outputs, Config,
    Dataset, EvalOptions, SyntheticSpec, TrainOptions, ABLATION_CSV, FINAL_CHECKPOINT,
};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "agentseg", version, about = "Desk-scale 3D instance segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset, one scene file per scene.
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on `train_data` from the config; writes checkpoints and a log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also report every decoder layer's predictions.
        #[arg(long)]
        per_layer: bool,
        #[arg(long)]
        no_nms: bool,
        /// Pool all layers' predictions before suppression.
        #[arg(long)]
        coe: bool,
    },
    /// Train and evaluate every cell of the config's ablation grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { spec, out, seed } => {
            let spec = SyntheticSpec::load(&spec)?;
            staged(&out, |dir| {
                let files = generate_synthetic(&spec, seed, dir)?;
                println!("wrote {} scenes to {}", files.len(), out.display());
                Ok(())
            })
        }
        Command::Train { config, out, resume } => {
            let cfg = Config::load(&config)?;
            let data = Dataset::load(cfg.train_data()?)?.prepare(&cfg)?;
            staged(&out, |dir| {
                fs::write(dir.join("config.txt"), cfg.to_text())?;
                let opts = TrainOptions {
                    out_dir: Some(dir.to_path_buf()),
                    resume: resume.clone(),
                };
                let outcome = train(&cfg, &data, &opts)?;
                if let Some(last) = outcome.log.last() {
                    println!("epoch {} loss {:.6}", last.epoch, last.terms.total);
                } else {
                    println!("checkpoint already covers all {} epochs", cfg.epochs);
                }
                println!("checkpoint: {}", out.join(FINAL_CHECKPOINT).display());
                Ok(())
            })
        }
        Command::Eval {
            checkpoint,
            data,
            config,
            out,
            per_layer,
            no_nms,
            coe,
        } => {
            let cfg = Config::load(&config)?;
            let model = load_model(&cfg, &checkpoint)?;
            let data = Dataset::load(&data)?.prepare(&cfg)?;
            let opts = EvalOptions {
                per_layer,
                nms: cfg.nms && !no_nms,
                coe: cfg.coe || coe,
            };
            staged(&out, |dir| {
                let report = evaluate_model(&model, &data, &cfg, opts)?;
                write_eval_outputs(&report, &cfg, dir)?;
                let m = report.final_metrics;
                println!(
                    "mAP {:.4}  AP@50 {:.4}  AP@25 {:.4}  recall@50 {:.4}",
                    m.map, m.ap50, m.ap25, m.recall50
                );
                Ok(())
            })
        }
        Command::Ablate { config, out } => {
            let cfg = Config::load(&config)?;
            let train_set = Dataset::load(cfg.train_data()?)?;
            let eval_set = Dataset::load(cfg.eval_data()?)?;
            staged(&out, |dir| {
                let rows = ablate(&cfg, &train_set, &eval_set, Some(dir))?;
                println!("{} rows written to {}", rows.len(), out.join(ABLATION_CSV).display());
                Ok(())
            })
        }
    }
}

/// Runs `f` against a fresh sibling of `out`, then moves everything it wrote
/// into `out`. On failure the staging directory is removed and `out` is left
/// as it was.
fn staged(out: &Path, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let name = out
        .file_name()
        .with_context(|| format!("{}: not a usable output directory", out.display()))?;
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).with_context(|| parent.display().to_string())?;
    let staging = parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir(&staging).with_context(|| staging.display().to_string())?;
    let result = f(&staging).and_then(|()| publish(&staging, out));
    let _ = fs::remove_dir_all(&staging);
    result
}

fn publish(staging: &Path, out: &Path) -> Result<()> {
    if out.exists() && !out.is_dir() {
        bail!("{}: exists and is not a directory", out.display());
    }
    fs::create_dir_all(out).with_context(|| out.display().to_string())?;
    for entry in fs::read_dir(staging)? {
        let entry = entry?;
        let target = out.join(entry.file_name());
        if target.is_dir() {
            fs::remove_dir_all(&target)?;
        }
        fs::rename(entry.path(), &target).with_context(|| target.display().to_string())?;
    }
    Ok(())
}
