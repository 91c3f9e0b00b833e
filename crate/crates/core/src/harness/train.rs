//! Training with per-epoch shuffling, checkpoints and resume.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{forward, prepare_scene, Model, PreparedScene};
use super::Config;
use crate::autodiff::{checkpoint, poly_lr, Adam, Matrix, Tape};
use crate::error::{Error, Result};
use crate::matching::{total_loss, LossTerms};
use crate::scene::Scene;

pub const TRAIN_LOG_HEADER: &str = "epoch,lr,loss,ce,bce,dice,center,score";
const POLY_POWER: f64 = 0.9;

/// Per-epoch means over scenes of the loss summed over layers.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate of the epoch's first step.
    pub lr: f64,
    pub terms: LossTerms,
}

pub fn format_train_log(log: &[EpochLog]) -> String {
    let mut out = String::from(TRAIN_LOG_HEADER);
    out.push('\n');
    for e in log {
        let t = &e.terms;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            e.epoch, e.lr, t.total, t.ce, t.bce, t.dice, t.center, t.score
        );
    }
    out
}

/// Scene visiting order of `epoch` (0-based), from the run seed alone so a
/// resumed run sees the same order.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn step_rng(seed: u64, epoch: usize, scene: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_5A5A_0F0F_F0F0);
    rng.set_stream(((epoch as u64) << 32) | scene as u64);
    rng
}

/// Rotates the scene about the vertical axis through its bounding-box
/// center by a random angle, and mirrors it in x half of the time.
pub fn augment<R: Rng>(scene: &Scene, rng: &mut R) -> Scene {
    let (lo, hi) = scene.bounds();
    let (cx, cy) = (0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]));
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let mirror = if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
    let (s, c) = theta.sin_cos();
    let turn = |x: f64, y: f64| (mirror * (c * x - s * y), s * x + c * y);
    let mut out = scene.clone();
    let n = scene.len();
    let mut pos = Matrix::zeros(n, 3);
    let mut nrm = Matrix::zeros(n, 3);
    for i in 0..n {
        let p = scene.positions.row(i);
        let (x, y) = turn(p[0] - cx, p[1] - cy);
        pos.row_mut(i).copy_from_slice(&[x + cx, y + cy, p[2]]);
        let q = scene.normals.row(i);
        let (x, y) = turn(q[0], q[1]);
        let len = (x * x + y * y + q[2] * q[2]).sqrt();
        nrm.row_mut(i).copy_from_slice(&[x / len, y / len, q[2] / len]);
    }
    out.positions = pos;
    out.normals = nrm;
    out
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoint_epoch{epoch:04}.txt")
}

pub const FINAL_CHECKPOINT: &str = "checkpoint.txt";
pub const TRAIN_LOG: &str = "train_log.csv";

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where checkpoints and the log go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
}

pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: Adam,
    /// Epochs run by this call (a resumed run omits the earlier ones).
    pub log: Vec<EpochLog>,
    /// Loss of every step in order.
    pub step_losses: Vec<f64>,
}

/// One optimizer step on one scene. Returns the loss before the step.
pub fn train_step(model: &mut Model, opt: &mut Adam, scene: &PreparedScene, cfg: &Config, lr: f64) -> Result<LossTerms> {
    let mut tape = Tape::new();
    let out = forward(&mut tape, model, scene, cfg)?;
    let layers: Vec<_> = out.decoder.layers.iter().map(|l| (l.vars, &l.pred)).collect();
    let loss = total_loss(&mut tape, &layers, &scene.gts, &cfg.loss, cfg.decoder.mask_bin_threshold);
    let (loss, reports) = match loss {
        Ok(v) => v,
        Err(Error::NonFinite(m)) => return Err(non_finite(scene, &m)),
        Err(e) => return Err(e),
    };
    if let Some((_, op)) = tape.first_non_finite() {
        return Err(non_finite(scene, &format!("{op} produced a non-finite value")));
    }
    let mut terms = LossTerms::default();
    for r in &reports {
        terms.add(r);
    }
    model.store.zero_grad();
    tape.backward(loss, &mut model.store)?;
    if model.store.iter().any(|(_, p)| !p.grad.all_finite()) {
        return Err(non_finite(scene, "gradient is non-finite"));
    }
    opt.step(&mut model.store, lr);
    model.agents.clamp(&mut model.store);
    Ok(terms)
}

fn non_finite(scene: &PreparedScene, detail: &str) -> Error {
    Error::NonFinite(format!("training aborted at scene {}: {detail}", scene.name))
}

/// Trains for `cfg.epochs` epochs over `data`, one scene per step.
pub fn train(cfg: &Config, data: &[PreparedScene], opts: &TrainOptions) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let mut model = Model::new(cfg, cfg.seed)?;
    let mut opt = Adam::new(&model.store);
    let mut start_epoch = 0;
    if let Some(path) = &opts.resume {
        opt = checkpoint::load(path, &mut model.store)?.ok_or_else(|| {
            Error::Argument(format!("{}: checkpoint has no optimizer state", path.display()))
        })?;
        let steps = opt.steps_taken() as usize;
        if !steps.is_multiple_of(data.len()) {
            return Err(Error::Argument(format!(
                "{}: {steps} steps is not a whole number of {}-scene epochs",
                path.display(),
                data.len()
            )));
        }
        start_epoch = steps / data.len();
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let total_steps = (cfg.epochs * data.len()) as u64;
    let mut log = Vec::new();
    let mut step_losses = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let mut sum = LossTerms::default();
        let mut first_lr = None;
        for i in epoch_order(cfg.seed, epoch, data.len()) {
            let lr = poly_lr(cfg.lr, opt.steps_taken(), total_steps, POLY_POWER);
            first_lr.get_or_insert(lr);
            let terms = if cfg.augment {
                let moved = augment(&data[i].scene, &mut step_rng(cfg.seed, epoch, i));
                let scene = prepare_scene(&data[i].name, &moved, cfg)?;
                train_step(&mut model, &mut opt, &scene, cfg, lr)?
            } else {
                train_step(&mut model, &mut opt, &data[i], cfg, lr)?
            };
            step_losses.push(terms.total);
            sum.add(&terms);
        }
        log.push(EpochLog {
            epoch: epoch + 1,
            lr: first_lr.unwrap_or(0.0),
            terms: sum.scaled(1.0 / data.len() as f64),
        });
        if let Some(dir) = &opts.out_dir {
            let last = epoch + 1 == cfg.epochs;
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                checkpoint::save(&dir.join(checkpoint_name(epoch + 1)), &model.store, Some(&opt))?;
            }
            if last {
                checkpoint::save(&dir.join(FINAL_CHECKPOINT), &model.store, Some(&opt))?;
            }
            write_log(&dir.join(TRAIN_LOG), &log)?;
        }
    }
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        log,
        step_losses,
    })
}

fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    fs::write(path, format_train_log(log)).map_err(|e| Error::io(path, e))
}
