//! `key = value` configuration files.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::ablate::AblationGrid;
use crate::agent_init::InitMode;
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::matching::LossWeights;

/// Parsed `key = value` pairs with their line numbers.
#[derive(Debug)]
pub(crate) struct KeyValues {
    origin: String,
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    /// `#` starts a comment; blank lines are ignored; keys may not repeat.
    pub(crate) fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: origin.into(),
                    line: line_no,
                    msg: format!("expected `key = value`, got {line:?}"),
                });
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || v.is_empty() {
                return Err(Error::Parse {
                    path: origin.into(),
                    line: line_no,
                    msg: "empty key or value".into(),
                });
            }
            if entries.insert(k.to_string(), (line_no, v.to_string())).is_some() {
                return Err(Error::Parse {
                    path: origin.into(),
                    line: line_no,
                    msg: format!("duplicate key {k:?}"),
                });
            }
        }
        Ok(Self {
            origin: origin.into(),
            entries,
        })
    }

    fn err(&self, key: &str, msg: String) -> Error {
        let line = self.entries.get(key).map_or(0, |e| e.0);
        Error::Parse {
            path: self.origin.clone(),
            line,
            msg: format!("{key}: {msg}"),
        }
    }

    /// Parses and removes `key`, keeping `default` when absent.
    pub(crate) fn take<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(default),
            Some((_, v)) => {
                let parsed = v.parse::<T>().map_err(|e| self.err(key, format!("{e} ({v:?})")))?;
                self.entries.remove(key);
                Ok(parsed)
            }
        }
    }

    pub(crate) fn take_switch(&mut self, key: &str, default: bool) -> Result<bool> {
        let Some((_, v)) = self.entries.get(key) else {
            return Ok(default);
        };
        let b = parse_switch(v).map_err(|e| self.err(key, e))?;
        self.entries.remove(key);
        Ok(b)
    }

    /// Comma-separated list; every item goes through `item`.
    pub(crate) fn take_list<T>(
        &mut self,
        key: &str,
        default: Vec<T>,
        item: impl Fn(&str) -> std::result::Result<T, String>,
    ) -> Result<Vec<T>> {
        let Some((_, v)) = self.entries.get(key) else {
            return Ok(default);
        };
        let parsed = v
            .split(',')
            .map(|s| item(s.trim()))
            .collect::<std::result::Result<Vec<T>, String>>()
            .map_err(|e| self.err(key, e))?;
        if parsed.is_empty() {
            return Err(self.err(key, "list is empty".into()));
        }
        self.entries.remove(key);
        Ok(parsed)
    }

    pub(crate) fn check(&self, key: &str, ok: bool, what: &str) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(self.err(key, format!("must be {what}")))
        }
    }

    /// Fails on the first key nobody consumed.
    pub(crate) fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => Err(Error::Parse {
                path: self.origin,
                line,
                msg: format!("unknown key {k:?}"),
            }),
        }
    }
}

/// Everything a training, evaluation or ablation run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub decoder: DecoderConfig,
    /// Sampled queries `S`.
    pub samples: usize,
    /// Agents `L`.
    pub agents: usize,
    /// Neighbors per sample `K`.
    pub k: usize,
    pub loss: LossWeights,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub voxel_size: f64,
    pub grid_size: f64,
    pub nms_threshold: f64,
    pub score_floor: f64,
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub init_mode: InitMode,
    pub straight_through: bool,
    pub nms: bool,
    pub coe: bool,
    /// Randomly rotate and mirror each training scene at every step.
    pub augment: bool,
    /// Save a checkpoint every this many epochs; 0 saves only the last.
    pub checkpoint_every: usize,
    /// Seeds per ablation cell, starting at `seed`.
    pub ablation_seeds: usize,
    pub ablation: AblationGrid,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            decoder: DecoderConfig {
                num_layers: 4,
                d1: 4,
                d2: 2,
                ..DecoderConfig::default()
            },
            samples: 32,
            agents: 32,
            k: 3,
            loss: LossWeights::default(),
            epochs: 200,
            lr: 1e-3,
            seed: 0,
            voxel_size: 0.02,
            grid_size: 0.1,
            nms_threshold: 0.5,
            score_floor: 0.0,
            train_data: None,
            eval_data: None,
            init_mode: InitMode::Agent,
            straight_through: true,
            nms: true,
            coe: false,
            augment: true,
            checkpoint_every: 0,
            ablation_seeds: 1,
            ablation: AblationGrid::default(),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.train_data, &mut cfg.eval_data].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Parses config text; unknown keys and out-of-range values are errors.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text, origin)?;
        let d = Self::default();
        let dd = &d.decoder;
        let decoder = DecoderConfig {
            num_layers: kv.take("num_layers", dd.num_layers)?,
            heads: kv.take("heads", dd.heads)?,
            hidden_dim: kv.take("hidden_dim", dd.hidden_dim)?,
            ffn_dim: kv.take("ffn_dim", dd.ffn_dim)?,
            encoder_hidden: kv.take("encoder_hidden", dd.encoder_hidden)?,
            d1: kv.take("d1", dd.d1)?,
            d2: kv.take("d2", dd.d2)?,
            fusion: kv.take_switch("hqfd", dd.fusion)?,
            mask_bin_threshold: kv.take("mask_bin_threshold", dd.mask_bin_threshold)?,
            num_classes: kv.take("num_classes", dd.num_classes)?,
        };
        let w = d.loss.as_array();
        let mut lambdas = [0.0; 5];
        for (i, l) in lambdas.iter_mut().enumerate() {
            let key = format!("lambda{}", i + 1);
            *l = kv.take(&key, w[i])?;
            kv.check(&key, l.is_finite() && *l >= 0.0, "a finite value >= 0")?;
        }
        let cfg = Self {
            samples: kv.take("samples", d.samples)?,
            agents: kv.take("agents", d.agents)?,
            k: kv.take("k", d.k)?,
            loss: LossWeights::from_array(lambdas),
            epochs: kv.take("epochs", d.epochs)?,
            lr: kv.take("lr", d.lr)?,
            seed: kv.take("seed", d.seed)?,
            voxel_size: kv.take("voxel_size", d.voxel_size)?,
            grid_size: kv.take("grid_size", d.grid_size)?,
            nms_threshold: kv.take("nms_threshold", d.nms_threshold)?,
            score_floor: kv.take("score_floor", d.score_floor)?,
            train_data: kv.take("train_data", String::new()).map(non_empty)?,
            eval_data: kv.take("eval_data", String::new()).map(non_empty)?,
            init_mode: kv.take("init_mode", d.init_mode)?,
            straight_through: kv.take_switch("straight_through", d.straight_through)?,
            nms: kv.take_switch("nms", d.nms)?,
            coe: kv.take_switch("coe", d.coe)?,
            augment: kv.take_switch("augment", d.augment)?,
            checkpoint_every: kv.take("checkpoint_every", d.checkpoint_every)?,
            ablation_seeds: kv.take("ablation_seeds", d.ablation_seeds)?,
            ablation: AblationGrid {
                init_modes: kv.take_list("ablate_init_modes", d.ablation.init_modes, |s| {
                    s.parse().map_err(|e: Error| e.to_string())
                })?,
                hqfd: kv.take_list("ablate_hqfd", d.ablation.hqfd, parse_switch)?,
                nms: kv.take_list("ablate_nms", d.ablation.nms, parse_switch)?,
                coe: kv.take_switch("ablate_coe", d.ablation.coe)?,
            },
            decoder,
        };
        kv.check("samples", cfg.samples >= 1, ">= 1")?;
        kv.check("agents", cfg.agents >= 1, ">= 1")?;
        kv.check("k", cfg.k >= 1 && cfg.k <= cfg.agents, "in [1, agents]")?;
        kv.check("epochs", cfg.epochs >= 1, ">= 1")?;
        kv.check("lr", cfg.lr.is_finite() && cfg.lr > 0.0, "> 0")?;
        kv.check("voxel_size", cfg.voxel_size.is_finite() && cfg.voxel_size > 0.0, "> 0")?;
        kv.check("grid_size", cfg.grid_size.is_finite() && cfg.grid_size > 0.0, "> 0")?;
        kv.check(
            "nms_threshold",
            cfg.nms_threshold > 0.0 && cfg.nms_threshold <= 1.0,
            "in (0, 1]",
        )?;
        kv.check("score_floor", (0.0..=1.0).contains(&cfg.score_floor), "in [0, 1]")?;
        kv.check("ablation_seeds", cfg.ablation_seeds >= 1, ">= 1")?;
        kv.finish()?;
        cfg.decoder.validate()?;
        Ok(cfg)
    }

    /// Canonical text form; parsing it gives back the same config.
    pub fn to_text(&self) -> String {
        let d = &self.decoder;
        let sw = |b: bool| if b { "on" } else { "off" };
        let mut lines = vec![
            format!("num_layers = {}", d.num_layers),
            format!("heads = {}", d.heads),
            format!("hidden_dim = {}", d.hidden_dim),
            format!("ffn_dim = {}", d.ffn_dim),
            format!("encoder_hidden = {}", d.encoder_hidden),
            format!("d1 = {}", d.d1),
            format!("d2 = {}", d.d2),
            format!("hqfd = {}", sw(d.fusion)),
            format!("mask_bin_threshold = {}", d.mask_bin_threshold),
            format!("num_classes = {}", d.num_classes),
            format!("samples = {}", self.samples),
            format!("agents = {}", self.agents),
            format!("k = {}", self.k),
        ];
        for (i, l) in self.loss.as_array().iter().enumerate() {
            lines.push(format!("lambda{} = {l}", i + 1));
        }
        lines.extend([
            format!("epochs = {}", self.epochs),
            format!("lr = {}", self.lr),
            format!("seed = {}", self.seed),
            format!("voxel_size = {}", self.voxel_size),
            format!("grid_size = {}", self.grid_size),
            format!("nms_threshold = {}", self.nms_threshold),
            format!("score_floor = {}", self.score_floor),
            format!("init_mode = {}", self.init_mode),
            format!("straight_through = {}", sw(self.straight_through)),
            format!("nms = {}", sw(self.nms)),
            format!("coe = {}", sw(self.coe)),
            format!("augment = {}", sw(self.augment)),
            format!("checkpoint_every = {}", self.checkpoint_every),
            format!("ablation_seeds = {}", self.ablation_seeds),
            format!("ablate_init_modes = {}", join(&self.ablation.init_modes, |m| m.to_string())),
            format!("ablate_hqfd = {}", join(&self.ablation.hqfd, |b| sw(*b).to_string())),
            format!("ablate_nms = {}", join(&self.ablation.nms, |b| sw(*b).to_string())),
            format!("ablate_coe = {}", sw(self.ablation.coe)),
        ]);
        if let Some(p) = &self.train_data {
            lines.push(format!("train_data = {}", p.display()));
        }
        if let Some(p) = &self.eval_data {
            lines.push(format!("eval_data = {}", p.display()));
        }
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    pub fn train_data(&self) -> Result<&Path> {
        self.train_data
            .as_deref()
            .ok_or_else(|| Error::Config("train_data is not set".into()))
    }

    pub fn eval_data(&self) -> Result<&Path> {
        self.eval_data
            .as_deref()
            .ok_or_else(|| Error::Config("eval_data is not set".into()))
    }
}

fn parse_switch(s: &str) -> std::result::Result<bool, String> {
    match s {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(format!("expected on|off, got {s:?}")),
    }
}

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(",")
}

fn non_empty(s: String) -> Option<PathBuf> {
    (!s.is_empty()).then(|| PathBuf::from(s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let c = Config::parse("# desk\nsamples = 16 # trailing\nhqfd = off\n\n", "mem").unwrap();
        assert_eq!(c.samples, 16);
        assert!(!c.decoder.fusion);
        assert_eq!(c.decoder.num_layers, 4);
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let e = Config::parse("samples = 4\nbogus = 1\n", "mem").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
    }

    #[test]
    fn range_checks() {
        for bad in ["ablate_hqfd = on,maybe", "ablate_init_modes = agent,", "d2 = 4", "d2 = 0", "k = 40", "lr = -1", "nms_threshold = 0", "init_mode = x", "nms = maybe"] {
            assert!(Config::parse(bad, "mem").is_err(), "{bad}");
        }
    }

    #[test]
    fn text_round_trip() {
        let mut c = Config {
            lr: 3e-4,
            init_mode: InitMode::FpsZero,
            train_data: Some("data/train".into()),
            ..Config::default()
        };
        c.ablation.hqfd = vec![false];
        c.ablation.init_modes = vec![InitMode::Learnable, InitMode::Agent];
        assert_eq!(Config::parse(&c.to_text(), "mem").unwrap(), c);
    }
}
