//! Text checkpoints.
//!
//! Each tensor is a block of three parts: its name on one line, then
//! `rank d1 … dk`, then the row-major values (one row per line, 17
//! significant digits so every `f64` round-trips exactly). Optimizer
//! state is stored with the same block layout under reserved names.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Adam, Matrix, ParamStore};
use crate::error::{Error, Result};

const ADAM_STEP: &str = "__adam.step";
const ADAM_M: &str = "__adam.m.";
const ADAM_V: &str = "__adam.v.";

fn write_block(out: &mut String, name: &str, shape: &[usize], values: &Matrix) {
    out.push_str(name);
    out.push('\n');
    let _ = write!(out, "{}", shape.len());
    for d in shape {
        let _ = write!(out, " {d}");
    }
    out.push('\n');
    for r in 0..values.rows() {
        let row = values.row(r);
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{v:.16e}");
        }
        out.push('\n');
    }
}

pub fn to_string(store: &ParamStore, opt: Option<&Adam>) -> String {
    let mut out = String::new();
    for (_, p) in store.iter() {
        write_block(&mut out, &p.name, &p.shape, &p.value);
    }
    if let Some(opt) = opt {
        write_block(&mut out, ADAM_STEP, &[], &Matrix::scalar(opt.step as f64));
        for ((_, p), (m, v)) in store.iter().zip(opt.m.iter().zip(&opt.v)) {
            write_block(&mut out, &format!("{ADAM_M}{}", p.name), &p.shape, m);
            write_block(&mut out, &format!("{ADAM_V}{}", p.name), &p.shape, v);
        }
    }
    out
}

pub fn save(path: &Path, store: &ParamStore, opt: Option<&Adam>) -> Result<()> {
    fs::write(path, to_string(store, opt)).map_err(|e| Error::io(path, e))
}

struct Block {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

fn parse_blocks(text: &str, origin: &str) -> Result<Vec<Block>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).peekable();
    let mut blocks = Vec::new();
    while let Some((ln, name)) = lines.next() {
        let name = name.trim();
        if name.is_empty() {
            continue;
        }
        let (sl, shape_line) = lines
            .next()
            .ok_or_else(|| err(ln, format!("block {name:?} has no shape line")))?;
        let mut toks = shape_line.split_whitespace();
        let rank: usize = toks
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| err(sl, "expected rank".into()))?;
        let shape: Vec<usize> = toks
            .map(|t| t.parse().map_err(|_| err(sl, format!("bad dimension {t:?}"))))
            .collect::<Result<_>>()?;
        if shape.len() != rank {
            return Err(err(sl, format!("rank {rank} but {} dimensions", shape.len())));
        }
        let count: usize = shape.iter().product();
        let mut values = Vec::with_capacity(count);
        while values.len() < count {
            let (vl, line) = lines
                .next()
                .ok_or_else(|| err(sl, format!("block {name:?} truncated")))?;
            for t in line.split_whitespace() {
                values.push(
                    t.parse::<f64>()
                        .map_err(|_| err(vl, format!("bad value {t:?}")))?,
                );
            }
            if values.len() > count {
                return Err(err(vl, format!("block {name:?} has too many values")));
            }
        }
        blocks.push(Block {
            name: name.to_string(),
            shape,
            values,
        });
    }
    Ok(blocks)
}

/// Overwrites the values of every parameter in `store` from `text`. Every
/// parameter must be present with a matching shape. Returns the restored
/// optimizer when the checkpoint carries one.
pub fn load_into(text: &str, origin: &str, store: &mut ParamStore) -> Result<Option<Adam>> {
    let blocks = parse_blocks(text, origin)?;
    let find = |name: &str| blocks.iter().find(|b| b.name == name);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for &id in &ids {
        let p = store.get(id);
        let b = find(&p.name).ok_or_else(|| {
            Error::Argument(format!("{origin}: checkpoint lacks parameter {:?}", p.name))
        })?;
        if b.shape != p.shape {
            return Err(Error::Argument(format!(
                "{origin}: parameter {:?} has shape {:?} in checkpoint, model expects {:?}",
                p.name, b.shape, p.shape
            )));
        }
        let (r, c) = (p.value.rows(), p.value.cols());
        store.get_mut(id).value = Matrix::from_vec(r, c, b.values.clone());
    }
    for b in &blocks {
        if !b.name.starts_with("__") && store.id(&b.name).is_none() {
            return Err(Error::Argument(format!(
                "{origin}: checkpoint has unknown parameter {:?}",
                b.name
            )));
        }
    }
    let Some(step) = find(ADAM_STEP) else {
        return Ok(None);
    };
    let mut opt = Adam::new(store);
    opt.step = step.values[0] as u64;
    for (k, &id) in ids.iter().enumerate() {
        let p = store.get(id);
        let (r, c) = (p.value.rows(), p.value.cols());
        for (prefix, slot) in [(ADAM_M, &mut opt.m[k]), (ADAM_V, &mut opt.v[k])] {
            let name = format!("{prefix}{}", p.name);
            let b = find(&name)
                .ok_or_else(|| Error::Argument(format!("{origin}: missing {name:?}")))?;
            if b.values.len() != r * c {
                return Err(Error::Argument(format!("{origin}: {name:?} has wrong size")));
            }
            *slot = Matrix::from_vec(r, c, b.values.clone());
        }
    }
    Ok(Some(opt))
}

pub fn load(path: &Path, store: &mut ParamStore) -> Result<Option<Adam>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    load_into(&text, &path.display().to_string(), store)
}
