//! Line-oriented scene files.
//!
//! ```text
//! N I C_cls
//! instance_id class_id          (I lines)
//! x y z r g b nx ny nz instance_id  (N lines)
//! ```
//!
//! Reals are written as plain decimals rounded to 9 significant digits, so
//! a scene that has been through [`quantize`] survives save/load bitwise.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::Scene;
use crate::autodiff::Matrix;
use crate::error::{Error, Result};

/// Rounds to 9 significant digits.
pub fn quantize(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.8e}").parse().expect("formatted float parses")
}

fn push_real(out: &mut String, v: f64) {
    let q = quantize(v);
    // Display never uses exponent notation and prints the shortest string
    // that parses back to the same value.
    let _ = write!(out, "{q}");
}

pub fn format_scene(scene: &Scene) -> String {
    let n = scene.len();
    let mut out = String::with_capacity(n * 96);
    let _ = writeln!(
        out,
        "{} {} {}",
        n,
        scene.instance_class.len(),
        scene.num_classes
    );
    for (id, cls) in &scene.instance_class {
        let _ = writeln!(out, "{id} {cls}");
    }
    for i in 0..n {
        for m in [&scene.positions, &scene.colors, &scene.normals] {
            for &v in m.row(i) {
                push_real(&mut out, v);
                out.push(' ');
            }
        }
        let _ = writeln!(out, "{}", scene.point_instance_id[i]);
    }
    out
}

pub fn save_scene(path: &Path, scene: &Scene) -> Result<()> {
    fs::write(path, format_scene(scene)).map_err(|e| Error::io(path, e))
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scene(&text, &path.display().to_string())
}

/// Parses scene text. `origin` names the source in error messages.
pub fn parse_scene(text: &str, origin: &str) -> Result<Scene> {
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_string(),
        line,
        msg,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());

    let (hl, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let head: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| err(hl, format!("bad header field {t:?}"))))
        .collect::<Result<_>>()?;
    let [n, num_inst, num_classes] = head[..] else {
        return Err(err(hl, format!("header needs 3 fields, got {}", head.len())));
    };
    if n == 0 {
        return Err(err(hl, "scene must have at least one point".into()));
    }

    let mut instance_class = BTreeMap::new();
    for _ in 0..num_inst {
        let (ln, line) = lines
            .next()
            .ok_or_else(|| err(hl, format!("expected {num_inst} instance lines")))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        let [id, cls] = toks[..] else {
            return Err(err(ln, "instance line needs `instance_id class_id`".into()));
        };
        let id: i32 = id.parse().map_err(|_| err(ln, format!("bad instance id {id:?}")))?;
        let cls: usize = cls.parse().map_err(|_| err(ln, format!("bad class id {cls:?}")))?;
        if id < 0 {
            return Err(err(ln, format!("instance id {id} must be non-negative")));
        }
        if cls >= num_classes {
            return Err(err(ln, format!("class id {cls} out of range [0, {num_classes})")));
        }
        if instance_class.insert(id, cls).is_some() {
            return Err(err(ln, format!("duplicate instance id {id}")));
        }
    }

    let mut pos = Vec::with_capacity(n * 3);
    let mut col = Vec::with_capacity(n * 3);
    let mut nrm = Vec::with_capacity(n * 3);
    let mut ids = Vec::with_capacity(n);
    for k in 0..n {
        let (ln, line) = lines
            .next()
            .ok_or_else(|| err(hl, format!("expected {n} points, found {k}")))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 10 {
            return Err(err(ln, format!("point line needs 10 fields, got {}", toks.len())));
        }
        let mut vals = [0.0f64; 9];
        for (v, t) in vals.iter_mut().zip(&toks[..9]) {
            *v = t.parse().map_err(|_| err(ln, format!("bad number {t:?}")))?;
            if !v.is_finite() {
                return Err(err(ln, format!("non-finite value {t:?}")));
            }
        }
        let id: i32 = toks[9]
            .parse()
            .map_err(|_| err(ln, format!("bad instance id {:?}", toks[9])))?;
        if id < -1 {
            return Err(err(ln, format!("instance id {id} (background is -1)")));
        }
        if id >= 0 && !instance_class.contains_key(&id) {
            return Err(err(ln, format!("instance {id} has no class entry")));
        }
        if vals[3..6].iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(err(ln, "color outside [0, 1]".into()));
        }
        let len = (vals[6] * vals[6] + vals[7] * vals[7] + vals[8] * vals[8]).sqrt();
        if (len - 1.0).abs() > 1e-6 {
            return Err(err(ln, format!("normal has length {len}")));
        }
        pos.extend_from_slice(&vals[0..3]);
        col.extend_from_slice(&vals[3..6]);
        nrm.extend_from_slice(&vals[6..9]);
        ids.push(id);
    }
    if let Some((ln, _)) = lines.next() {
        return Err(err(ln, format!("trailing content after {n} points")));
    }

    Ok(Scene {
        positions: Matrix::from_vec(n, 3, pos),
        colors: Matrix::from_vec(n, 3, col),
        normals: Matrix::from_vec(n, 3, nrm),
        point_instance_id: ids,
        instance_class,
        num_classes,
    })
}
