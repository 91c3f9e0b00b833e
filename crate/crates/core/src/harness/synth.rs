//! Synthetic rooms with boxes, spheres and thin panels on a floor.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::KeyValues;
use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::scene::{quantize, save_scene, Scene, BACKGROUND};

/// Shape families; together with two size buckets they define the classes.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Shape {
    Box,
    Sphere,
    Panel,
}

/// Class `c` is shape `c / 2` at size bucket `c % 2` (0 small, 1 large).
pub fn class_shape(class: usize) -> (Shape, bool) {
    let shape = match class / 2 {
        0 => Shape::Box,
        1 => Shape::Sphere,
        _ => Shape::Panel,
    };
    (shape, class % 2 == 1)
}

pub const MAX_CLASSES: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub scenes: usize,
    pub instances_min: usize,
    pub instances_max: usize,
    pub points_min: usize,
    pub points_max: usize,
    /// Background points as a fraction of all instance points.
    pub clutter_fraction: f64,
    pub num_classes: usize,
    /// Side of the square room, meters.
    pub extent: f64,
    /// Points are snapped to the centers of this grid, one per cell.
    pub grid: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            scenes: 50,
            instances_min: 3,
            instances_max: 5,
            points_min: 300,
            points_max: 800,
            clutter_fraction: 0.4,
            num_classes: MAX_CLASSES,
            extent: 2.0,
            grid: 0.02,
        }
    }
}

impl SyntheticSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text, origin)?;
        let d = Self::default();
        let s = Self {
            scenes: kv.take("scenes", d.scenes)?,
            instances_min: kv.take("instances_min", d.instances_min)?,
            instances_max: kv.take("instances_max", d.instances_max)?,
            points_min: kv.take("points_min", d.points_min)?,
            points_max: kv.take("points_max", d.points_max)?,
            clutter_fraction: kv.take("clutter_fraction", d.clutter_fraction)?,
            num_classes: kv.take("num_classes", d.num_classes)?,
            extent: kv.take("extent", d.extent)?,
            grid: kv.take("grid", d.grid)?,
        };
        kv.check("scenes", s.scenes >= 1, ">= 1")?;
        kv.check("instances_min", s.instances_min >= 1, ">= 1")?;
        kv.check("instances_max", s.instances_max >= s.instances_min, ">= instances_min")?;
        kv.check("points_min", s.points_min >= 1, ">= 1")?;
        kv.check("points_max", s.points_max >= s.points_min, ">= points_min")?;
        kv.check(
            "clutter_fraction",
            (0.0..=4.0).contains(&s.clutter_fraction),
            "in [0, 4]",
        )?;
        kv.check(
            "num_classes",
            (1..=MAX_CLASSES).contains(&s.num_classes),
            "in [1, 6]",
        )?;
        kv.check("extent", s.extent.is_finite() && s.extent >= 1.0, ">= 1")?;
        kv.check("grid", s.grid.is_finite() && s.grid > 0.0 && s.grid <= 0.1, "in (0, 0.1]")?;
        kv.finish()?;
        Ok(s)
    }
}

struct Placed {
    class: usize,
    /// Center of the footprint on the floor.
    cx: f64,
    cy: f64,
    /// Half extents of the axis-aligned footprint.
    hx: f64,
    hy: f64,
}

/// Dims of an instance: box `(sx, sy, sz)`, sphere `(r, r, r)`, panel
/// `(width, thickness, height)` with the width along x or y.
fn sample_dims<R: Rng>(rng: &mut R, class: usize) -> [f64; 3] {
    let (shape, large) = class_shape(class);
    match (shape, large) {
        (Shape::Box, false) => [rng.gen_range(0.2..0.3), rng.gen_range(0.2..0.3), rng.gen_range(0.15..0.3)],
        (Shape::Box, true) => [rng.gen_range(0.45..0.6), rng.gen_range(0.45..0.6), rng.gen_range(0.35..0.5)],
        (Shape::Sphere, false) => {
            let r = rng.gen_range(0.1..0.14);
            [r; 3]
        }
        (Shape::Sphere, true) => {
            let r = rng.gen_range(0.22..0.28);
            [r; 3]
        }
        (Shape::Panel, false) => [rng.gen_range(0.3..0.4), 0.04, rng.gen_range(0.3..0.4)],
        (Shape::Panel, true) => [rng.gen_range(0.65..0.8), 0.04, rng.gen_range(0.6..0.75)],
    }
}

/// Surface sample with outward normal.
type SurfacePoint = ([f64; 3], [f64; 3]);

fn sample_box<R: Rng>(rng: &mut R, c: [f64; 3], half: [f64; 3]) -> SurfacePoint {
    // Five faces (no bottom), chosen by area.
    let areas = [
        half[1] * half[2], // ±x
        half[1] * half[2],
        half[0] * half[2], // ±y
        half[0] * half[2],
        half[0] * half[1], // +z
    ];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.gen_range(0.0..total);
    let mut face = 4;
    for (i, a) in areas.iter().enumerate() {
        if pick < *a {
            face = i;
            break;
        }
        pick -= a;
    }
    let mut u: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
    let (axis, sign) = match face {
        0 => (0, 1.0),
        1 => (0, -1.0),
        2 => (1, 1.0),
        3 => (1, -1.0),
        _ => (2, 1.0),
    };
    u[axis] = sign;
    let p = [c[0] + u[0] * half[0], c[1] + u[1] * half[1], c[2] + u[2] * half[2]];
    let mut n = [0.0; 3];
    n[axis] = sign;
    (p, n)
}

fn sample_sphere<R: Rng>(rng: &mut R, c: [f64; 3], r: f64) -> SurfacePoint {
    // Uniform on the upper ~90% of the sphere; the bottom cap touches the floor.
    loop {
        let z: f64 = rng.gen_range(-1.0..1.0);
        if z < -0.8 {
            continue;
        }
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        let s = (1.0 - z * z).sqrt();
        let n = [s * phi.cos(), s * phi.sin(), z];
        return ([c[0] + r * n[0], c[1] + r * n[1], c[2] + r * n[2]], n);
    }
}

/// Snaps a coordinate to the center of its grid cell.
fn snap(v: f64, grid: f64) -> f64 {
    quantize(((v / grid).floor() + 0.5) * grid)
}

fn cell(p: &[f64; 3], grid: f64) -> (i64, i64, i64) {
    (
        (p[0] / grid).floor() as i64,
        (p[1] / grid).floor() as i64,
        (p[2] / grid).floor() as i64,
    )
}

fn unit(n: [f64; 3]) -> [f64; 3] {
    let l = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    [quantize(n[0] / l), quantize(n[1] / l), quantize(n[2] / l)]
}

fn color<R: Rng>(rng: &mut R, base: [f64; 3], jitter: f64) -> [f64; 3] {
    base.map(|b| quantize((b + rng.gen_range(-jitter..=jitter)).clamp(0.0, 1.0)))
}

struct Builder {
    grid: f64,
    occupied: HashSet<(i64, i64, i64)>,
    pos: Vec<f64>,
    col: Vec<f64>,
    nrm: Vec<f64>,
    ids: Vec<i32>,
}

impl Builder {
    /// Adds a point unless its grid cell is taken. Returns whether it was added.
    fn push(&mut self, p: [f64; 3], c: [f64; 3], n: [f64; 3], id: i32) -> bool {
        let s = p.map(|v| snap(v, self.grid));
        if !self.occupied.insert(cell(&s, self.grid)) {
            return false;
        }
        self.pos.extend_from_slice(&s);
        self.col.extend_from_slice(&c);
        self.nrm.extend_from_slice(&unit(n));
        self.ids.push(id);
        true
    }
}

/// A shuffled deck holding every class equally often, dealt in order.
struct ClassDeck {
    cards: Vec<usize>,
    num_classes: usize,
}

impl ClassDeck {
    fn deal<R: Rng>(&mut self, rng: &mut R) -> usize {
        if self.cards.is_empty() {
            self.cards = (0..self.num_classes).collect();
            self.cards.shuffle(rng);
        }
        self.cards.pop().expect("refilled above")
    }
}

fn generate_scene<R: Rng>(spec: &SyntheticSpec, deck: &mut ClassDeck, rng: &mut R) -> Scene {
    let e = spec.extent;
    let margin = 0.1;
    let gap = 0.12;
    let count = rng.gen_range(spec.instances_min..=spec.instances_max);
    let mut placed: Vec<(Placed, [f64; 3])> = Vec::new();
    for _ in 0..count {
        let class = deck.deal(rng);
        let dims = sample_dims(rng, class);
        let (shape, _) = class_shape(class);
        let along_y = shape == Shape::Panel && rng.gen_bool(0.5);
        let (hx, hy) = match shape {
            Shape::Box => (dims[0] / 2.0, dims[1] / 2.0),
            Shape::Sphere => (dims[0], dims[0]),
            Shape::Panel if along_y => (dims[1] / 2.0, dims[0] / 2.0),
            Shape::Panel => (dims[0] / 2.0, dims[1] / 2.0),
        };
        for _ in 0..200 {
            let cx = rng.gen_range(margin + hx..e - margin - hx);
            let cy = rng.gen_range(margin + hy..e - margin - hy);
            let clear = placed.iter().all(|(o, _)| {
                (cx - o.cx).abs() >= hx + o.hx + gap || (cy - o.cy).abs() >= hy + o.hy + gap
            });
            if clear {
                placed.push((Placed { class, cx, cy, hx, hy }, dims));
                break;
            }
        }
    }

    let mut b = Builder {
        grid: spec.grid,
        occupied: HashSet::new(),
        pos: Vec::new(),
        col: Vec::new(),
        nrm: Vec::new(),
        ids: Vec::new(),
    };
    let mut instance_class = BTreeMap::new();
    let mut instance_points = 0usize;
    for (id, (p, dims)) in placed.iter().enumerate() {
        let id = id as i32;
        instance_class.insert(id, p.class);
        let base = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
        let target = rng.gen_range(spec.points_min..=spec.points_max);
        let (shape, _) = class_shape(p.class);
        let mut added = 0;
        let mut attempts = 0;
        while added < target && attempts < target * 20 {
            attempts += 1;
            let (pt, n) = match shape {
                Shape::Box => sample_box(rng, [p.cx, p.cy, dims[2] / 2.0], [p.hx, p.hy, dims[2] / 2.0]),
                Shape::Panel => {
                    let h = dims[2] / 2.0;
                    // Raised slightly so the panel is a free-standing plate.
                    let zc = h + 0.1;
                    sample_box(rng, [p.cx, p.cy, zc], [p.hx, p.hy, h])
                }
                Shape::Sphere => sample_sphere(rng, [p.cx, p.cy, dims[0]], dims[0]),
            };
            if pt[2] < spec.grid {
                continue;
            }
            let c = color(rng, base, 0.03);
            if b.push(pt, c, n, id) {
                added += 1;
            }
        }
        instance_points += added;
    }

    // Floor outside the footprints, plus a few scattered specks.
    let background = (instance_points as f64 * spec.clutter_fraction).round() as usize;
    let floor_base = [0.45, 0.45, 0.42];
    let mut added = 0;
    let mut attempts = 0;
    while added < background && attempts < background * 20 + 100 {
        attempts += 1;
        let speck = rng.gen_bool(0.1);
        let pt = if speck {
            [rng.gen_range(0.0..e), rng.gen_range(0.0..e), rng.gen_range(spec.grid..0.25)]
        } else {
            [rng.gen_range(0.0..e), rng.gen_range(0.0..e), 0.0]
        };
        let under = placed
            .iter()
            .any(|(o, _)| (pt[0] - o.cx).abs() < o.hx + 0.04 && (pt[1] - o.cy).abs() < o.hy + 0.04);
        if under {
            continue;
        }
        let (c, n) = if speck {
            let c = [rng.gen(), rng.gen(), rng.gen()].map(|v: f64| quantize(v));
            let n = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 1.0];
            (c, n)
        } else {
            (color(rng, floor_base, 0.05), [0.0, 0.0, 1.0])
        };
        if b.push(pt, c, n, BACKGROUND) {
            added += 1;
        }
    }

    let n = b.ids.len();
    Scene {
        positions: Matrix::from_vec(n, 3, b.pos),
        colors: Matrix::from_vec(n, 3, b.col),
        normals: Matrix::from_vec(n, 3, b.nrm),
        point_instance_id: b.ids,
        instance_class,
        num_classes: spec.num_classes,
    }
}

/// Generates `spec.scenes` scenes from `seed`. Classes are dealt from a
/// shuffled deck that holds every class equally often, so class counts stay
/// balanced across the set.
pub fn generate_scenes(spec: &SyntheticSpec, seed: u64) -> Vec<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut deck = ClassDeck {
        cards: Vec::new(),
        num_classes: spec.num_classes,
    };
    (0..spec.scenes)
        .map(|_| generate_scene(spec, &mut deck, &mut rng))
        .collect()
}

pub fn scene_file_name(i: usize) -> String {
    format!("scene_{i:04}.txt")
}

/// Writes the generated scenes into `out` (created if missing) and returns
/// their paths. On failure, files written so far are removed.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    for (i, scene) in generate_scenes(spec, seed).iter().enumerate() {
        let path = out.join(scene_file_name(i));
        if let Err(e) = save_scene(&path, scene) {
            for p in &written {
                let _ = fs::remove_file(p);
            }
            return Err(e);
        }
        written.push(path);
    }
    Ok(written)
}
