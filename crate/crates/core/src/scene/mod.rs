//! Point-cloud scenes and the geometric preprocessing around them.

mod io;
mod sampling;
mod superpoint;
mod voxel;

use std::collections::BTreeMap;

pub use io::{format_scene, load_scene, parse_scene, quantize, save_scene};
pub use sampling::{fps, knn, Neighbors};
pub use superpoint::{build_superpoints, pool_features, pool_values, SuperpointPartition};
pub use voxel::voxelize;

use crate::autodiff::Matrix;
use crate::error::{Error, Result};

/// Instance id marking background points.
pub const BACKGROUND: i32 = -1;

/// A labelled point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// N×3, meters.
    pub positions: Matrix,
    /// N×3 in [0, 1].
    pub colors: Matrix,
    /// N×3 unit vectors.
    pub normals: Matrix,
    /// Per point instance id, [`BACKGROUND`] for unlabelled points.
    pub point_instance_id: Vec<i32>,
    /// Class of every instance id that occurs (or may occur) in the scene.
    pub instance_class: BTreeMap<i32, usize>,
    pub num_classes: usize,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.point_instance_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.point_instance_id.is_empty()
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::Argument("scene has no points".into()));
        }
        for (name, m) in [
            ("positions", &self.positions),
            ("colors", &self.colors),
            ("normals", &self.normals),
        ] {
            if m.shape() != (n, 3) {
                return Err(Error::shape(
                    "scene",
                    format!("{name} is {}x{}, expected {n}x3", m.rows(), m.cols()),
                ));
            }
            if !m.all_finite() {
                return Err(Error::NonFinite(format!("scene {name}")));
            }
        }
        for (&id, &cls) in &self.instance_class {
            if id < 0 {
                return Err(Error::Argument(format!("negative instance id {id} in class table")));
            }
            if cls >= self.num_classes {
                return Err(Error::Argument(format!(
                    "instance {id} has class {cls}, only {} classes",
                    self.num_classes
                )));
            }
        }
        for (i, &id) in self.point_instance_id.iter().enumerate() {
            if id < BACKGROUND {
                return Err(Error::Argument(format!("point {i}: instance id {id}")));
            }
            if id >= 0 && !self.instance_class.contains_key(&id) {
                return Err(Error::Argument(format!(
                    "point {i}: instance {id} has no class entry"
                )));
            }
            let nrm = self.normals.row(i);
            let len = (nrm[0] * nrm[0] + nrm[1] * nrm[1] + nrm[2] * nrm[2]).sqrt();
            if (len - 1.0).abs() > 1e-6 {
                return Err(Error::Argument(format!("point {i}: normal length {len}")));
            }
            if self.colors.row(i).iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::Argument(format!("point {i}: color outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Componentwise minimum and maximum of the positions.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        bounds(&self.positions)
    }

    /// Instance ids present on at least one point, ascending.
    pub fn present_instances(&self) -> Vec<i32> {
        let mut ids: Vec<i32> = self
            .point_instance_id
            .iter()
            .copied()
            .filter(|&i| i >= 0)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Per-point input features `[x y z r g b nx ny nz]`.
    pub fn point_features(&self) -> Matrix {
        let n = self.len();
        let mut out = Matrix::zeros(n, 9);
        for i in 0..n {
            let row = out.row_mut(i);
            row[0..3].copy_from_slice(self.positions.row(i));
            row[3..6].copy_from_slice(self.colors.row(i));
            row[6..9].copy_from_slice(self.normals.row(i));
        }
        out
    }
}

pub fn bounds(positions: &Matrix) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for r in 0..positions.rows() {
        for (a, &v) in positions.row(r).iter().enumerate() {
            lo[a] = lo[a].min(v);
            hi[a] = hi[a].max(v);
        }
    }
    (lo, hi)
}
