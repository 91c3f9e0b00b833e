use std::collections::HashMap;

use super::Scene;
use crate::autodiff::Matrix;
use crate::error::{Error, Result};

pub(crate) fn cell_key(p: &[f64], size: f64) -> [i64; 3] {
    [
        (p[0] / size).floor() as i64,
        (p[1] / size).floor() as i64,
        (p[2] / size).floor() as i64,
    ]
}

/// Groups point indices by grid cell. Groups are ordered by the first point
/// that lands in them; members keep input order.
pub(crate) fn group_by_cell(positions: &Matrix, size: f64) -> Vec<Vec<usize>> {
    let mut slot: HashMap<[i64; 3], usize> = HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in 0..positions.rows() {
        let key = cell_key(positions.row(i), size);
        let g = *slot.entry(key).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    groups
}

/// Majority label, ties toward the smaller id.
fn majority(ids: impl Iterator<Item = i32>) -> i32 {
    let mut counts: Vec<(i32, usize)> = Vec::new();
    for id in ids {
        match counts.iter_mut().find(|(k, _)| *k == id) {
            Some((_, c)) => *c += 1,
            None => counts.push((id, 1)),
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(id, _)| id)
        .expect("non-empty group")
}

/// One point per occupied voxel of edge `voxel_size`.
///
/// Position and color are member means, the normal is the renormalized
/// mean normal, and the instance id is the majority vote (ties go to the
/// smaller id). A voxel holding one point copies that point unchanged.
pub fn voxelize(scene: &Scene, voxel_size: f64) -> Result<Scene> {
    if voxel_size.is_nan() || voxel_size <= 0.0 {
        return Err(Error::Argument(format!("voxel_size must be > 0, got {voxel_size}")));
    }
    let groups = group_by_cell(&scene.positions, voxel_size);
    let m = groups.len();
    let mut pos = Matrix::zeros(m, 3);
    let mut col = Matrix::zeros(m, 3);
    let mut nrm = Matrix::zeros(m, 3);
    let mut ids = Vec::with_capacity(m);
    for (g, members) in groups.iter().enumerate() {
        if let [only] = members[..] {
            pos.row_mut(g).copy_from_slice(scene.positions.row(only));
            col.row_mut(g).copy_from_slice(scene.colors.row(only));
            nrm.row_mut(g).copy_from_slice(scene.normals.row(only));
            ids.push(scene.point_instance_id[only]);
            continue;
        }
        let k = members.len() as f64;
        for (dst, src) in [
            (&mut pos, &scene.positions),
            (&mut col, &scene.colors),
            (&mut nrm, &scene.normals),
        ] {
            let row = dst.row_mut(g);
            for &i in members {
                for (o, v) in row.iter_mut().zip(src.row(i)) {
                    *o += v;
                }
            }
            for o in row.iter_mut() {
                *o /= k;
            }
        }
        let n = nrm.row_mut(g);
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        if len > 1e-12 {
            n.iter_mut().for_each(|v| *v /= len);
        } else {
            n.copy_from_slice(scene.normals.row(members[0]));
        }
        ids.push(majority(members.iter().map(|&i| scene.point_instance_id[i])));
    }
    Ok(Scene {
        positions: pos,
        colors: col,
        normals: nrm,
        point_instance_id: ids,
        instance_class: scene.instance_class.clone(),
        num_classes: scene.num_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn scene_from(points: &[[f64; 3]], ids: &[i32]) -> Scene {
        let n = points.len();
        let mut classes = BTreeMap::new();
        for &i in ids.iter().filter(|&&i| i >= 0) {
            classes.insert(i, 0);
        }
        Scene {
            positions: Matrix::from_rows(points),
            colors: Matrix::filled(n, 3, 0.5),
            normals: Matrix::from_rows(&vec![[0.0, 0.0, 1.0]; n]),
            point_instance_id: ids.to_vec(),
            instance_class: classes,
            num_classes: 1,
        }
    }

    #[test]
    fn singleton_is_unchanged() {
        let s = scene_from(&[[0.123, 4.5, -1.0]], &[-1]);
        assert_eq!(voxelize(&s, 0.02).unwrap(), s);
    }

    #[test]
    fn distinct_voxels_survive() {
        let s = scene_from(&[[0.0, 0.0, 0.0], [0.5, 0.0, 0.0]], &[0, 1]);
        assert_eq!(voxelize(&s, 0.02).unwrap().len(), 2);
    }

    #[test]
    fn majority_tie_goes_to_smaller_id() {
        let s = scene_from(
            &[[0.001, 0.0, 0.0], [0.002, 0.0, 0.0], [0.003, 0.0, 0.0], [0.004, 0.0, 0.0]],
            &[3, 1, 3, 1],
        );
        let v = voxelize(&s, 0.02).unwrap();
        assert_eq!(v.point_instance_id, vec![1]);
        assert_eq!(majority([2, -1, 2, -1].into_iter()), -1);
        assert_eq!(majority([2, 2, -1].into_iter()), 2);
    }

    #[test]
    fn rejects_non_positive_size() {
        let s = scene_from(&[[0.0; 3]], &[-1]);
        assert!(voxelize(&s, 0.0).is_err());
        assert!(voxelize(&s, f64::NAN).is_err());
    }
}
