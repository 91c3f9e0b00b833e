use super::voxel::group_by_cell;
use super::Scene;
use crate::autodiff::{Matrix, Tape, Var};
use crate::error::{Error, Result};

/// Assignment of every point to one of `M` superpoints.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperpointPartition {
    /// Superpoint id per point, in `[0, M)`.
    pub assignment: Vec<usize>,
    /// Member count per superpoint; all positive.
    pub sizes: Vec<usize>,
}

impl SuperpointPartition {
    pub fn from_assignment(assignment: Vec<usize>) -> Result<Self> {
        let m = assignment.iter().map(|&a| a + 1).max().unwrap_or(0);
        let mut sizes = vec![0; m];
        for &a in &assignment {
            sizes[a] += 1;
        }
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::Argument(format!("superpoint {empty} has no members")));
        }
        Ok(Self { assignment, sizes })
    }

    pub fn num_superpoints(&self) -> usize {
        self.sizes.len()
    }

    pub fn num_points(&self) -> usize {
        self.assignment.len()
    }

    /// Mean-pooling weight `1/size` for each point.
    pub fn mean_weights(&self) -> Vec<f64> {
        self.assignment
            .iter()
            .map(|&a| 1.0 / self.sizes[a] as f64)
            .collect()
    }

    /// Expands a per-superpoint boolean mask to points.
    pub fn broadcast_mask(&self, sup_mask: &[bool]) -> Vec<bool> {
        self.assignment.iter().map(|&a| sup_mask[a]).collect()
    }

    /// Member lists, one per superpoint.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_superpoints()];
        for (i, &a) in self.assignment.iter().enumerate() {
            out[a].push(i);
        }
        out
    }
}

/// Uniform-grid superpoints: points in the same cell of edge `grid_size`
/// share a superpoint. Ids follow first occurrence.
pub fn build_superpoints(scene: &Scene, grid_size: f64) -> Result<SuperpointPartition> {
    if grid_size.is_nan() || grid_size <= 0.0 {
        return Err(Error::Argument(format!("grid_size must be > 0, got {grid_size}")));
    }
    let groups = group_by_cell(&scene.positions, grid_size);
    let mut assignment = vec![0; scene.len()];
    let mut sizes = Vec::with_capacity(groups.len());
    for (g, members) in groups.iter().enumerate() {
        for &i in members {
            assignment[i] = g;
        }
        sizes.push(members.len());
    }
    Ok(SuperpointPartition { assignment, sizes })
}

/// Differentiable mean pooling of N×C point features to M×C superpoint
/// features. The gradient of each superpoint row splits evenly among its
/// members.
pub fn pool_features(tape: &mut Tape, features: Var, partition: &SuperpointPartition) -> Result<Var> {
    let (rows, _) = tape.shape(features);
    if rows != partition.num_points() {
        return Err(Error::shape(
            "pool_features",
            format!("{rows} feature rows for {} points", partition.num_points()),
        ));
    }
    tape.scatter_weighted_sum(
        features,
        &partition.assignment,
        &partition.mean_weights(),
        partition.num_superpoints(),
    )
}

/// Mean pooling of plain values (no tape).
pub fn pool_values(values: &Matrix, partition: &SuperpointPartition) -> Result<Matrix> {
    if values.rows() != partition.num_points() {
        return Err(Error::shape(
            "pool_values",
            format!("{} rows for {} points", values.rows(), partition.num_points()),
        ));
    }
    let mut out = Matrix::zeros(partition.num_superpoints(), values.cols());
    for (i, &a) in partition.assignment.iter().enumerate() {
        for (o, v) in out.row_mut(a).iter_mut().zip(values.row(i)) {
            *o += v;
        }
    }
    for (a, &s) in partition.sizes.iter().enumerate() {
        for o in out.row_mut(a) {
            *o /= s as f64;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_of_two_members() {
        let part = SuperpointPartition::from_assignment(vec![0, 0]).unwrap();
        let mut tape = Tape::new();
        let f = tape.constant(Matrix::from_rows(&[[1.0, 3.0], [3.0, 1.0]]));
        let p = pool_features(&mut tape, f, &part).unwrap();
        assert_eq!(tape.value(p), &Matrix::from_rows(&[[2.0, 2.0]]));
    }

    #[test]
    fn singleton_pooling_is_identity() {
        let part = SuperpointPartition::from_assignment(vec![0, 1, 2]).unwrap();
        let x = Matrix::from_rows(&[[1.5, -2.0], [0.25, 7.0], [3.0, 3.0]]);
        let mut tape = Tape::new();
        let f = tape.constant(x.clone());
        let p = pool_features(&mut tape, f, &part).unwrap();
        assert_eq!(tape.value(p), &x);
        assert_eq!(pool_values(&x, &part).unwrap(), x);
    }

    #[test]
    fn row_count_checked() {
        let part = SuperpointPartition::from_assignment(vec![0, 0]).unwrap();
        let mut tape = Tape::new();
        let f = tape.constant(Matrix::zeros(3, 2));
        assert!(pool_features(&mut tape, f, &part).is_err());
    }

    #[test]
    fn gaps_in_assignment_rejected() {
        assert!(SuperpointPartition::from_assignment(vec![0, 2]).is_err());
    }
}
