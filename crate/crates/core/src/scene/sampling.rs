use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::util::dist3;

/// Farthest point sampling.
///
/// Starts at index `seed mod N`, then repeatedly picks the unselected point
/// whose minimum Euclidean distance to the selected set is largest (ties go
/// to the smallest index). Returns `min(S, N)` distinct indices.
pub fn fps(positions: &Matrix, count: usize, seed: u64) -> Vec<usize> {
    let n = positions.rows();
    if n == 0 || count == 0 {
        return Vec::new();
    }
    let count = count.min(n);
    let mut selected = Vec::with_capacity(count);
    let mut taken = vec![false; n];
    let mut min_dist = vec![f64::INFINITY; n];
    let mut current = (seed % n as u64) as usize;
    loop {
        selected.push(current);
        taken[current] = true;
        if selected.len() == count {
            break;
        }
        let c = positions.row(current);
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let d = dist3(positions.row(i), c);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
            if min_dist[i] > best_d {
                best_d = min_dist[i];
                best = i;
            }
        }
        current = best;
    }
    selected
}

/// K nearest references per query, ascending by distance.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighbors {
    /// S×K distances in meters.
    pub dis: Matrix,
    /// S×K reference indices, row-major.
    pub idx: Vec<usize>,
    pub k: usize,
}

impl Neighbors {
    pub fn idx_row(&self, i: usize) -> &[usize] {
        &self.idx[i * self.k..(i + 1) * self.k]
    }
}

/// Brute-force K nearest neighbours; ties go to the smaller reference index.
pub fn knn(queries: &Matrix, refs: &Matrix, k: usize) -> Result<Neighbors> {
    let l = refs.rows();
    if k == 0 || k > l {
        return Err(Error::Argument(format!(
            "knn needs 1 <= K <= L, got K={k}, L={l}"
        )));
    }
    if queries.cols() != 3 || refs.cols() != 3 {
        return Err(Error::shape(
            "knn",
            format!("queries {}x{}, refs {}x{}", queries.rows(), queries.cols(), l, refs.cols()),
        ));
    }
    let s = queries.rows();
    let mut dis = Matrix::zeros(s, k);
    let mut idx = Vec::with_capacity(s * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(l);
    for i in 0..s {
        cand.clear();
        let q = queries.row(i);
        cand.extend((0..l).map(|j| (dist3(q, refs.row(j)), j)));
        let by = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < l {
            cand.select_nth_unstable_by(k - 1, by);
        }
        cand[..k].sort_unstable_by(by);
        for (j, &(d, r)) in cand[..k].iter().enumerate() {
            dis.set(i, j, d);
            idx.push(r);
        }
    }
    Ok(Neighbors { dis, idx, k })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fps_single_point() {
        assert_eq!(fps(&Matrix::from_rows(&[[1.0, 2.0, 3.0]]), 1, 0), vec![0]);
    }

    #[test]
    fn fps_collinear_maximin() {
        let p = Matrix::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        assert_eq!(fps(&p, 2, 0), vec![0, 2]);
        assert_eq!(fps(&p, 2, 3), vec![0, 2]);
    }

    #[test]
    fn fps_truncates_and_never_repeats() {
        let p = Matrix::from_rows(&[[0.0; 3], [0.0; 3], [0.0; 3]]);
        assert_eq!(fps(&p, 10, 1), vec![1, 0, 2]);
    }

    #[test]
    fn knn_examples() {
        let refs = Matrix::from_rows(&[[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]]);
        let q = Matrix::from_rows(&[[1.0, 0.0, 0.0], [10.0, 0.0, 0.0]]);
        let nb = knn(&q, &refs, 2).unwrap();
        assert_eq!(nb.dis.row(0), &[1.0, 9.0]);
        assert_eq!(nb.idx_row(0), &[0, 1]);
        assert_eq!(nb.dis.get(1, 0), 0.0);
        assert_eq!(nb.idx_row(1)[0], 1);
    }

    #[test]
    fn knn_rejects_k_above_l() {
        let refs = Matrix::zeros(2, 3);
        assert!(knn(&Matrix::zeros(1, 3), &refs, 3).is_err());
        assert!(knn(&Matrix::zeros(1, 3), &refs, 0).is_err());
    }

    #[test]
    fn knn_ties_prefer_smaller_index() {
        let refs = Matrix::from_rows(&[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let nb = knn(&Matrix::zeros(1, 3), &refs, 2).unwrap();
        assert_eq!(nb.idx_row(0), &[0, 1]);
    }
}
