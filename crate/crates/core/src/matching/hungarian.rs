//! Minimum-cost assignment between queries (rows) and ground truth
//! instances (columns).

use crate::autodiff::Matrix;
use crate::error::{Error, Result};

/// Matched `(query, gt)` pairs sorted by query index.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn empty() -> Self {
        Self {
            pairs: Vec::new(),
            total_cost: 0.0,
        }
    }

    /// Gt index matched to each query, if any.
    pub fn gt_for_queries(&self, num_queries: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_queries];
        for &(q, g) in &self.pairs {
            out[q] = Some(g);
        }
        out
    }
}

/// Optimal assignment of `rows ≤ cols` on the selected submatrix.
/// Returns, per selected row, the position of its column in `cols`.
fn solve_rows(cost: &Matrix, rows: &[usize], cols: &[usize]) -> Vec<usize> {
    let n = rows.len();
    let m = cols.len();
    debug_assert!(n <= m);
    let a = |i: usize, j: usize| cost.get(rows[i - 1], cols[j - 1]);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Minimum-cost injection of the smaller side of `rows × cols` into the
/// larger, as `(row, col)` pairs sorted by row.
fn solve(cost: &Matrix, rows: &[usize], cols: &[usize]) -> (Vec<(usize, usize)>, f64) {
    let mut pairs: Vec<(usize, usize)> = if rows.len() <= cols.len() {
        let sol = solve_rows(cost, rows, cols);
        rows.iter().zip(sol).map(|(&r, c)| (r, cols[c])).collect()
    } else {
        let t = cost.transpose();
        let sol = solve_rows(&t, cols, rows);
        cols.iter().zip(sol).map(|(&c, r)| (rows[r], c)).collect()
    };
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(r, c)| cost.get(r, c)).sum();
    (pairs, total)
}

fn tolerance(total: f64) -> f64 {
    1e-9 * total.abs().max(1.0)
}

/// Minimum-cost assignment injecting the smaller side into the larger.
///
/// When several assignments reach the minimum (within `1e-9` relative),
/// the one whose pair list, sorted by query index, is lexicographically
/// smallest is returned.
pub fn hungarian(cost: &Matrix) -> Result<Assignment> {
    if let Some(v) = cost.as_slice().iter().find(|v| !v.is_finite()) {
        return Err(Error::Argument(format!("cost matrix holds non-finite entry {v}")));
    }
    let (s, g) = cost.shape();
    if s == 0 || g == 0 {
        return Ok(Assignment::empty());
    }
    let rows: Vec<usize> = (0..s).collect();
    let cols: Vec<usize> = (0..g).collect();
    let (pairs, best) = solve(cost, &rows, &cols);
    if is_unique(cost, &pairs, best) {
        return Ok(Assignment {
            pairs,
            total_cost: best,
        });
    }
    let pairs = lexicographic(cost, best);
    let total_cost = pairs.iter().map(|&(r, c)| cost.get(r, c)).sum();
    Ok(Assignment { pairs, total_cost })
}

/// Whether every other full assignment costs strictly more. Any other
/// assignment of the same size drops at least one of `pairs`, so it
/// suffices to forbid each pair in turn.
fn is_unique(cost: &Matrix, pairs: &[(usize, usize)], best: f64) -> bool {
    let tol = tolerance(best);
    let (s, g) = cost.shape();
    let big = forbidden_cost(cost);
    pairs.iter().all(|&(r, c)| {
        let mut c2 = cost.clone();
        c2.set(r, c, big);
        let rows: Vec<usize> = (0..s).collect();
        let cols: Vec<usize> = (0..g).collect();
        let (p2, total) = solve(&c2, &rows, &cols);
        p2.contains(&(r, c)) || total > best + tol
    })
}

fn forbidden_cost(cost: &Matrix) -> f64 {
    let span = cost.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (span + 1.0) * 4.0 * (cost.rows() + cost.cols()) as f64
}

/// Fixes pairs one at a time in lexicographic order, keeping a candidate
/// only if the remaining subproblem can still reach the optimum.
fn lexicographic(cost: &Matrix, best: f64) -> Vec<(usize, usize)> {
    let (s, g) = cost.shape();
    let need = s.min(g);
    let tol = tolerance(best);
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(need);
    let mut used_cols = vec![false; g];
    let mut fixed_cost = 0.0;
    let mut next_row = 0;
    while pairs.len() < need {
        let remaining = need - pairs.len() - 1;
        let mut chosen = None;
        'search: for q in next_row..s {
            for gc in (0..g).filter(|&c| !used_cols[c]) {
                let rows: Vec<usize> = (q + 1..s).collect();
                let cols: Vec<usize> = (0..g).filter(|&c| !used_cols[c] && c != gc).collect();
                let rest = if remaining == 0 {
                    0.0
                } else if rows.len().min(cols.len()) < remaining {
                    continue;
                } else {
                    solve(cost, &rows, &cols).1
                };
                if fixed_cost + cost.get(q, gc) + rest <= best + tol {
                    chosen = Some((q, gc));
                    break 'search;
                }
            }
            if s <= g {
                // Every query must be matched, so `q` cannot be skipped.
                break;
            }
        }
        let (q, gc) = chosen.expect("optimal completion exists");
        fixed_cost += cost.get(q, gc);
        used_cols[gc] = true;
        next_row = q + 1;
        pairs.push((q, gc));
    }
    pairs
}
