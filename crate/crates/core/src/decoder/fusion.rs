//! Mask overlap and query retention between consecutive decoder layers.

use crate::agent_init::QuerySet;
use crate::autodiff::{Matrix, Tape};
use crate::error::{Error, Result};

/// Binary masks over superpoints, one row per query.
pub type BinaryMasks = Vec<Vec<bool>>;

/// Thresholds sigmoid probabilities: `sigmoid(logit) >= threshold`.
pub fn binarize(mask_logits: &Matrix, threshold: f64) -> BinaryMasks {
    (0..mask_logits.rows())
        .map(|r| {
            mask_logits
                .row(r)
                .iter()
                .map(|&l| sigmoid(l) >= threshold)
                .collect()
        })
        .collect()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Intersection over union of two equal-length masks. Two empty masks have
/// IoU 1; an empty and a non-empty mask have IoU 0.
pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// A×B IoU matrix between two mask sets over the same superpoints.
pub fn pairwise_mask_iou(a: &[Vec<bool>], b: &[Vec<bool>]) -> Result<Matrix> {
    let m = a.first().or(b.first()).map_or(0, Vec::len);
    if a.iter().chain(b).any(|r| r.len() != m) {
        return Err(Error::shape("pairwise_mask_iou", "masks differ in length"));
    }
    let mut out = Matrix::zeros(a.len(), b.len());
    for (i, ra) in a.iter().enumerate() {
        for (j, rb) in b.iter().enumerate() {
            out.set(i, j, mask_iou(ra, rb));
        }
    }
    Ok(out)
}

/// Row-wise maximum, `U_i = max_j IoU[i,j]`.
pub fn max_overlap(iou: &Matrix) -> Result<Vec<f64>> {
    if iou.cols() == 0 {
        return Err(Error::Argument("max_overlap needs at least one column".into()));
    }
    Ok((0..iou.rows())
        .map(|r| iou.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

/// Indices of the `d1` smallest entries (ties to the smaller index),
/// returned in ascending index order. All indices when `d1 >= len`.
pub fn bottom_k(values: &[f64], d1: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    order.truncate(d1);
    order.sort_unstable();
    order
}

/// Rows of `curr` followed by the `retained` rows of `prev`.
pub fn fuse(tape: &mut Tape, prev: &QuerySet, curr: &QuerySet, retained: &[usize]) -> Result<QuerySet> {
    if retained.is_empty() {
        return Ok(curr.clone());
    }
    if let Some(&bad) = retained.iter().find(|&&i| i >= prev.len()) {
        return Err(Error::Argument(format!(
            "retained index {bad} out of range for {} queries",
            prev.len()
        )));
    }
    let kept_pos = tape.gather_rows(prev.positions, retained)?;
    let kept_content = tape.gather_rows(prev.content, retained)?;
    let positions = tape.concat_rows(&[curr.positions, kept_pos])?;
    let content = tape.concat_rows(&[curr.content, kept_content])?;
    let mut lineage = curr.lineage.clone();
    lineage.extend(retained.iter().map(|&i| prev.lineage[i]));
    let mut origin = curr.origin.clone();
    origin.extend(retained.iter().map(|&i| prev.origin[i]));
    Ok(QuerySet {
        positions,
        content,
        lineage,
        origin,
    })
}

/// Whether the transition into 1-based layer `next` fuses queries: only the
/// inputs of the last `d2` layers are fused.
pub fn fuses_into(next: usize, num_layers: usize, d2: usize, enabled: bool) -> bool {
    enabled && next >= 2 && next <= num_layers && next + d2 > num_layers
}

/// Query count entering (and leaving) each layer.
pub fn query_count_schedule(initial: usize, num_layers: usize, d1: usize, d2: usize, fusion: bool) -> Vec<usize> {
    let mut counts = Vec::with_capacity(num_layers);
    let mut c = initial;
    for layer in 1..=num_layers {
        if fuses_into(layer, num_layers, d2, fusion) {
            // Retained rows come from the previous layer's input, which holds
            // the count before this transition.
            c += d1.min(counts.last().copied().unwrap_or(initial));
        }
        counts.push(c);
    }
    counts
}
