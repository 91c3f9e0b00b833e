use super::{point_iou, EvalGt, FinalInstance};
use crate::autodiff::Matrix;

/// IoU thresholds averaged by mAP.
pub const MAP_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

/// P×G point-mask IoU between predictions and ground truth.
pub fn iou_matrix(preds: &[FinalInstance], gts: &[EvalGt]) -> Matrix {
    let mut m = Matrix::zeros(preds.len(), gts.len());
    for (i, p) in preds.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            m.set(i, j, point_iou(&p.point_mask, &g.point_mask));
        }
    }
    m
}

/// AP at one threshold given a precomputed [`iou_matrix`].
///
/// Per class, predictions are visited by descending score (ties to the
/// smaller index) and each claims the unmatched same-class ground truth
/// with the highest IoU, if that IoU reaches `threshold`. The area under
/// the monotone precision envelope is averaged over classes that have
/// ground truth. Returns 0 when there is no ground truth.
pub fn ap_from_iou(preds: &[FinalInstance], gts: &[EvalGt], iou: &Matrix, threshold: f64) -> f64 {
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &c in &classes {
        let gt_idx: Vec<usize> = (0..gts.len()).filter(|&j| gts[j].class_id == c).collect();
        let mut order: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].class_id == c).collect();
        order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));

        let mut taken = vec![false; gts.len()];
        let mut hits = Vec::with_capacity(order.len());
        for &i in &order {
            let mut best: Option<(usize, f64)> = None;
            for &j in &gt_idx {
                let v = iou.get(i, j);
                if !taken[j] && v >= threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
            }
            hits.push(best.is_some());
        }

        let n = gt_idx.len() as f64;
        let mut precision = Vec::with_capacity(hits.len());
        let mut tp = 0usize;
        for (k, &h) in hits.iter().enumerate() {
            tp += usize::from(h);
            precision.push(tp as f64 / (k + 1) as f64);
        }
        // Running maximum from the right gives the envelope.
        for k in (0..precision.len().saturating_sub(1)).rev() {
            precision[k] = precision[k].max(precision[k + 1]);
        }
        let ap: f64 = hits
            .iter()
            .zip(&precision)
            .filter(|(&h, _)| h)
            .map(|(_, &p)| p / n)
            .sum();
        total += ap;
    }
    total / classes.len() as f64
}

pub fn average_precision(preds: &[FinalInstance], gts: &[EvalGt], threshold: f64) -> f64 {
    ap_from_iou(preds, gts, &iou_matrix(preds, gts), threshold)
}

/// Fraction of ground truths overlapped at `threshold` by at least one
/// prediction (of the same class unless `class_agnostic`). 1 when there is
/// no ground truth.
pub fn recall_from_iou(
    preds: &[FinalInstance],
    gts: &[EvalGt],
    iou: &Matrix,
    threshold: f64,
    class_agnostic: bool,
) -> f64 {
    if gts.is_empty() {
        return 1.0;
    }
    let found = gts
        .iter()
        .enumerate()
        .filter(|(j, g)| {
            preds.iter().enumerate().any(|(i, p)| {
                (class_agnostic || p.class_id == g.class_id) && iou.get(i, *j) >= threshold
            })
        })
        .count();
    found as f64 / gts.len() as f64
}

pub fn recall_at(preds: &[FinalInstance], gts: &[EvalGt], threshold: f64, class_agnostic: bool) -> f64 {
    recall_from_iou(preds, gts, &iou_matrix(preds, gts), threshold, class_agnostic)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub map: f64,
    pub ap50: f64,
    pub ap25: f64,
    pub recall50: f64,
}

impl Metrics {
    pub fn compute(preds: &[FinalInstance], gts: &[EvalGt]) -> Self {
        let iou = iou_matrix(preds, gts);
        let map = MAP_THRESHOLDS
            .iter()
            .map(|&t| ap_from_iou(preds, gts, &iou, t))
            .sum::<f64>()
            / MAP_THRESHOLDS.len() as f64;
        Self {
            map,
            ap50: ap_from_iou(preds, gts, &iou, 0.5),
            ap25: ap_from_iou(preds, gts, &iou, 0.25),
            recall50: recall_from_iou(preds, gts, &iou, 0.5, false),
        }
    }

    /// Entry-wise mean; zeros for an empty slice.
    pub fn mean(items: &[Metrics]) -> Self {
        if items.is_empty() {
            return Self::default();
        }
        let n = items.len() as f64;
        let mut m = Self::default();
        for x in items {
            m.map += x.map;
            m.ap50 += x.ap50;
            m.ap25 += x.ap25;
            m.recall50 += x.recall50;
        }
        Self {
            map: m.map / n,
            ap50: m.ap50 / n,
            ap25: m.ap25 / n,
            recall50: m.recall50 / n,
        }
    }
}
