//! Turning predictions into scored instances, non-maximum suppression, and
//! instance-segmentation metrics.

mod metrics;
mod report;

pub use metrics::{
    ap_from_iou, average_precision, iou_matrix, recall_at, recall_from_iou, Metrics, MAP_THRESHOLDS,
};
pub use report::{
    format_metrics_csv, recall_chart_svg, summary_rows, write_metrics_csv, MetricsRow, METRICS_HEADER,
};

use crate::autodiff::Matrix;
use crate::decoder::LayerPrediction;
use crate::scene::{Scene, SuperpointPartition};

#[derive(Clone, Debug, PartialEq)]
pub struct FinalInstance {
    pub class_id: usize,
    pub point_mask: Vec<bool>,
    pub score: f64,
}

/// Point-level ground truth for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalGt {
    pub instance_id: i32,
    pub class_id: usize,
    pub point_mask: Vec<bool>,
}

/// Every labeled instance present in the scene, ordered by id.
pub fn eval_gts(scene: &Scene) -> Vec<EvalGt> {
    scene
        .present_instances()
        .into_iter()
        .map(|id| EvalGt {
            instance_id: id,
            class_id: scene.instance_class[&id],
            point_mask: scene.point_instance_id.iter().map(|&p| p == id).collect(),
        })
        .collect()
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// One instance per query with a nonempty mask. The class is the most
/// probable real class, the score is the predicted mask quality times that
/// class probability, and the mask is the superpoint mask at `threshold`
/// broadcast to points.
pub fn final_instances(pred: &LayerPrediction, partition: &SuperpointPartition, threshold: f64) -> Vec<FinalInstance> {
    let masks = pred.binary_masks(threshold);
    let real = pred.class_logits.cols() - 1;
    let mut out = Vec::new();
    for (i, mask) in masks.iter().enumerate() {
        if !mask.iter().any(|&b| b) {
            continue;
        }
        let probs = softmax_row(pred.class_logits.row(i));
        let (class_id, p) = probs[..real]
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (c, &p)| if p > best.1 { (c, p) } else { best });
        out.push(FinalInstance {
            class_id,
            point_mask: partition.broadcast_mask(mask),
            score: pred.scores[i] * p,
        });
    }
    out
}

/// Mask IoU on points.
pub fn point_iou(a: &[bool], b: &[bool]) -> f64 {
    crate::decoder::mask_iou(a, b)
}

/// Indices kept by greedy class-wise NMS, in the order they were kept.
///
/// Instances are visited by descending score (ties to the smaller index);
/// one is kept iff its IoU with every kept instance of the same class is at
/// most `iou_threshold`.
pub fn nms_indices(instances: &[FinalInstance], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.sort_by(|&a, &b| {
        instances[b]
            .score
            .total_cmp(&instances[a].score)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let x = &instances[i];
        let clash = kept.iter().any(|&k| {
            let y = &instances[k];
            y.class_id == x.class_id && point_iou(&x.point_mask, &y.point_mask) > iou_threshold
        });
        if !clash {
            kept.push(i);
        }
    }
    kept
}

pub fn nms(instances: &[FinalInstance], iou_threshold: f64) -> Vec<FinalInstance> {
    nms_indices(instances, iou_threshold)
        .into_iter()
        .map(|i| instances[i].clone())
        .collect()
}

/// Per-layer metrics for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMetrics {
    pub layer: usize,
    pub query_count: usize,
    pub metrics: Metrics,
}

/// Metrics for each layer's instances under identical NMS settings.
/// `nms_threshold = None` disables suppression.
pub fn per_layer_diagnostics(
    per_layer: &[Vec<FinalInstance>],
    query_counts: &[usize],
    gts: &[EvalGt],
    nms_threshold: Option<f64>,
) -> Vec<LayerMetrics> {
    per_layer
        .iter()
        .zip(query_counts)
        .enumerate()
        .map(|(l, (inst, &count))| {
            let kept = match nms_threshold {
                Some(t) => nms(inst, t),
                None => inst.clone(),
            };
            LayerMetrics {
                layer: l + 1,
                query_count: count,
                metrics: Metrics::compute(&kept, gts),
            }
        })
        .collect()
}

/// Mean per-axis `|fps_point − center|` over predictions, each linked to its
/// initial sample through `origin`.
pub fn fps_center_distance(fps_points: &Matrix, pred: &LayerPrediction) -> [f64; 3] {
    let mut acc = [0.0; 3];
    if pred.is_empty() {
        return acc;
    }
    for (i, &o) in pred.origin.iter().enumerate() {
        let f = fps_points.row(o);
        let c = pred.centers.row(i);
        for a in 0..3 {
            acc[a] += (f[a] - c[a]).abs();
        }
    }
    let n = pred.len() as f64;
    acc.map(|v| v / n)
}
