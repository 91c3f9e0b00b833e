//! Ground truth, matching costs, Hungarian assignment and the per-layer
//! training loss.

mod hungarian;

use std::collections::BTreeMap;

pub use hungarian::{hungarian, Assignment};

use crate::autodiff::{Matrix, Tape, Var};
use crate::decoder::{mask_iou, sigmoid, LayerPrediction, PredictionVars};
use crate::error::{Error, Result};
use crate::scene::{Scene, SuperpointPartition};

/// Protects the dice ratio against empty masks.
pub const DICE_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthInstance {
    pub instance_id: i32,
    pub class_id: usize,
    /// Superpoints whose majority label is this instance.
    pub sup_mask: Vec<bool>,
    /// Mean position of the instance's points.
    pub center: [f64; 3],
}

/// One ground truth per instance that owns at least one superpoint by
/// majority vote, ordered by instance id.
pub fn gts_from_scene(scene: &Scene, partition: &SuperpointPartition) -> Result<Vec<GroundTruthInstance>> {
    if partition.num_points() != scene.len() {
        return Err(Error::shape(
            "gts_from_scene",
            format!("partition covers {} points, scene has {}", partition.num_points(), scene.len()),
        ));
    }
    let m = partition.num_superpoints();
    // Per-superpoint label counts, then majority with ties to the smaller id.
    let mut counts: Vec<BTreeMap<i32, usize>> = vec![BTreeMap::new(); m];
    for (i, &sp) in partition.assignment.iter().enumerate() {
        *counts[sp].entry(scene.point_instance_id[i]).or_default() += 1;
    }
    let owner: Vec<i32> = counts
        .iter()
        .map(|c| {
            let mut best = (0usize, i32::MAX);
            for (&id, &n) in c {
                if n > best.0 {
                    best = (n, id);
                }
            }
            best.1
        })
        .collect();

    let mut sums: BTreeMap<i32, ([f64; 3], usize)> = BTreeMap::new();
    for (i, &id) in scene.point_instance_id.iter().enumerate() {
        if id >= 0 {
            let e = sums.entry(id).or_insert(([0.0; 3], 0));
            for a in 0..3 {
                e.0[a] += scene.positions.get(i, a);
            }
            e.1 += 1;
        }
    }

    let mut out = Vec::new();
    for (&id, &(sum, n)) in &sums {
        let sup_mask: Vec<bool> = owner.iter().map(|&o| o == id).collect();
        if !sup_mask.iter().any(|&b| b) {
            continue;
        }
        let class_id = *scene.instance_class.get(&id).ok_or_else(|| {
            Error::Argument(format!("instance {id} has no class entry"))
        })?;
        let k = n as f64;
        out.push(GroundTruthInstance {
            instance_id: id,
            class_id,
            sup_mask,
            center: [sum[0] / k, sum[1] / k, sum[2] / k],
        });
    }
    Ok(out)
}

/// Weights of the five loss terms, in the order class, mask BCE, mask dice,
/// center, score. Matching uses the first four.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub ce: f64,
    pub bce: f64,
    pub dice: f64,
    pub center: f64,
    pub score: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce: 0.5,
            bce: 1.0,
            dice: 1.0,
            center: 0.5,
            score: 0.5,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 5] {
        [self.ce, self.bce, self.dice, self.center, self.score]
    }

    pub fn from_array(w: [f64; 5]) -> Self {
        Self {
            ce: w[0],
            bce: w[1],
            dice: w[2],
            center: w[3],
            score: w[4],
        }
    }
}

/// `−log softmax(logits)` for one row, computed stably.
fn neg_log_softmax(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    lse - row[target]
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Mean binary cross-entropy between `sigmoid(logits)` and `target`.
pub fn mask_bce(logits: &[f64], target: &[bool]) -> f64 {
    let n = logits.len().max(1) as f64;
    logits
        .iter()
        .zip(target)
        .map(|(&l, &t)| softplus(l) - if t { l } else { 0.0 })
        .sum::<f64>()
        / n
}

/// `1 − 2Σpq / (Σp² + Σq² + ε)` with `p = sigmoid(logits)`.
pub fn mask_dice(logits: &[f64], target: &[bool]) -> f64 {
    let (mut pq, mut pp, mut qq) = (0.0, 0.0, 0.0);
    for (&l, &t) in logits.iter().zip(target) {
        let p = sigmoid(l);
        pp += p * p;
        if t {
            pq += p;
            qq += 1.0;
        }
    }
    1.0 - 2.0 * pq / (pp + qq + DICE_EPS)
}

pub fn center_l1(a: &[f64], b: &[f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).abs()).sum()
}

/// `C[i,j] = λ_ce·CE + λ_dice·DICE + λ_bce·BCE + λ_center·L1` between query
/// `i` and ground truth `j`.
pub fn cost_matrix(pred: &LayerPrediction, gts: &[GroundTruthInstance], w: &LossWeights) -> Result<Matrix> {
    if gts.is_empty() {
        return Err(Error::Argument("cost_matrix needs at least one ground truth".into()));
    }
    let m = pred.mask_logits.cols();
    if let Some(g) = gts.iter().find(|g| g.sup_mask.len() != m) {
        return Err(Error::shape(
            "cost_matrix",
            format!("gt {} mask has {} superpoints, predictions {m}", g.instance_id, g.sup_mask.len()),
        ));
    }
    let nc = pred.class_logits.cols();
    if let Some(g) = gts.iter().find(|g| g.class_id + 1 >= nc) {
        return Err(Error::Argument(format!(
            "gt class {} outside {} real classes",
            g.class_id,
            nc - 1
        )));
    }
    // Per-query sums are shared by every ground truth; only the sums over
    // each target's support differ.
    let inv_m = 1.0 / m.max(1) as f64;
    let mut c = Matrix::zeros(pred.len(), gts.len());
    let mut probs = vec![0.0; m];
    for i in 0..pred.len() {
        let logits = pred.mask_logits.row(i);
        let cls = pred.class_logits.row(i);
        let center = pred.centers.row(i);
        let softplus_sum: f64 = logits.iter().map(|&l| softplus(l)).sum();
        let mut pp = 0.0;
        for (p, &l) in probs.iter_mut().zip(logits) {
            *p = sigmoid(l);
            pp += *p * *p;
        }
        for (j, g) in gts.iter().enumerate() {
            let (mut pq, mut qq, mut lq) = (0.0, 0.0, 0.0);
            for k in 0..m {
                if g.sup_mask[k] {
                    pq += probs[k];
                    lq += logits[k];
                    qq += 1.0;
                }
            }
            let dice = 1.0 - 2.0 * pq / (pp + qq + DICE_EPS);
            let bce = (softplus_sum - lq) * inv_m;
            let v = w.ce * neg_log_softmax(cls, g.class_id)
                + w.dice * dice
                + w.bce * bce
                + w.center * center_l1(center, &g.center);
            c.set(i, j, v);
        }
    }
    Ok(c)
}

/// Per-term values of one layer's loss, before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub ce: f64,
    pub bce: f64,
    pub dice: f64,
    pub center: f64,
    pub score: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn add(&mut self, o: &LossTerms) {
        self.ce += o.ce;
        self.bce += o.bce;
        self.dice += o.dice;
        self.center += o.center;
        self.score += o.score;
        self.total += o.total;
    }

    pub fn scaled(&self, k: f64) -> LossTerms {
        LossTerms {
            ce: self.ce * k,
            bce: self.bce * k,
            dice: self.dice * k,
            center: self.center * k,
            score: self.score * k,
            total: self.total * k,
        }
    }
}

/// Score targets: the IoU between each matched query's binarized mask and
/// its ground truth; 0 for unmatched queries.
pub fn score_targets(
    pred: &LayerPrediction,
    gts: &[GroundTruthInstance],
    assignment: &Assignment,
    threshold: f64,
) -> Vec<f64> {
    let masks = pred.binary_masks(threshold);
    let mut t = vec![0.0; pred.len()];
    for &(q, g) in &assignment.pairs {
        t[q] = mask_iou(&masks[q], &gts[g].sup_mask);
    }
    t
}

/// Five-term loss of one layer on the tape.
///
/// Class cross-entropy is averaged over all queries, with unmatched queries
/// labeled no-object (the last logit column). Mask BCE, dice and center L1
/// are averaged over matched pairs and vanish without pairs. The score term
/// is the mean squared error against [`score_targets`].
#[allow(clippy::too_many_arguments)]
pub fn layer_loss(
    tape: &mut Tape,
    vars: &PredictionVars,
    pred: &LayerPrediction,
    gts: &[GroundTruthInstance],
    assignment: &Assignment,
    w: &LossWeights,
    mask_threshold: f64,
) -> Result<(Var, LossTerms)> {
    let s = pred.len();
    let no_object = pred.class_logits.cols() - 1;
    let matched = assignment.gt_for_queries(s);

    let labels: Vec<(usize, usize)> = matched
        .iter()
        .enumerate()
        .map(|(q, g)| (q, g.map_or(no_object, |g| gts[g].class_id)))
        .collect();
    let logp = tape.log_softmax(vars.class_logits);
    let picked = tape.select_entries(logp, &labels)?;
    let ce = tape.mean(picked);
    let ce = tape.scale(ce, -1.0);
    let mut terms = vec![(ce, w.ce)];

    let pairs = &assignment.pairs;
    let (mut bce, mut dice, mut center) = (None, None, None);
    if !pairs.is_empty() {
        let m = pred.mask_logits.cols();
        let qi: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let mut target = Matrix::zeros(pairs.len(), m);
        let mut centers = Matrix::zeros(pairs.len(), 3);
        for (k, &(_, g)) in pairs.iter().enumerate() {
            for (t, &b) in target.row_mut(k).iter_mut().zip(&gts[g].sup_mask) {
                *t = if b { 1.0 } else { 0.0 };
            }
            centers.row_mut(k).copy_from_slice(&gts[g].center);
        }
        let n_pairs = pairs.len() as f64;
        let logits = tape.gather_rows(vars.mask_logits, &qi)?;
        let target = tape.constant(target);

        // BCE with logits: softplus(l) − t·l.
        let sp = tape.softplus(logits);
        let tl = tape.mul(target, logits)?;
        let b = tape.sub(sp, tl)?;
        let b = tape.mean(b);
        terms.push((b, w.bce));
        bce = Some(b);

        let p = tape.sigmoid(logits);
        let pq = tape.mul(p, target)?;
        let pq = tape.sum_rows(pq);
        let pp = tape.square(p);
        let pp = tape.sum_rows(pp);
        let qq = tape.sum_rows(target);
        let den = tape.add(pp, qq)?;
        let den = tape.add_scalar(den, DICE_EPS);
        let ratio = tape.div(pq, den)?;
        let ratio = tape.sum(ratio);
        let d = tape.scale(ratio, -2.0 / n_pairs);
        let d = tape.add_scalar(d, 1.0);
        terms.push((d, w.dice));
        dice = Some(d);

        let pc = tape.gather_rows(vars.centers, &qi)?;
        let gc = tape.constant(centers);
        let diff = tape.sub(pc, gc)?;
        let diff = tape.abs(diff);
        let c = tape.sum(diff);
        let c = tape.scale(c, 1.0 / n_pairs);
        terms.push((c, w.center));
        center = Some(c);
    }

    let targets = score_targets(pred, gts, assignment, mask_threshold);
    let targets = tape.constant(Matrix::from_vec(s, 1, targets));
    let diff = tape.sub(vars.scores, targets)?;
    let sq = tape.square(diff);
    let score = tape.mean(sq);
    terms.push((score, w.score));

    let mut total: Option<Var> = None;
    for &(v, k) in &terms {
        let t = tape.scale(v, k);
        total = Some(match total {
            Some(acc) => tape.add(acc, t)?,
            None => t,
        });
    }
    let total = total.expect("class term always present");
    let val = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v));
    let report = LossTerms {
        ce: tape.scalar(ce),
        bce: val(bce),
        dice: val(dice),
        center: val(center),
        score: tape.scalar(score),
        total: tape.scalar(total),
    };
    if !report.total.is_finite() {
        return Err(Error::NonFinite(format!("layer loss is {}", report.total)));
    }
    Ok((total, report))
}

/// Matches and scores one layer.
pub fn match_layer(pred: &LayerPrediction, gts: &[GroundTruthInstance], w: &LossWeights) -> Result<Assignment> {
    if gts.is_empty() || pred.is_empty() {
        return Ok(Assignment::empty());
    }
    hungarian(&cost_matrix(pred, gts, w)?)
}

/// Sum of [`layer_loss`] over layers, each matched independently.
pub fn total_loss(
    tape: &mut Tape,
    layers: &[(PredictionVars, &LayerPrediction)],
    gts: &[GroundTruthInstance],
    w: &LossWeights,
    mask_threshold: f64,
) -> Result<(Var, Vec<LossTerms>)> {
    if layers.is_empty() {
        return Err(Error::Argument("total_loss needs at least one layer".into()));
    }
    let mut total: Option<Var> = None;
    let mut reports = Vec::with_capacity(layers.len());
    for (vars, pred) in layers {
        let assignment = match_layer(pred, gts, w)?;
        let (l, r) = layer_loss(tape, vars, pred, gts, &assignment, w, mask_threshold)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
        reports.push(r);
    }
    Ok((total.expect("at least one layer"), reports))
}
