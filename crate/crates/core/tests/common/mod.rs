//! Brute-force oracles, random fixtures and finite-difference checks shared
//! by the integration tests and the acceptance target.
#![allow(dead_code)]

use agentseg::agent_init::{interpolate_content, interpolation_weights, straight_through_positions, QuerySet};
use agentseg::autodiff::{finite_diff_check, Matrix, ParamId, ParamStore, Tape, Var};
use agentseg::decoder::{decoder_layer, predict, DecoderConfig, DecoderModel, SuperpointContext};
use agentseg::eval::{point_iou, FinalInstance};
use agentseg::matching::{total_loss, GroundTruthInstance, LossWeights};
use agentseg::scene::{knn, pool_features, Neighbors, SuperpointPartition};
use agentseg::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect())
}

// ---------------------------------------------------------------- oracles

/// Greedy maximin by definition: each pick maximizes the distance to its
/// nearest already-picked point, recomputed from scratch.
pub fn fps_oracle(p: &Matrix, count: usize, seed: u64) -> Vec<usize> {
    let n = p.rows();
    if n == 0 || count == 0 {
        return Vec::new();
    }
    let dist = |a: usize, b: usize| {
        let (x, y) = (p.row(a), p.row(b));
        ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2)).sqrt()
    };
    let mut picked = vec![(seed % n as u64) as usize];
    while picked.len() < count.min(n) {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for i in (0..n).filter(|i| !picked.contains(i)) {
            let d = picked.iter().map(|&j| dist(i, j)).fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        picked.push(best.1);
    }
    picked
}

/// Minimum total cost over every injective map from the smaller side.
pub fn assignment_oracle(c: &Matrix) -> f64 {
    let c = if c.rows() <= c.cols() { c.clone() } else { c.transpose() };
    let (small, large) = c.shape();
    fn rec(i: usize, c: &Matrix, used: &mut [bool], acc: f64, best: &mut f64) {
        if i == c.rows() {
            *best = best.min(acc);
            return;
        }
        for j in 0..c.cols() {
            if !used[j] {
                used[j] = true;
                rec(i + 1, c, used, acc + c.get(i, j), best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(0, &c, &mut vec![false; large], 0.0, &mut best);
    if small == 0 {
        0.0
    } else {
        best
    }
}

/// Neighbours by sorting every reference, ties to the smaller index.
pub fn knn_oracle(q: &Matrix, refs: &Matrix, k: usize) -> Neighbors {
    let mut dis = Matrix::zeros(q.rows(), k);
    let mut idx = Vec::new();
    for i in 0..q.rows() {
        let mut all: Vec<(f64, usize)> = (0..refs.rows())
            .map(|j| {
                let (a, b) = (q.row(i), refs.row(j));
                (((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt(), j)
            })
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (c, &(d, j)) in all[..k].iter().enumerate() {
            dis.set(i, c, d);
            idx.push(j);
        }
    }
    Neighbors { dis, idx, k }
}

/// Greedy suppression by repeated selection: take the best remaining
/// instance, then delete every remaining same-class instance overlapping it.
pub fn nms_oracle(inst: &[FinalInstance], thr: f64) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..inst.len()).collect();
    let mut kept = Vec::new();
    while !remaining.is_empty() {
        let mut best = remaining[0];
        for &i in &remaining {
            if inst[i].score > inst[best].score || (inst[i].score == inst[best].score && i < best) {
                best = i;
            }
        }
        kept.push(best);
        remaining.retain(|&i| {
            i != best && !(inst[i].class_id == inst[best].class_id && point_iou(&inst[i].point_mask, &inst[best].point_mask) > thr)
        });
    }
    kept
}

/// Instances over `n` points built from a few random blobs, so overlaps
/// span the whole IoU range; scores are coarse so ties occur.
pub fn random_instances(rng: &mut impl Rng, count: usize, n: usize, classes: usize) -> Vec<FinalInstance> {
    (0..count)
        .map(|_| {
            let start = rng.gen_range(0..n);
            let len = rng.gen_range(1..n / 2);
            let jitter = rng.gen_bool(0.5);
            let point_mask = (0..n)
                .map(|p| {
                    let inside = (p + n - start) % n < len;
                    if jitter && rng.gen_bool(0.1) {
                        !inside
                    } else {
                        inside
                    }
                })
                .collect();
            FinalInstance {
                class_id: rng.gen_range(0..classes),
                point_mask,
                score: f64::from(rng.gen_range(0..8u8)) / 8.0,
            }
        })
        .collect()
}

// ------------------------------------------------------ gradient checks

pub const LINEAR_TOL: f64 = 1e-7;
pub const NONLINEAR_TOL: f64 = 1e-4;
const H: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: &'static str,
    pub worst: f64,
    pub tol: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.worst < self.tol
    }
}

/// Fixed pseudo-random weights so every output entry matters.
fn probe_weights(r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|i| (1.3 * i as f64 + 0.7).sin()).collect())
}

/// `Σ out ⊙ R` for a fixed `R`.
fn probe(tape: &mut Tape, out: Var) -> Result<Var> {
    let (r, c) = tape.shape(out);
    let w = tape.constant(probe_weights(r, c));
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

/// Worst relative error over every parameter in `ids`.
fn check_params<F>(store: &mut ParamStore, ids: &[ParamId], mut build: F) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut worst: f64 = 0.0;
    for &id in ids {
        worst = worst.max(finite_diff_check(store, id, H, &mut build)?);
    }
    Ok(worst)
}

/// One op on parameters of the given shapes and value ranges.
/// Input shape and the range its entries are drawn from.
type InputSpec = ((usize, usize), (f64, f64));

fn op_check(
    name: &'static str,
    tol: f64,
    inputs: &[InputSpec],
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    let mut r = rng(name.len() as u64 * 7919 + name.as_bytes()[0] as u64);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs
        .iter()
        .enumerate()
        .map(|(i, &((rows, cols), (lo, hi)))| store.insert_matrix(&format!("x{i}"), random_matrix(&mut r, rows, cols, lo, hi)))
        .collect::<Result<_>>()?;
    let worst = check_params(&mut store, &ids, |tape, st| {
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(st, id)).collect();
        let out = f(tape, &vars)?;
        probe(tape, out)
    })?;
    Ok(GradCheck { name, worst, tol })
}

/// Every tape op, one entry each.
pub fn op_checks() -> Result<Vec<GradCheck>> {
    let any = (-1.0, 1.0);
    // Bounded away from the kinks of relu/abs and the pole of division.
    let away = (0.2, 1.5);
    let lin = LINEAR_TOL;
    let nl = NONLINEAR_TOL;
    let mut out = vec![
        op_check("add", lin, &[((3, 4), any), ((3, 4), any)], |t, v| t.add(v[0], v[1]))?,
        op_check("add (row broadcast)", lin, &[((3, 4), any), ((1, 4), any)], |t, v| t.add(v[0], v[1]))?,
        op_check("sub (column broadcast)", lin, &[((3, 4), any), ((3, 1), any)], |t, v| t.sub(v[0], v[1]))?,
        op_check("mul", nl, &[((3, 4), any), ((3, 4), any)], |t, v| t.mul(v[0], v[1]))?,
        op_check("mul (scalar broadcast)", nl, &[((3, 4), any), ((1, 1), any)], |t, v| t.mul(v[0], v[1]))?,
        op_check("div", nl, &[((3, 4), any), ((1, 4), away)], |t, v| t.div(v[0], v[1]))?,
        op_check("scale", lin, &[((3, 4), any)], |t, v| Ok(t.scale(v[0], -2.5)))?,
        op_check("add_scalar", lin, &[((3, 4), any)], |t, v| Ok(t.add_scalar(v[0], 0.3)))?,
        op_check("matmul", nl, &[((3, 5), any), ((5, 4), any)], |t, v| t.matmul(v[0], v[1]))?,
        op_check("matmul_t", nl, &[((3, 5), any), ((4, 5), any)], |t, v| t.matmul_t(v[0], v[1]))?,
        op_check("transpose", lin, &[((3, 4), any)], |t, v| Ok(t.transpose(v[0])))?,
        op_check("relu", nl, &[((3, 4), away)], |t, v| {
            let n = t.scale(v[0], -1.0);
            let c = t.concat_cols(&[v[0], n])?;
            Ok(t.relu(c))
        })?,
        op_check("sigmoid", nl, &[((3, 4), (-3.0, 3.0))], |t, v| Ok(t.sigmoid(v[0])))?,
        op_check("softplus", nl, &[((3, 4), (-3.0, 3.0))], |t, v| Ok(t.softplus(v[0])))?,
        op_check("abs", nl, &[((3, 4), away)], |t, v| {
            let n = t.scale(v[0], -1.0);
            let c = t.concat_cols(&[v[0], n])?;
            Ok(t.abs(c))
        })?,
        op_check("square", nl, &[((3, 4), any)], |t, v| Ok(t.square(v[0])))?,
        op_check("sqrt", nl, &[((3, 4), away)], |t, v| Ok(t.sqrt(v[0])))?,
        op_check("sin", nl, &[((3, 4), (-3.0, 3.0))], |t, v| Ok(t.sin(v[0])))?,
        op_check("cos", nl, &[((3, 4), (-3.0, 3.0))], |t, v| Ok(t.cos(v[0])))?,
        op_check("softmax", nl, &[((3, 5), (-2.0, 2.0))], |t, v| Ok(t.softmax(v[0])))?,
        op_check("masked_softmax", nl, &[((3, 5), (-2.0, 2.0))], |t, v| {
            let allowed: Vec<bool> = (0..15).map(|i| i % 3 != 1).collect();
            t.masked_softmax(v[0], &allowed)
        })?,
        op_check("log_softmax", nl, &[((3, 5), (-2.0, 2.0))], |t, v| Ok(t.log_softmax(v[0])))?,
        op_check("layer_norm", nl, &[((3, 6), (-2.0, 2.0))], |t, v| Ok(t.layer_norm(v[0])))?,
        op_check("gather_rows", lin, &[((4, 3), any)], |t, v| t.gather_rows(v[0], &[2, 0, 2, 3]))?,
        op_check("scatter_weighted_sum", lin, &[((5, 3), any)], |t, v| {
            t.scatter_weighted_sum(v[0], &[0, 1, 0, 2, 2], &[0.5, -1.0, 2.0, 0.25, 1.0], 3)
        })?,
        op_check("concat_rows", lin, &[((2, 3), any), ((3, 3), any)], |t, v| t.concat_rows(&[v[0], v[1]]))?,
        op_check("concat_cols", lin, &[((3, 2), any), ((3, 3), any)], |t, v| t.concat_cols(&[v[0], v[1]]))?,
        op_check("slice_cols", lin, &[((3, 5), any)], |t, v| t.slice_cols(v[0], 1, 3))?,
        op_check("slice_rows", lin, &[((5, 3), any)], |t, v| t.slice_rows(v[0], 2, 2))?,
        op_check("reshape", lin, &[((3, 4), any)], |t, v| t.reshape(v[0], 2, 6))?,
        op_check("sum", lin, &[((3, 4), any)], |t, v| Ok(t.sum(v[0])))?,
        op_check("mean", lin, &[((3, 4), any)], |t, v| Ok(t.mean(v[0])))?,
        op_check("sum_rows", lin, &[((3, 4), any)], |t, v| Ok(t.sum_rows(v[0])))?,
        op_check("select_entries", lin, &[((3, 4), any)], |t, v| t.select_entries(v[0], &[(0, 1), (2, 3), (0, 1)]))?,
        op_check("straight_through", lin, &[((3, 4), any), ((3, 4), any)], |t, v| {
            // Value and surrogate describe the same function, so the
            // surrogate's gradient is the true one.
            let twice = t.scale(v[1], 2.0);
            let b = t.add(v[0], twice)?;
            let value = t.stop_gradient(b);
            t.straight_through(value, b)
        })?,
    ];
    out.push(stop_gradient_check()?);
    Ok(out)
}

/// `stop_gradient` blocks exactly: the analytic gradient is zero.
fn stop_gradient_check() -> Result<GradCheck> {
    let mut store = ParamStore::new();
    let id = store.insert_matrix("x", random_matrix(&mut rng(3), 3, 3, -1.0, 1.0))?;
    let mut tape = Tape::new();
    let x = tape.param(&store, id);
    let s = tape.stop_gradient(x);
    let l = probe(&mut tape, s)?;
    tape.backward(l, &mut store)?;
    let worst = store.grad(id).as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(GradCheck { name: "stop_gradient", worst, tol: LINEAR_TOL })
}

/// Superpoint pooling on a random partition.
pub fn pool_features_check() -> Result<GradCheck> {
    let mut r = rng(11);
    let assignment: Vec<usize> = (0..20).map(|i| if i < 4 { i } else { r.gen_range(0..4) }).collect();
    let part = SuperpointPartition::from_assignment(assignment)?;
    let mut store = ParamStore::new();
    let id = store.insert_matrix("f", random_matrix(&mut r, 20, 5, -1.0, 1.0))?;
    let worst = check_params(&mut store, &[id], |t, st| {
        let f = t.param(st, id);
        let p = pool_features(t, f, &part)?;
        probe(t, p)
    })?;
    Ok(GradCheck { name: "pool_features", worst, tol: LINEAR_TOL })
}

struct InterpFixture {
    sampled: Matrix,
    refined: Matrix,
    weights: Matrix,
    nb: Neighbors,
}

fn interp_fixture() -> Result<InterpFixture> {
    let mut r = rng(12);
    let sampled = random_matrix(&mut r, 8, 3, 0.0, 2.0);
    let refined = random_matrix(&mut r, 10, 3, 0.0, 2.0);
    let nb = knn(&sampled, &refined, 3)?;
    let weights = interpolation_weights(&nb.dis);
    Ok(InterpFixture { sampled, refined, weights, nb })
}

pub fn interpolate_content_check() -> Result<GradCheck> {
    let fx = interp_fixture()?;
    let mut store = ParamStore::new();
    let id = store.insert_matrix("content", random_matrix(&mut rng(13), 10, 16, -1.0, 1.0))?;
    let worst = check_params(&mut store, &[id], |t, st| {
        let c = t.param(st, id);
        let q = interpolate_content(t, c, &fx.weights, &fx.nb)?;
        probe(t, q)
    })?;
    Ok(GradCheck { name: "interpolate_content", worst, tol: LINEAR_TOL })
}

/// The forward value is the sampled coordinates, so finite differences see
/// nothing; the contract is that the analytic gradient equals the one of
/// the inverse-distance blend, which is checked numerically here.
pub fn straight_through_positions_check() -> Result<GradCheck> {
    let fx = interp_fixture()?;
    let mut store = ParamStore::new();
    let id = store.insert_matrix("refined", fx.refined.clone())?;
    let blend_err = check_params(&mut store, &[id], |t, st| {
        let refined = t.param(st, id);
        let b = agentseg::agent_init::interpolate_rows(t, refined, &fx.weights, &fx.nb)?;
        probe(t, b)
    })?;
    let grad_of = |store: &mut ParamStore, st: bool| -> Result<Matrix> {
        store.zero_grad();
        let mut t = Tape::new();
        let refined = t.param(store, id);
        let out = if st {
            let s = t.constant(fx.sampled.clone());
            straight_through_positions(&mut t, s, refined, &fx.weights, &fx.nb)?
        } else {
            agentseg::agent_init::interpolate_rows(&mut t, refined, &fx.weights, &fx.nb)?
        };
        let l = probe(&mut t, out)?;
        t.backward(l, store)?;
        Ok(store.grad(id).clone())
    };
    let via_st = grad_of(&mut store, true)?;
    let via_blend = grad_of(&mut store, false)?;
    Ok(GradCheck {
        name: "straight_through_positions",
        worst: blend_err.max(via_st.max_abs_diff(&via_blend)),
        tol: LINEAR_TOL,
    })
}

pub const DESK_S: usize = 8;
pub const DESK_M: usize = 16;
pub const DESK_C: usize = 16;

pub fn desk_decoder_config() -> DecoderConfig {
    DecoderConfig {
        num_layers: 2,
        heads: 2,
        hidden_dim: DESK_C,
        ffn_dim: 32,
        encoder_hidden: 8,
        d1: 2,
        d2: 1,
        fusion: true,
        mask_bin_threshold: 0.5,
        num_classes: 3,
    }
}

/// Small model with every parameter nudged off its initial value (zeroed
/// layers would otherwise hide their inputs' gradients).
fn desk_model(store: &mut ParamStore) -> Result<DecoderModel> {
    let mut r = rng(21);
    let model = DecoderModel::new(store, desk_decoder_config(), &mut r)?;
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in store.value_mut(id).as_mut_slice() {
            *v += r.gen_range(-0.1..0.1);
        }
    }
    Ok(model)
}

fn layer_param_ids(store: &ParamStore, prefix: &str) -> Vec<ParamId> {
    store.iter().filter(|(_, p)| p.name.starts_with(prefix)).map(|(id, _)| id).collect()
}

pub fn decoder_layer_check() -> Result<GradCheck> {
    let mut store = ParamStore::new();
    let model = desk_model(&mut store)?;
    let mut r = rng(22);
    let content = store.insert_matrix("q.content", random_matrix(&mut r, DESK_S, DESK_C, -1.0, 1.0))?;
    let qpos = store.insert_matrix("q.pos", random_matrix(&mut r, DESK_S, 3, 0.0, 1.0))?;
    let feats = store.insert_matrix("sup.feats", random_matrix(&mut r, DESK_M, DESK_C, -1.0, 1.0))?;
    let sup_pos = random_matrix(&mut r, DESK_M, 3, 0.0, 1.0);
    let allowed: Vec<bool> = (0..DESK_S * DESK_M).map(|i| i % 5 != 0).collect();
    let mut ids = layer_param_ids(&store, "layer0.");
    ids.extend([content, qpos, feats]);
    let layer = model.layers[0];
    let heads = model.cfg.heads;
    let worst = check_params(&mut store, &ids, |t, st| {
        let queries = QuerySet {
            positions: t.param(st, qpos),
            content: t.param(st, content),
            lineage: (0..DESK_S as u64).collect(),
            origin: (0..DESK_S).collect(),
        };
        let f = t.param(st, feats);
        let sup = SuperpointContext::new(f, sup_pos.clone());
        let mut next = 100;
        let out = decoder_layer(t, st, &layer, heads, &queries, &sup, Some(&allowed), &mut next)?;
        let a = probe(t, out.content)?;
        let p = probe(t, out.positions)?;
        t.add(a, p)
    })?;
    Ok(GradCheck { name: "decoder_layer", worst, tol: NONLINEAR_TOL })
}

/// Prediction heads on two query sets, matched and scored as two layers.
pub fn total_loss_check() -> Result<GradCheck> {
    let mut store = ParamStore::new();
    let model = desk_model(&mut store)?;
    let mut r = rng(23);
    let c1 = store.insert_matrix("q1", random_matrix(&mut r, DESK_S, DESK_C, -1.0, 1.0))?;
    let c2 = store.insert_matrix("q2", random_matrix(&mut r, DESK_S + 2, DESK_C, -1.0, 1.0))?;
    let p1 = store.insert_matrix("p1", random_matrix(&mut r, DESK_S, 3, 0.0, 1.0))?;
    let p2 = store.insert_matrix("p2", random_matrix(&mut r, DESK_S + 2, 3, 0.0, 1.0))?;
    let feats = store.insert_matrix("sup.feats", random_matrix(&mut r, DESK_M, DESK_C, -1.0, 1.0))?;
    let gts: Vec<GroundTruthInstance> = (0..3)
        .map(|g| GroundTruthInstance {
            instance_id: g as i32,
            class_id: g % 3,
            sup_mask: (0..DESK_M).map(|m| m % 3 == g || m == 15 - g).collect(),
            center: [r.gen_range(0.0..1.0), r.gen_range(0.0..1.0), r.gen_range(0.0..1.0)],
        })
        .collect();
    let mut ids = layer_param_ids(&store, "head.");
    assert!(!ids.is_empty(), "head parameters are named head.*");
    ids.extend([c1, c2, p1, p2, feats]);
    let heads = model.heads;
    let w = LossWeights::default();
    let worst = check_params(&mut store, &ids, |t, st| {
        let f = t.param(st, feats);
        let mut layers = Vec::new();
        for (c, p, n) in [(c1, p1, DESK_S), (c2, p2, DESK_S + 2)] {
            let q = QuerySet {
                positions: t.param(st, p),
                content: t.param(st, c),
                lineage: (0..n as u64).collect(),
                origin: (0..n).collect(),
            };
            layers.push(predict(t, st, &heads, &q, f)?);
        }
        let refs: Vec<_> = layers.iter().map(|(v, p)| (*v, p)).collect();
        Ok(total_loss(t, &refs, &gts, &w, 0.5)?.0)
    })?;
    Ok(GradCheck { name: "total_loss", worst, tol: NONLINEAR_TOL })
}

/// Every gradient check in a fixed order.
pub fn all_gradient_checks() -> Result<Vec<GradCheck>> {
    let mut out = op_checks()?;
    out.push(pool_features_check()?);
    out.push(interpolate_content_check()?);
    out.push(straight_through_positions_check()?);
    out.push(decoder_layer_check()?);
    out.push(total_loss_check()?);
    Ok(out)
}

// --------------------------------------------------- oracle agreement runs

/// Number of disagreements between `fps` and the maximin oracle over
/// `cases` random clouds of at most 64 points.
pub fn fps_disagreements(cases: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    (0..cases)
        .filter(|_| {
            let n = r.gen_range(1..=64);
            let p = random_matrix(&mut r, n, 3, -1.0, 1.0);
            let count = r.gen_range(1..=n);
            let start = r.gen::<u64>();
            agentseg::scene::fps(&p, count, start) != fps_oracle(&p, count, start)
        })
        .count()
}

/// Random cost matrices with min side ≤ 7; integer-valued ones force ties.
pub fn random_cost_matrix(r: &mut impl Rng) -> Matrix {
    let small = r.gen_range(0..=7);
    let large = r.gen_range(small.max(1)..=(small + 1).clamp(1, 8));
    let (rows, cols) = if r.gen_bool(0.5) { (small, large) } else { (large, small) };
    if r.gen_bool(0.3) {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| f64::from(r.gen_range(0..4u8))).collect())
    } else {
        random_matrix(r, rows, cols, -5.0, 5.0)
    }
}

/// Largest `|hungarian − exhaustive|` over `cases` matrices, plus the
/// number of returned assignments that are not valid matchings or whose
/// reported cost disagrees with their pairs.
pub fn hungarian_worst_gap(cases: usize, seed: u64) -> (f64, usize) {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    let mut invalid = 0;
    for _ in 0..cases {
        let c = random_cost_matrix(&mut r);
        let a = agentseg::matching::hungarian(&c).expect("finite costs");
        let mut rows: Vec<usize> = a.pairs.iter().map(|p| p.0).collect();
        let mut cols: Vec<usize> = a.pairs.iter().map(|p| p.1).collect();
        rows.sort_unstable();
        rows.dedup();
        cols.sort_unstable();
        cols.dedup();
        let sum: f64 = a.pairs.iter().map(|&(i, j)| c.get(i, j)).sum();
        let size_ok = a.pairs.len() == c.rows().min(c.cols());
        if !size_ok || rows.len() != a.pairs.len() || cols.len() != a.pairs.len() || (sum - a.total_cost).abs() > 1e-9 {
            invalid += 1;
        }
        worst = worst.max((a.total_cost - assignment_oracle(&c)).abs());
    }
    (worst, invalid)
}

pub fn knn_disagreements(cases: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    (0..cases)
        .filter(|_| {
            let l = r.gen_range(1..=40);
            let s = r.gen_range(1..=40);
            let k = r.gen_range(1..=l);
            // Coarse coordinates produce distance ties.
            let mut refs = random_matrix(&mut r, l, 3, 0.0, 1.0);
            if r.gen_bool(0.3) {
                refs = refs.map(|v| (v * 4.0).round() / 4.0);
            }
            let q = random_matrix(&mut r, s, 3, 0.0, 1.0);
            agentseg::scene::knn(&q, &refs, k).expect("valid k") != knn_oracle(&q, &refs, k)
        })
        .count()
}

pub fn nms_disagreements(cases: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    (0..cases)
        .filter(|_| {
            let inst = random_instances(&mut r, 12, 40, 3);
            let thr = [0.25, 0.5, 0.75][r.gen_range(0..3)];
            agentseg::eval::nms_indices(&inst, thr) != nms_oracle(&inst, thr)
        })
        .count()
}

// ------------------------------------------------------- query initialization

/// Outcome of the initial-query contract on one scene.
pub struct InitQueryReport {
    /// Position queries equal the raw FPS coordinates bit for bit.
    pub positions_bitwise: bool,
    /// Largest gap between the agent-position gradient and its closed form.
    pub closed_form_gap: f64,
    pub agent_grad_max: f64,
    /// Largest gradient reaching the sampled coordinates.
    pub sampled_grad_max: f64,
    /// Largest agent-position gradient with the straight-through path off.
    pub no_st_grad_max: f64,
}

impl InitQueryReport {
    pub fn passed(&self) -> bool {
        self.positions_bitwise
            && self.agent_grad_max > 0.0
            && self.closed_form_gap <= 1e-12 * self.agent_grad_max.max(1.0)
            && self.sampled_grad_max == 0.0
            && self.no_st_grad_max == 0.0
    }
}

/// Loss `Σ positions` makes the upstream gradient all ones, so the agent
/// gradient is `Σ_i W[i,j]·(p_max − p_min)` per axis.
pub fn init_query_report(scene: &agentseg::scene::Scene, samples: usize, agents: usize, k: usize, seed: u64) -> Result<InitQueryReport> {
    use agentseg::agent_init::{init_queries, AgentSet, InitMode, InitOptions};
    let mut store = ParamStore::new();
    let set = AgentSet::init(&mut store, agents, 8, &mut rng(seed))?;
    let opts = |straight_through| InitOptions { samples, k, seed, mode: InitMode::Agent, straight_through };

    let run = |store: &mut ParamStore, st: bool| -> Result<(Tape, agentseg::agent_init::InitOutput)> {
        store.zero_grad();
        let mut t = Tape::new();
        let out = init_queries(&mut t, store, scene, &set, &opts(st))?;
        let l = t.sum(out.queries.positions);
        t.backward(l, store)?;
        Ok((t, out))
    };

    let (t, out) = run(&mut store, true)?;
    let raw = scene.positions.select_rows(&agentseg::scene::fps(&scene.positions, samples, seed));
    let got = t.value(out.queries.positions);
    let positions_bitwise = got.shape() == raw.shape()
        && got.as_slice().iter().zip(raw.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());

    let w = out.weights.as_ref().expect("agent mode has weights");
    let nb = out.neighbors.as_ref().expect("agent mode has neighbours");
    let mut expect = Matrix::zeros(agents, 3);
    for i in 0..w.rows() {
        for c in 0..k {
            let j = nb.idx[i * k + c];
            for a in 0..3 {
                let v = expect.get(j, a) + w.get(i, c) * (out.p_max[a] - out.p_min[a]);
                expect.set(j, a, v);
            }
        }
    }
    let grad = store.grad(set.positions_norm).clone();
    let closed_form_gap = grad.max_abs_diff(&expect);
    let agent_grad_max = grad.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));

    // The sampled coordinates as a tape node of their own.
    let mut t = Tape::new();
    let sampled = t.constant(out.sample_positions.clone());
    let refined = t.constant(Matrix::filled(agents, 3, 0.5));
    let q = straight_through_positions(&mut t, sampled, refined, w, nb)?;
    let l = t.sum(q);
    let grads = t.gradients(l)?;
    let sampled_grad_max = grads[sampled.index()]
        .as_ref()
        .map_or(0.0, |g| g.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs())));

    run(&mut store, false)?;
    let no_st_grad_max = store.grad(set.positions_norm).as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));

    Ok(InitQueryReport { positions_bitwise, closed_form_gap, agent_grad_max, sampled_grad_max, no_st_grad_max })
}

/// Worst `|Σ_j W[i,j] − 1|` over `rows` random distance rows, a share of
/// which contain exact zeros (including all-zero rows).
pub fn weight_row_sum_worst(rows: usize, k: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut dis = random_matrix(&mut r, rows, k, 0.0, 3.0);
    for i in 0..rows {
        match i % 10 {
            0 => dis.row_mut(i).fill(0.0),
            1..=3 => dis.set(i, r.gen_range(0..k), 0.0),
            4 => dis.row_mut(i).iter_mut().for_each(|v| *v *= 1e-9),
            _ => {}
        }
    }
    let w = interpolation_weights(&dis);
    (0..rows)
        .map(|i| (w.row(i).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

// ----------------------------------------------------------------- decoder

/// Query counts of a full forward through a tiny decoder with `s` random
/// initial queries over 24 random superpoints.
pub fn decoder_query_counts(num_layers: usize, s: usize, d1: usize, d2: usize, fusion: bool) -> Result<Vec<usize>> {
    use agentseg::decoder::run_decoder;
    let cfg = DecoderConfig {
        num_layers,
        heads: 2,
        hidden_dim: 8,
        ffn_dim: 8,
        encoder_hidden: 8,
        d1,
        d2,
        fusion,
        mask_bin_threshold: 0.5,
        num_classes: 3,
    };
    let mut store = ParamStore::new();
    let mut r = rng(31);
    let model = DecoderModel::new(&mut store, cfg, &mut r)?;
    let mut t = Tape::new();
    let init = QuerySet {
        positions: t.constant(random_matrix(&mut r, s, 3, 0.0, 1.0)),
        content: t.constant(random_matrix(&mut r, s, 8, -1.0, 1.0)),
        lineage: (0..s as u64).collect(),
        origin: (0..s).collect(),
    };
    let feats = t.constant(random_matrix(&mut r, 24, 8, -1.0, 1.0));
    let sup = SuperpointContext::new(feats, random_matrix(&mut r, 24, 3, 0.0, 1.0));
    Ok(run_decoder(&mut t, &store, &model, init, &sup)?.query_counts())
}

// ---------------------------------------------------------------- training

pub const TINY_CONFIG: &str = "num_layers = 2\nd1 = 2\nd2 = 1\nheads = 2\nhidden_dim = 16\nffn_dim = 32\n\
encoder_hidden = 16\nsamples = 8\nagents = 8\nk = 3\n";

pub fn tiny_config(epochs: usize, extra: &str) -> agentseg::harness::Config {
    let text = format!("{TINY_CONFIG}epochs = {epochs}\n{extra}");
    agentseg::harness::Config::parse(&text, "tiny").expect("tiny config parses")
}

/// A few small synthetic scenes prepared with `cfg`.
pub fn tiny_scenes(n: usize, seed: u64, cfg: &agentseg::harness::Config) -> Vec<agentseg::harness::PreparedScene> {
    use agentseg::harness::{generate_scenes, prepare_scene, SyntheticSpec};
    let spec = SyntheticSpec { scenes: n, instances_min: 2, instances_max: 3, points_min: 150, points_max: 250, ..SyntheticSpec::default() };
    generate_scenes(&spec, seed)
        .iter()
        .enumerate()
        .map(|(i, s)| prepare_scene(&format!("tiny{i}"), s, cfg).expect("scene prepares"))
        .collect()
}

pub struct DeterminismReport {
    pub logs_identical: bool,
    pub checkpoints_identical: bool,
    /// Largest per-step loss gap between resumed and uninterrupted runs.
    pub resume_gap: f64,
}

impl DeterminismReport {
    pub fn passed(&self) -> bool {
        self.logs_identical && self.checkpoints_identical && self.resume_gap <= 1e-12
    }
}

/// Two identical runs, then a run that stops at `epochs / 2` and resumes
/// from its checkpoint.
pub fn determinism_and_resume(dir: &std::path::Path, epochs: usize) -> Result<DeterminismReport> {
    use agentseg::harness::{checkpoint_name, format_train_log, train, TrainOptions, FINAL_CHECKPOINT, TRAIN_LOG};
    let cfg = tiny_config(epochs, "checkpoint_every = 1\n");
    let data = tiny_scenes(3, 11, &cfg);
    let run = |name: &str, cfg: &agentseg::harness::Config, resume: Option<std::path::PathBuf>| {
        let opts = TrainOptions { out_dir: Some(dir.join(name)), resume };
        train(cfg, &data, &opts)
    };
    let a = run("a", &cfg, None)?;
    let b = run("b", &cfg, None)?;
    let read = |p: std::path::PathBuf| std::fs::read(&p).unwrap_or_default();
    let logs_identical = format_train_log(&a.log) == format_train_log(&b.log)
        && read(dir.join("a").join(TRAIN_LOG)) == read(dir.join("b").join(TRAIN_LOG));
    let checkpoints_identical = read(dir.join("a").join(FINAL_CHECKPOINT)) == read(dir.join("b").join(FINAL_CHECKPOINT));

    let half = epochs / 2;
    let resumed = run("c", &cfg, Some(dir.join("a").join(checkpoint_name(half))))?;
    let tail = &a.step_losses[a.step_losses.len() - resumed.step_losses.len()..];
    let resume_gap = if resumed.step_losses.is_empty() {
        f64::INFINITY
    } else {
        tail.iter().zip(&resumed.step_losses).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    };
    Ok(DeterminismReport { logs_identical, checkpoints_identical, resume_gap })
}
