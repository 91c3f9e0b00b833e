//! Point encoder, masked-attention decoder layers, prediction heads, and
//! the fusing decoder that carries poorly updated queries forward.

mod fusion;

use rand::Rng;

pub use fusion::{
    binarize, bottom_k, fuse, fuses_into, mask_iou, max_overlap, pairwise_mask_iou,
    query_count_schedule, BinaryMasks,
};
pub(crate) use fusion::sigmoid;

use crate::agent_init::QuerySet;
use crate::autodiff::{Matrix, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::scene::Scene;

/// Angular frequencies (rad/m) of the relative-position bias.
pub const FOURIER_FREQS: [f64; 4] = [1.5, 3.0, 6.0, 12.0];
const FOURIER_COLS: usize = 3 * FOURIER_FREQS.len();

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub heads: usize,
    /// Query and superpoint feature width `C`.
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    /// Hidden width of the per-point encoder.
    pub encoder_hidden: usize,
    /// Queries retained per fused transition.
    pub d1: usize,
    /// Number of final layers whose inputs are fused.
    pub d2: usize,
    pub fusion: bool,
    pub mask_bin_threshold: f64,
    /// Number of real classes; logits carry one more column for no-object.
    pub num_classes: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 6,
            heads: 4,
            hidden_dim: 64,
            ffn_dim: 256,
            encoder_hidden: 32,
            d1: 40,
            d2: 3,
            fusion: true,
            mask_bin_threshold: 0.5,
            num_classes: 6,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_layers < 2 {
            return bad(format!("num_layers must be >= 2, got {}", self.num_layers));
        }
        if self.d2 < 1 || self.d2 > self.num_layers - 1 {
            return bad(format!(
                "D2 must lie in [1, num_layers - 1] = [1, {}], got {}",
                self.num_layers - 1,
                self.d2
            ));
        }
        if self.d1 < 1 {
            return bad("D1 must be >= 1".into());
        }
        if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "hidden_dim {} must be a positive multiple of heads {}",
                self.hidden_dim, self.heads
            ));
        }
        if self.ffn_dim == 0 || self.encoder_hidden == 0 {
            return bad("ffn_dim and encoder_hidden must be >= 1".into());
        }
        if !(self.mask_bin_threshold > 0.0 && self.mask_bin_threshold < 1.0) {
            return bad(format!(
                "mask_bin_threshold must lie in (0, 1), got {}",
                self.mask_bin_threshold
            ));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be >= 1".into());
        }
        Ok(())
    }

    pub fn query_counts(&self, initial: usize) -> Vec<usize> {
        query_count_schedule(initial, self.num_layers, self.d1, self.d2, self.fusion)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            w: store.xavier(&format!("{name}.w"), fan_in, fan_out, rng)?,
            b: store.zeros(&format!("{name}.b"), 1, fan_out)?,
        })
    }

    fn zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            w: store.zeros(&format!("{name}.w"), fan_in, fan_out)?,
            b: store.zeros(&format!("{name}.b"), 1, fan_out)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

/// Layer normalization with a learned per-channel gain and bias.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.filled(&format!("{name}.gain"), 1, dim, 1.0)?,
            bias: store.zeros(&format!("{name}.bias"), 1, dim)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x);
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        let y = tape.mul(n, g)?;
        tape.add(y, b)
    }
}

/// Per-point MLP on `[xyz − center, rgb − 0.5, normal]`, two hidden layers
/// with layer normalization.
#[derive(Clone, Copy, Debug)]
pub struct PointEncoder {
    pub l1: Linear,
    pub n1: Norm,
    pub l2: Linear,
    pub n2: Norm,
    pub out: Linear,
}

impl PointEncoder {
    fn new<R: Rng>(store: &mut ParamStore, cfg: &DecoderConfig, rng: &mut R) -> Result<Self> {
        let h = cfg.encoder_hidden;
        Ok(Self {
            l1: Linear::new(store, "encoder.l1", 9, h, rng)?,
            n1: Norm::new(store, "encoder.n1", h)?,
            l2: Linear::new(store, "encoder.l2", h, h, rng)?,
            n2: Norm::new(store, "encoder.n2", h)?,
            out: Linear::new(store, "encoder.out", h, cfg.hidden_dim, rng)?,
        })
    }
}

/// Input features for the encoder, centered on the scene's bounding box.
pub fn encoder_inputs(scene: &Scene) -> Matrix {
    let (lo, hi) = scene.bounds();
    let center = [
        0.5 * (lo[0] + hi[0]),
        0.5 * (lo[1] + hi[1]),
        0.5 * (lo[2] + hi[2]),
    ];
    let mut x = scene.point_features();
    for r in 0..x.rows() {
        let row = x.row_mut(r);
        for a in 0..3 {
            row[a] -= center[a];
            row[3 + a] -= 0.5;
        }
    }
    x
}

/// Per-point features N×C.
pub fn encode_points(tape: &mut Tape, store: &ParamStore, enc: &PointEncoder, scene: &Scene) -> Result<Var> {
    let x = tape.constant(encoder_inputs(scene));
    let h = enc.l1.forward(tape, store, x)?;
    let h = enc.n1.forward(tape, store, h)?;
    let h = tape.relu(h);
    let h = enc.l2.forward(tape, store, h)?;
    let h = enc.n2.forward(tape, store, h)?;
    let h = tape.relu(h);
    enc.out.forward(tape, store, h)
}

#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub o: Linear,
}

impl Attention {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            q: store.xavier(&format!("{name}.q"), dim, dim, rng)?,
            k: store.xavier(&format!("{name}.k"), dim, dim, rng)?,
            v: store.xavier(&format!("{name}.v"), dim, dim, rng)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayerParams {
    pub cross_norm: Norm,
    pub cross: Attention,
    /// Per-head weights (H×3F) of `sin(f·d_a)` in the relative-position
    /// bias, `d = superpoint − query`, one column per frequency and axis.
    pub pos_sin: ParamId,
    /// Per-head weights (H×3F) of `cos(f·d_a)`.
    pub pos_cos: ParamId,
    /// Per-head weight (1×H) of `|d|²`.
    pub pos_dist: ParamId,
    pub self_norm: Norm,
    pub self_attn: Attention,
    pub ffn_norm: Norm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub pos1: Linear,
    /// Zero-initialized so an untrained layer leaves positions in place.
    pub pos2: Linear,
}

impl DecoderLayerParams {
    fn new<R: Rng>(store: &mut ParamStore, idx: usize, cfg: &DecoderConfig, rng: &mut R) -> Result<Self> {
        let c = cfg.hidden_dim;
        let name = |s: &str| format!("layer{idx}.{s}");
        // Small random weights on the Fourier terms, and a negative weight on
        // the squared distance so attention starts out local.
        let mut small = || {
            let mut m = Matrix::zeros(cfg.heads, FOURIER_COLS);
            for v in m.as_mut_slice() {
                *v = rng.gen_range(-0.1..0.1);
            }
            m
        };
        let (ws, wc) = (small(), small());
        Ok(Self {
            cross_norm: Norm::new(store, &name("cross_norm"), c)?,
            cross: Attention::new(store, &name("cross"), c, rng)?,
            pos_sin: store.insert_matrix(&name("pos_sin"), ws)?,
            pos_cos: store.insert_matrix(&name("pos_cos"), wc)?,
            pos_dist: store.filled(&name("pos_dist"), 1, cfg.heads, -4.0)?,
            self_norm: Norm::new(store, &name("self_norm"), c)?,
            self_attn: Attention::new(store, &name("self"), c, rng)?,
            ffn_norm: Norm::new(store, &name("ffn_norm"), c)?,
            ffn1: Linear::new(store, &name("ffn1"), c, cfg.ffn_dim, rng)?,
            ffn2: Linear::new(store, &name("ffn2"), cfg.ffn_dim, c, rng)?,
            pos1: Linear::new(store, &name("pos1"), c, c, rng)?,
            pos2: Linear::zeroed(store, &name("pos2"), c, 3)?,
        })
    }
}

/// Heads shared by every layer.
#[derive(Clone, Copy, Debug)]
pub struct PredictionHeads {
    pub norm: Norm,
    pub cls: Linear,
    pub mask1: Linear,
    pub mask2: Linear,
    pub score1: Linear,
    pub score2: Linear,
}

impl PredictionHeads {
    fn new<R: Rng>(store: &mut ParamStore, cfg: &DecoderConfig, rng: &mut R) -> Result<Self> {
        let c = cfg.hidden_dim;
        Ok(Self {
            norm: Norm::new(store, "head.norm", c)?,
            cls: Linear::new(store, "head.cls", c, cfg.num_classes + 1, rng)?,
            mask1: Linear::new(store, "head.mask1", c, c, rng)?,
            mask2: Linear::new(store, "head.mask2", c, c, rng)?,
            score1: Linear::new(store, "head.score1", c, c, rng)?,
            score2: Linear::new(store, "head.score2", c, 1, rng)?,
        })
    }
}

/// Encoder, decoder layers and heads. Parameter handles only; values live
/// in the [`ParamStore`] built alongside.
#[derive(Clone, Debug)]
pub struct DecoderModel {
    pub cfg: DecoderConfig,
    pub encoder: PointEncoder,
    pub layers: Vec<DecoderLayerParams>,
    pub heads: PredictionHeads,
}

impl DecoderModel {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: DecoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let encoder = PointEncoder::new(store, &cfg, rng)?;
        let layers = (0..cfg.num_layers)
            .map(|i| DecoderLayerParams::new(store, i, &cfg, rng))
            .collect::<Result<_>>()?;
        let heads = PredictionHeads::new(store, &cfg, rng)?;
        Ok(Self {
            cfg,
            encoder,
            layers,
            heads,
        })
    }
}

/// Superpoint features and the position terms shared by every layer.
#[derive(Clone, Debug)]
pub struct SuperpointContext {
    /// M×C node.
    pub feats: Var,
    /// M×3 superpoint centroids.
    pub positions: Matrix,
    /// Superpoint side of the factored position bias, M×(6F+5):
    /// `[sin(f·r), cos(f·r), r, 1, |r|²]`.
    ref_factor: Matrix,
}

impl SuperpointContext {
    pub fn new(feats: Var, positions: Matrix) -> Self {
        let fr = fourier_args(&positions);
        let m = positions.rows();
        let width = 2 * FOURIER_COLS + 5;
        let mut ref_factor = Matrix::zeros(m, width);
        for j in 0..m {
            let row = ref_factor.row_mut(j);
            let r = positions.row(j);
            for c in 0..FOURIER_COLS {
                let (sn, cs) = fr.get(j, c).sin_cos();
                row[c] = sn;
                row[FOURIER_COLS + c] = cs;
            }
            row[2 * FOURIER_COLS..2 * FOURIER_COLS + 3].copy_from_slice(r);
            row[width - 2] = 1.0;
            row[width - 1] = r.iter().map(|v| v * v).sum();
        }
        Self {
            feats,
            positions,
            ref_factor,
        }
    }
}

/// `f·x_a` for every frequency `f` and axis `a`, frequency-major.
fn fourier_args(xyz: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(xyz.rows(), FOURIER_COLS);
    for r in 0..xyz.rows() {
        for (k, &f) in FOURIER_FREQS.iter().enumerate() {
            for a in 0..3 {
                out.set(r, 3 * k + a, f * xyz.get(r, a));
            }
        }
    }
    out
}

/// Relative-position attention bias, one S×M block per head:
/// `Σ_{f,a} ws·sin(f·d_a) + wc·cos(f·d_a) + wd·|d|²` with
/// `d = superpoint − query`. The angle-difference identities split every
/// term into query-side and superpoint-side factors, so the S×M×features
/// tensor is never formed.
pub fn position_bias(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &DecoderLayerParams,
    heads: usize,
    query_pos: Var,
    sup: &SuperpointContext,
) -> Result<Vec<Var>> {
    let scaled: Vec<Var> = FOURIER_FREQS.iter().map(|&f| tape.scale(query_pos, f)).collect();
    let fp = tape.concat_cols(&scaled)?;
    let cos_p = tape.cos(fp);
    let sin_p = tape.sin(fp);
    let refs = tape.constant(sup.ref_factor.clone());

    let s = tape.shape(query_pos).0;
    let sq = tape.square(query_pos);
    let pp = tape.sum_rows(sq);
    let minus_2p = tape.scale(query_pos, -2.0);
    let ones = tape.constant(Matrix::from_vec(s, 1, vec![1.0; s]));

    let ws = tape.param(store, layer.pos_sin);
    let wc = tape.param(store, layer.pos_cos);
    let wd = tape.param(store, layer.pos_dist);
    let mut out = Vec::with_capacity(heads);
    for h in 0..heads {
        let ws_h = tape.slice_rows(ws, h, 1)?;
        let wc_h = tape.slice_rows(wc, h, 1)?;
        let wd_h = tape.slice_cols(wd, h, 1)?;
        // sin(f(r−p)) = sin(fr)cos(fp) − cos(fr)sin(fp)
        // cos(f(r−p)) = cos(fr)cos(fp) + sin(fr)sin(fp)
        // |r−p|² = |p|² − 2p·r + |r|²
        let a1 = tape.mul(cos_p, ws_h)?;
        let a2 = tape.mul(sin_p, wc_h)?;
        let a = tape.add(a1, a2)?;
        let b1 = tape.mul(cos_p, wc_h)?;
        let b2 = tape.mul(sin_p, ws_h)?;
        let b = tape.sub(b1, b2)?;
        let d_cross = tape.mul(minus_2p, wd_h)?;
        let d_self = tape.mul(pp, wd_h)?;
        let d_ref = tape.mul(ones, wd_h)?;
        let factor = tape.concat_cols(&[a, b, d_cross, d_self, d_ref])?;
        out.push(tape.matmul_t(factor, refs)?);
    }
    Ok(out)
}

fn multi_head(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    bias: Option<&[Var]>,
    allowed: Option<&[bool]>,
) -> Result<Var> {
    let c = tape.shape(q).1;
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * d, d)?;
        let kh = tape.slice_cols(k, h * d, d)?;
        let vh = tape.slice_cols(v, h * d, d)?;
        let logits = tape.matmul_t(qh, kh)?;
        let mut logits = tape.scale(logits, scale);
        if let Some(bias) = bias {
            logits = tape.add(logits, bias[h])?;
        }
        let attn = match allowed {
            Some(mask) => tape.masked_softmax(logits, mask)?,
            None => tape.softmax(logits),
        };
        outs.push(tape.matmul(attn, vh)?);
    }
    tape.concat_cols(&outs)
}

/// Attention mask from the previous layer's mask logits: a query may attend
/// to superpoints whose probability is at least `threshold`; a query whose
/// mask is empty attends everywhere. `None` when nothing is masked.
pub fn attention_mask(prev_mask_logits: &Matrix, threshold: f64) -> Option<Vec<bool>> {
    let (s, m) = prev_mask_logits.shape();
    let mut allowed = vec![true; s * m];
    let mut any_blocked = false;
    for r in 0..s {
        let row = &mut allowed[r * m..(r + 1) * m];
        let mut n = 0;
        for (a, &l) in row.iter_mut().zip(prev_mask_logits.row(r)) {
            *a = sigmoid(l) >= threshold;
            n += usize::from(*a);
        }
        if n == 0 {
            row.fill(true);
        } else if n < m {
            any_blocked = true;
        }
    }
    any_blocked.then_some(allowed)
}

/// One decoder layer: masked cross-attention to superpoints with a
/// relative-position bias, self-attention among queries, feed-forward, then
/// an additive position update. Pre-norm residual blocks.
///
/// Output rows get fresh lineage ids drawn from `next_id`.
#[allow(clippy::too_many_arguments)]
pub fn decoder_layer(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &DecoderLayerParams,
    heads: usize,
    queries: &QuerySet,
    sup: &SuperpointContext,
    allowed: Option<&[bool]>,
    next_id: &mut u64,
) -> Result<QuerySet> {
    let x = queries.content;

    let h = layer.cross_norm.forward(tape, store, x)?;
    let wq = tape.param(store, layer.cross.q);
    let wk = tape.param(store, layer.cross.k);
    let wv = tape.param(store, layer.cross.v);
    let q = tape.matmul(h, wq)?;
    let k = tape.matmul(sup.feats, wk)?;
    let v = tape.matmul(sup.feats, wv)?;
    let bias = position_bias(tape, store, layer, heads, queries.positions, sup)?;
    let attn = multi_head(tape, q, k, v, heads, Some(&bias), allowed)?;
    let attn = layer.cross.o.forward(tape, store, attn)?;
    let x = tape.add(x, attn)?;

    let h = layer.self_norm.forward(tape, store, x)?;
    let wq = tape.param(store, layer.self_attn.q);
    let wk = tape.param(store, layer.self_attn.k);
    let wv = tape.param(store, layer.self_attn.v);
    let q = tape.matmul(h, wq)?;
    let k = tape.matmul(h, wk)?;
    let v = tape.matmul(h, wv)?;
    let attn = multi_head(tape, q, k, v, heads, None, None)?;
    let attn = layer.self_attn.o.forward(tape, store, attn)?;
    let x = tape.add(x, attn)?;

    let h = layer.ffn_norm.forward(tape, store, x)?;
    let h = layer.ffn1.forward(tape, store, h)?;
    let h = tape.relu(h);
    let h = layer.ffn2.forward(tape, store, h)?;
    let x = tape.add(x, h)?;

    let d = layer.pos1.forward(tape, store, x)?;
    let d = tape.relu(d);
    let d = layer.pos2.forward(tape, store, d)?;
    let positions = tape.add(queries.positions, d)?;

    let n = queries.len() as u64;
    let lineage = (*next_id..*next_id + n).collect();
    *next_id += n;
    Ok(QuerySet {
        positions,
        content: x,
        lineage,
        origin: queries.origin.clone(),
    })
}

/// Tape handles of one layer's predictions.
#[derive(Clone, Copy, Debug)]
pub struct PredictionVars {
    /// S'×(C_cls+1).
    pub class_logits: Var,
    /// S'×M.
    pub mask_logits: Var,
    /// S'×3.
    pub centers: Var,
    /// S'×1 in [0, 1].
    pub scores: Var,
}

/// Plain values of one layer's predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerPrediction {
    pub class_logits: Matrix,
    pub mask_logits: Matrix,
    pub centers: Matrix,
    pub scores: Vec<f64>,
    pub lineage: Vec<u64>,
    pub origin: Vec<usize>,
}

impl LayerPrediction {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn binary_masks(&self, threshold: f64) -> BinaryMasks {
        binarize(&self.mask_logits, threshold)
    }
}

/// Class, mask, center and score predictions for every query.
pub fn predict(
    tape: &mut Tape,
    store: &ParamStore,
    heads: &PredictionHeads,
    queries: &QuerySet,
    sup_feats: Var,
) -> Result<(PredictionVars, LayerPrediction)> {
    let h = heads.norm.forward(tape, store, queries.content)?;
    let class_logits = heads.cls.forward(tape, store, h)?;
    let e = heads.mask1.forward(tape, store, h)?;
    let e = tape.relu(e);
    let e = heads.mask2.forward(tape, store, e)?;
    let mask_logits = tape.matmul_t(e, sup_feats)?;
    let s = heads.score1.forward(tape, store, h)?;
    let s = tape.relu(s);
    let s = heads.score2.forward(tape, store, s)?;
    let scores = tape.sigmoid(s);
    let vars = PredictionVars {
        class_logits,
        mask_logits,
        centers: queries.positions,
        scores,
    };
    let pred = LayerPrediction {
        class_logits: tape.value(class_logits).clone(),
        mask_logits: tape.value(mask_logits).clone(),
        centers: tape.value(queries.positions).clone(),
        scores: tape.value(scores).as_slice().to_vec(),
        lineage: queries.lineage.clone(),
        origin: queries.origin.clone(),
    };
    Ok((vars, pred))
}

/// Output of one decoder layer.
#[derive(Clone, Debug)]
pub struct LayerOutput {
    /// Queries entering the layer (after any fusion).
    pub input: QuerySet,
    pub output: QuerySet,
    pub vars: PredictionVars,
    pub pred: LayerPrediction,
    /// Indices into the previous layer's input that were carried into this
    /// layer's input.
    pub retained: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub layers: Vec<LayerOutput>,
}

impl DecoderOutput {
    pub fn query_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.pred.len()).collect()
    }

    pub fn last(&self) -> &LayerOutput {
        self.layers.last().expect("decoder has at least one layer")
    }
}

/// Runs every layer in order.
///
/// Layer 1 attends without a mask; layer `l > 1` masks its cross-attention
/// with the mask predictions of its own input queries. When the transition
/// `l → l+1` fuses, the masks of layer `l`'s input are compared with the
/// masks of layer `l`'s output, the `D1` input queries with the lowest
/// maximum IoU are retained, and they are appended to layer `l+1`'s input.
pub fn run_decoder(
    tape: &mut Tape,
    store: &ParamStore,
    model: &DecoderModel,
    init: QuerySet,
    sup: &SuperpointContext,
) -> Result<DecoderOutput> {
    let cfg = &model.cfg;
    let thr = cfg.mask_bin_threshold;
    let mut next_id = init.lineage.iter().max().map_or(0, |m| m + 1);
    let mut input = init;
    // Mask logits of the current input queries, when known.
    let mut input_masks: Option<Matrix> = None;
    let mut retained_into_input = Vec::new();
    let mut layers = Vec::with_capacity(cfg.num_layers);

    for (l, params) in model.layers.iter().enumerate() {
        let layer_no = l + 1;
        let allowed = match (&input_masks, layer_no) {
            (Some(m), n) if n > 1 => attention_mask(m, thr),
            _ => None,
        };
        let output = decoder_layer(
            tape,
            store,
            params,
            cfg.heads,
            &input,
            sup,
            allowed.as_deref(),
            &mut next_id,
        )?;
        let (vars, pred) = predict(tape, store, &model.heads, &output, sup.feats)?;

        let mut next_input = output.clone();
        let mut next_masks = pred.mask_logits.clone();
        let mut retained = Vec::new();
        if fuses_into(layer_no + 1, cfg.num_layers, cfg.d2, cfg.fusion) {
            let in_masks = match &input_masks {
                Some(m) => m.clone(),
                None => predict(tape, store, &model.heads, &input, sup.feats)?.1.mask_logits,
            };
            let before = binarize(&in_masks, thr);
            let after = binarize(&pred.mask_logits, thr);
            let iou = pairwise_mask_iou(&before, &after)?;
            let overlap = max_overlap(&iou)?;
            retained = bottom_k(&overlap, cfg.d1);
            next_input = fuse(tape, &input, &output, &retained)?;
            next_masks = Matrix::vstack(&[&pred.mask_logits, &in_masks.select_rows(&retained)]);
        }

        layers.push(LayerOutput {
            input: std::mem::replace(&mut input, next_input),
            output,
            vars,
            pred,
            retained: std::mem::take(&mut retained_into_input),
        });
        retained_into_input = retained;
        input_masks = Some(next_masks);
    }
    Ok(DecoderOutput { layers })
}
