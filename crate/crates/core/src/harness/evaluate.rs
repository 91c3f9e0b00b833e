//! Inference over a dataset and the metric files it produces.

use std::fs;
use std::path::Path;

use super::model::{forward, Model, PreparedScene};
use super::Config;
use crate::autodiff::{checkpoint, Tape};
use crate::error::{Error, Result};
use crate::eval::{
    final_instances, fps_center_distance, nms, per_layer_diagnostics, recall_chart_svg, write_metrics_csv,
    FinalInstance, LayerMetrics, Metrics, MetricsRow,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    pub per_layer: bool,
    pub nms: bool,
    /// Pool every layer's instances before suppression.
    pub coe: bool,
}

impl EvalOptions {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            per_layer: true,
            nms: cfg.nms,
            coe: cfg.coe,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SceneEval {
    pub name: String,
    pub query_counts: Vec<usize>,
    /// Final output: last layer, or all layers pooled in COE mode.
    pub final_metrics: Metrics,
    /// One entry per layer when requested.
    pub per_layer: Vec<LayerMetrics>,
    pub fps_center_distance: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub scenes: Vec<SceneEval>,
    /// Means over scenes.
    pub final_metrics: Metrics,
    pub per_layer: Vec<Metrics>,
    pub fps_center_distance: [f64; 3],
}

impl EvalReport {
    pub fn per_layer_recall(&self) -> Vec<f64> {
        self.per_layer.iter().map(|m| m.recall50).collect()
    }
}

fn postprocess(inst: Vec<FinalInstance>, cfg: &Config, use_nms: bool) -> Vec<FinalInstance> {
    let kept: Vec<FinalInstance> = inst.into_iter().filter(|i| i.score >= cfg.score_floor).collect();
    if use_nms {
        nms(&kept, cfg.nms_threshold)
    } else {
        kept
    }
}

pub fn evaluate_scene(model: &Model, scene: &PreparedScene, cfg: &Config, opts: EvalOptions) -> Result<SceneEval> {
    let mut tape = Tape::new();
    let out = forward(&mut tape, model, scene, cfg)?;
    let thr = cfg.decoder.mask_bin_threshold;
    let layers = &out.decoder.layers;
    let per_layer_inst: Vec<Vec<FinalInstance>> = layers
        .iter()
        .map(|l| {
            let inst = final_instances(&l.pred, &scene.partition, thr);
            inst.into_iter().filter(|i| i.score >= cfg.score_floor).collect()
        })
        .collect();
    let query_counts = out.decoder.query_counts();

    let final_inst = if opts.coe {
        // Pooled outputs are always suppressed; without it every layer's copy
        // of an object would count as a duplicate.
        postprocess(per_layer_inst.concat(), cfg, true)
    } else {
        postprocess(per_layer_inst.last().cloned().unwrap_or_default(), cfg, opts.nms)
    };
    let final_metrics = Metrics::compute(&final_inst, &scene.eval_gts);
    let per_layer = if opts.per_layer {
        let thr = opts.nms.then_some(cfg.nms_threshold);
        per_layer_diagnostics(&per_layer_inst, &query_counts, &scene.eval_gts, thr)
    } else {
        Vec::new()
    };
    let last = out.decoder.last();
    Ok(SceneEval {
        name: scene.name.clone(),
        query_counts,
        final_metrics,
        per_layer,
        fps_center_distance: fps_center_distance(&out.init.sample_positions, &last.pred),
    })
}

pub fn evaluate_model(model: &Model, data: &[PreparedScene], cfg: &Config, opts: EvalOptions) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Argument("evaluation set is empty".into()));
    }
    let scenes = data
        .iter()
        .map(|s| evaluate_scene(model, s, cfg, opts))
        .collect::<Result<Vec<_>>>()?;
    let finals: Vec<Metrics> = scenes.iter().map(|s| s.final_metrics).collect();
    let layers = scenes[0].per_layer.len();
    let per_layer = (0..layers)
        .map(|l| {
            let ms: Vec<Metrics> = scenes.iter().map(|s| s.per_layer[l].metrics).collect();
            Metrics::mean(&ms)
        })
        .collect();
    let n = scenes.len() as f64;
    let mut dist = [0.0; 3];
    for s in &scenes {
        for (d, v) in dist.iter_mut().zip(s.fps_center_distance) {
            *d += v / n;
        }
    }
    Ok(EvalReport {
        final_metrics: Metrics::mean(&finals),
        per_layer,
        fps_center_distance: dist,
        scenes,
    })
}

/// Builds the model described by `cfg` and loads `checkpoint_path` into it.
pub fn load_model(cfg: &Config, checkpoint_path: &Path) -> Result<Model> {
    let mut model = Model::new(cfg, cfg.seed)?;
    checkpoint::load(checkpoint_path, &mut model.store)?;
    Ok(model)
}

pub const METRICS_CSV: &str = "metrics.csv";
pub const DIAGNOSTICS_CSV: &str = "per_layer.csv";
pub const RECALL_SVG: &str = "recall_by_layer.svg";
pub const SUMMARY_TXT: &str = "summary.txt";

/// Writes `metrics.csv` (final output per scene), and with per-layer data
/// `per_layer.csv` and a recall chart, plus a short summary.
pub fn write_eval_outputs(report: &EvalReport, cfg: &Config, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let final_layer = cfg.decoder.num_layers;
    let rows: Vec<MetricsRow> = report
        .scenes
        .iter()
        .map(|s| MetricsRow {
            scene: s.name.clone(),
            layer: final_layer,
            query_count: s.query_counts.last().copied().unwrap_or(0),
            metrics: s.final_metrics,
        })
        .collect();
    write_metrics_csv(&dir.join(METRICS_CSV), &rows)?;

    if !report.per_layer.is_empty() {
        let rows: Vec<MetricsRow> = report
            .scenes
            .iter()
            .flat_map(|s| s.per_layer.iter().map(|l| MetricsRow::from_layer(&s.name, l)))
            .collect();
        write_metrics_csv(&dir.join(DIAGNOSTICS_CSV), &rows)?;
        let svg = recall_chart_svg(&[("ALL".to_string(), report.per_layer_recall())]);
        let p = dir.join(RECALL_SVG);
        fs::write(&p, svg).map_err(|e| Error::io(&p, e))?;
    }

    let m = report.final_metrics;
    let d = report.fps_center_distance;
    let summary = format!(
        "scenes = {}\nmap = {:.6}\nap50 = {:.6}\nap25 = {:.6}\nrecall50 = {:.6}\nfps_center_distance = {:.6} {:.6} {:.6}\n",
        report.scenes.len(),
        m.map,
        m.ap50,
        m.ap25,
        m.recall50,
        d[0],
        d[1],
        d[2]
    );
    let p = dir.join(SUMMARY_TXT);
    fs::write(&p, summary).map_err(|e| Error::io(&p, e))
}
