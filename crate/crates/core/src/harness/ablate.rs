//! Component ablations: every grid cell is trained and evaluated with
//! shared seeds and data so rows can be compared directly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::evaluate::{evaluate_model, EvalOptions};
use super::model::{Dataset, Model, PreparedScene};
use super::train::{train, TrainOptions};
use super::Config;
use crate::agent_init::InitMode;
use crate::error::{Error, Result};
use crate::eval::Metrics;
use crate::util::Fnv64;

/// Toggles crossed by [`ablate`]. `nms` is evaluation-only; the others each
/// need their own training run.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    pub init_modes: Vec<InitMode>,
    pub hqfd: Vec<bool>,
    pub nms: Vec<bool>,
    /// Adds one row pooling all layers of the first init mode's
    /// fusion-free model.
    pub coe: bool,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            init_modes: vec![InitMode::Agent, InitMode::FpsZero],
            hqfd: vec![true, false],
            nms: vec![true, false],
            coe: true,
        }
    }
}

pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_HEADER: &str =
    "seed,init_mode,hqfd,nms,coe,map,ap50,ap25,recall50,dataset_checksum,param_checksum";

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    /// `None` for the mean over seeds.
    pub seed: Option<u64>,
    pub init_mode: InitMode,
    pub hqfd: bool,
    pub nms: bool,
    pub coe: bool,
    pub metrics: Metrics,
    pub dataset_checksum: u64,
    pub param_checksum: u64,
}

impl AblationRow {
    fn same_cell(&self, o: &AblationRow) -> bool {
        (self.init_mode, self.hqfd, self.nms, self.coe) == (o.init_mode, o.hqfd, o.nms, o.coe)
    }
}

/// Config of one training cell.
pub fn cell_config(base: &Config, seed: u64, init_mode: InitMode, hqfd: bool) -> Config {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.init_mode = init_mode;
    cfg.decoder.fusion = hqfd;
    cfg
}

pub fn cell_dir_name(seed: u64, init_mode: InitMode, hqfd: bool) -> String {
    format!("seed{seed}_{init_mode}_hqfd-{}", if hqfd { "on" } else { "off" })
}

/// Training cells in run order: every (init mode, hqfd) pair, plus the
/// fusion-free model COE needs when the grid lacks it.
pub fn training_cells(grid: &AblationGrid) -> Vec<(InitMode, bool)> {
    let mut cells: Vec<(InitMode, bool)> = grid
        .init_modes
        .iter()
        .flat_map(|&m| grid.hqfd.iter().map(move |&h| (m, h)))
        .collect();
    if grid.coe {
        if let Some(&first) = grid.init_modes.first() {
            if !cells.contains(&(first, false)) {
                cells.push((first, false));
            }
        }
    }
    cells
}

/// Checksum over both datasets; equal across all rows of one ablation.
pub fn dataset_pair_checksum(train: &Dataset, eval: &Dataset) -> u64 {
    let mut h = Fnv64::new();
    h.write(&train.checksum.to_le_bytes());
    h.write(&eval.checksum.to_le_bytes());
    h.finish()
}

/// Runs the grid for `ablation_seeds` consecutive seeds starting at
/// `base.seed`. Per-cell checkpoints and logs go under `out/cells` when
/// `out` is given. Returns per-seed rows followed by mean rows.
pub fn ablate(base: &Config, train_set: &Dataset, eval_set: &Dataset, out: Option<&Path>) -> Result<Vec<AblationRow>> {
    let grid = &base.ablation;
    if grid.init_modes.is_empty() || grid.hqfd.is_empty() || grid.nms.is_empty() {
        return Err(Error::Config("ablation grid has an empty axis".into()));
    }
    let train_data: Vec<PreparedScene> = train_set.prepare(base)?;
    let eval_data: Vec<PreparedScene> = eval_set.prepare(base)?;
    let data_sum = dataset_pair_checksum(train_set, eval_set);

    let mut rows = Vec::new();
    for s in 0..base.ablation_seeds as u64 {
        let seed = base.seed.wrapping_add(s);
        for (init_mode, hqfd) in training_cells(grid) {
            let cfg = cell_config(base, seed, init_mode, hqfd);
            let param_checksum = Model::new(&cfg, seed)?.store.checksum();
            let opts = TrainOptions {
                out_dir: out.map(|d| cell_dir(d, seed, init_mode, hqfd)),
                resume: None,
            };
            let model = train(&cfg, &train_data, &opts)?.model;
            let row = |nms: bool, coe: bool, metrics: Metrics| AblationRow {
                seed: Some(seed),
                init_mode,
                hqfd,
                nms,
                coe,
                metrics,
                dataset_checksum: data_sum,
                param_checksum,
            };
            let in_grid = grid.init_modes.contains(&init_mode) && grid.hqfd.contains(&hqfd);
            if in_grid {
                for &nms in &grid.nms {
                    let opts = EvalOptions { per_layer: false, nms, coe: false };
                    let m = evaluate_model(&model, &eval_data, &cfg, opts)?.final_metrics;
                    rows.push(row(nms, false, m));
                }
            }
            if grid.coe && !hqfd && Some(&init_mode) == grid.init_modes.first() {
                let opts = EvalOptions { per_layer: false, nms: true, coe: true };
                let m = evaluate_model(&model, &eval_data, &cfg, opts)?.final_metrics;
                rows.push(row(true, true, m));
            }
        }
    }
    let means = mean_rows(&rows);
    rows.extend(means);
    if let Some(dir) = out {
        write_ablation_csv(&dir.join(ABLATION_CSV), &rows)?;
    }
    Ok(rows)
}

/// One row per cell averaging its per-seed rows, in first-seen order.
pub fn mean_rows(rows: &[AblationRow]) -> Vec<AblationRow> {
    let mut out: Vec<AblationRow> = Vec::new();
    for r in rows.iter().filter(|r| r.seed.is_some()) {
        if out.iter().any(|o| o.same_cell(r)) {
            continue;
        }
        let group: Vec<&AblationRow> = rows.iter().filter(|o| o.seed.is_some() && o.same_cell(r)).collect();
        let metrics: Vec<Metrics> = group.iter().map(|g| g.metrics).collect();
        let first_sum = group[0].param_checksum;
        out.push(AblationRow {
            seed: None,
            metrics: Metrics::mean(&metrics),
            // Seeds differ, so only a shared checksum is meaningful.
            param_checksum: if group.iter().all(|g| g.param_checksum == first_sum) { first_sum } else { 0 },
            ..r.clone()
        });
    }
    out
}

pub fn format_ablation_csv(rows: &[AblationRow]) -> String {
    let sw = |b: bool| if b { "on" } else { "off" };
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:016x},{:016x}",
            r.seed.map_or_else(|| "mean".to_string(), |s| s.to_string()),
            r.init_mode,
            sw(r.hqfd),
            sw(r.nms),
            sw(r.coe),
            m.map,
            m.ap50,
            m.ap25,
            m.recall50,
            r.dataset_checksum,
            r.param_checksum
        );
    }
    out
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    fs::write(path, format_ablation_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Directory of a training cell under an ablation output directory.
pub fn cell_dir(out: &Path, seed: u64, init_mode: InitMode, hqfd: bool) -> PathBuf {
    out.join("cells").join(cell_dir_name(seed, init_mode, hqfd))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_toggles_give_four_cells_and_coe() {
        let grid = AblationGrid {
            init_modes: vec![InitMode::Agent, InitMode::FpsZero],
            hqfd: vec![true, false],
            nms: vec![true],
            coe: true,
        };
        assert_eq!(training_cells(&grid).len(), 4);
        let only_on = AblationGrid { hqfd: vec![true], ..grid };
        assert_eq!(training_cells(&only_on).last(), Some(&(InitMode::Agent, false)));
    }

    #[test]
    fn means_group_by_cell() {
        let m = |v: f64| Metrics { map: v, ap50: v, ap25: v, recall50: v };
        let r = |seed: u64, nms: bool, v: f64| AblationRow {
            seed: Some(seed),
            init_mode: InitMode::Agent,
            hqfd: true,
            nms,
            coe: false,
            metrics: m(v),
            dataset_checksum: 7,
            param_checksum: seed,
        };
        let rows = [r(0, true, 0.2), r(0, false, 0.1), r(1, true, 0.4), r(1, false, 0.3)];
        let means = mean_rows(&rows);
        assert_eq!(means.len(), 2);
        assert!((means[0].metrics.ap25 - 0.3).abs() < 1e-12);
        assert!((means[1].metrics.ap25 - 0.2).abs() < 1e-12);
        assert_eq!(means[0].param_checksum, 0);
        let csv = format_ablation_csv(&means);
        assert!(csv.lines().nth(1).unwrap().starts_with("mean,agent,on,on,off,"));
    }
}
