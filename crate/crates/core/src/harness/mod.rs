//! Dataset generation, configuration, training, evaluation and ablations.

mod ablate;
mod config;
mod evaluate;
mod model;
mod synth;
mod train;

pub use ablate::{
    ablate, cell_config, cell_dir, cell_dir_name, dataset_pair_checksum, format_ablation_csv, mean_rows, training_cells,
    write_ablation_csv, AblationGrid, AblationRow, ABLATION_CSV, ABLATION_HEADER,
};
pub use config::Config;
pub use model::{forward, prepare_scene, Dataset, ForwardOutput, Model, PreparedScene};
pub use synth::{class_shape, generate_scenes, generate_synthetic, scene_file_name, Shape, SyntheticSpec, MAX_CLASSES};
pub use train::{
    augment, checkpoint_name, epoch_order, format_train_log, train, train_step, EpochLog, TrainOptions, TrainOutcome,
    FINAL_CHECKPOINT, TRAIN_LOG, TRAIN_LOG_HEADER,
};
pub use evaluate::{
    evaluate_model, evaluate_scene, load_model, write_eval_outputs, EvalOptions, EvalReport, SceneEval,
    DIAGNOSTICS_CSV, METRICS_CSV, RECALL_SVG, SUMMARY_TXT,
};
