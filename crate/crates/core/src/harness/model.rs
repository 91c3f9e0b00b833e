//! Scene preparation and the full forward pass.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Config;
use crate::agent_init::{init_queries, AgentSet, InitOptions, InitOutput};
use crate::autodiff::{Matrix, ParamStore, Tape};
use crate::decoder::{encode_points, run_decoder, DecoderModel, DecoderOutput, SuperpointContext};
use crate::error::{Error, Result};
use crate::eval::{eval_gts, EvalGt};
use crate::matching::{gts_from_scene, GroundTruthInstance};
use crate::scene::{build_superpoints, load_scene, pool_features, pool_values, voxelize, Scene, SuperpointPartition};
use crate::util::Fnv64;

/// A scene after voxelization, with its superpoints and ground truth.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub name: String,
    pub scene: Scene,
    pub partition: SuperpointPartition,
    /// M×3 superpoint centroids.
    pub sup_positions: Matrix,
    pub gts: Vec<GroundTruthInstance>,
    pub eval_gts: Vec<EvalGt>,
}

pub fn prepare_scene(name: &str, scene: &Scene, cfg: &Config) -> Result<PreparedScene> {
    if scene.num_classes != cfg.decoder.num_classes {
        return Err(Error::Config(format!(
            "scene {name} has {} classes, config expects {}",
            scene.num_classes, cfg.decoder.num_classes
        )));
    }
    let scene = voxelize(scene, cfg.voxel_size)?;
    let partition = build_superpoints(&scene, cfg.grid_size)?;
    let sup_positions = pool_values(&scene.positions, &partition)?;
    let gts = gts_from_scene(&scene, &partition)?;
    let eval_gts = eval_gts(&scene);
    Ok(PreparedScene {
        name: name.to_string(),
        scene,
        partition,
        sup_positions,
        gts,
        eval_gts,
    })
}

/// Scene files of a dataset directory, sorted by name.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub names: Vec<String>,
    pub scenes: Vec<Scene>,
    /// Hash over file names and contents.
    pub checksum: u64,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().is_some_and(|x| x == "txt") {
                files.push(path);
            }
        }
        files.sort();
        if files.is_empty() {
            return Err(Error::Argument(format!("{}: no scene files (*.txt)", dir.display())));
        }
        let mut hash = Fnv64::new();
        let mut names = Vec::with_capacity(files.len());
        let mut scenes = Vec::with_capacity(files.len());
        for f in &files {
            let bytes = fs::read(f).map_err(|e| Error::io(f, e))?;
            let name = f.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
            hash.write(name.as_bytes());
            hash.write(&bytes);
            scenes.push(load_scene(f)?);
            names.push(name);
        }
        Ok(Self {
            names,
            scenes,
            checksum: hash.finish(),
        })
    }

    pub fn prepare(&self, cfg: &Config) -> Result<Vec<PreparedScene>> {
        self.names
            .iter()
            .zip(&self.scenes)
            .map(|(n, s)| prepare_scene(n, s, cfg))
            .collect()
    }
}

/// Parameters of every trainable component.
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub agents: AgentSet,
    pub decoder: DecoderModel,
}

impl Model {
    /// Fresh parameters drawn from `seed`. Agents are always created, so
    /// models that differ only in how queries are initialized start from
    /// identical weights.
    pub fn new(cfg: &Config, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let agents = AgentSet::init(&mut store, cfg.agents, cfg.decoder.hidden_dim, &mut rng)?;
        let decoder = DecoderModel::new(&mut store, cfg.decoder.clone(), &mut rng)?;
        Ok(Self {
            store,
            agents,
            decoder,
        })
    }

    pub fn init_options(cfg: &Config) -> InitOptions {
        InitOptions {
            samples: cfg.samples,
            k: cfg.k,
            seed: cfg.seed,
            mode: cfg.init_mode,
            straight_through: cfg.straight_through,
        }
    }
}

pub struct ForwardOutput {
    pub init: InitOutput,
    pub decoder: DecoderOutput,
}

/// Encoder, pooling, query initialization and decoder for one scene.
pub fn forward(tape: &mut Tape, model: &Model, scene: &PreparedScene, cfg: &Config) -> Result<ForwardOutput> {
    let store = &model.store;
    let feats = encode_points(tape, store, &model.decoder.encoder, &scene.scene)?;
    let sup_feats = pool_features(tape, feats, &scene.partition)?;
    let ctx = SuperpointContext::new(sup_feats, scene.sup_positions.clone());
    let init = init_queries(tape, store, &scene.scene, &model.agents, &Model::init_options(cfg))?;
    let decoder = run_decoder(tape, store, &model.decoder, init.queries.clone(), &ctx)?;
    Ok(ForwardOutput { init, decoder })
}
