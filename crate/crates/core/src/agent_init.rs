//! Query initialization from trainable agents.
//!
//! A fixed set of `L` agents carries normalized positions in `[0,1]³` and
//! content embeddings shared across all scenes. For a given scene the agent
//! positions are stretched to the scene's bounding box, every farthest-point
//! sample finds its `K` nearest agents, and the sample's content query is
//! the inverse-distance blend of those agents' contents. The sample
//! position itself is used as the position query, but its gradient is
//! rerouted through the same blend of agent positions so the agent
//! positions keep learning.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Matrix, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::scene::{fps, knn, Neighbors, Scene};

/// Added to every distance before inversion so a sample that coincides
/// with an agent gets (almost) all of the weight instead of dividing by 0.
pub const WEIGHT_EPS: f64 = 1e-8;

/// Trainable agents: `positions_norm` (L×3 in `[0,1]`) and `content` (L×C).
#[derive(Clone, Copy, Debug)]
pub struct AgentSet {
    pub positions_norm: ParamId,
    pub content: ParamId,
    pub len: usize,
    pub dim: usize,
}

impl AgentSet {
    /// Uniform positions in `[0,1]³`, content drawn from N(0, 0.02²).
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        len: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if len == 0 {
            return Err(Error::Argument("agent count must be >= 1".into()));
        }
        let positions_norm = store.uniform("agent.positions_norm", len, 3, 0.0, 1.0, rng)?;
        let content = store.normal("agent.content", len, dim, 0.02, rng)?;
        Ok(Self {
            positions_norm,
            content,
            len,
            dim,
        })
    }

    /// Projects agent positions back into `[0,1]`. Call after every
    /// optimizer step.
    pub fn clamp(&self, store: &mut ParamStore) {
        for v in store.value_mut(self.positions_norm).as_mut_slice() {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Position and content queries on a tape, with provenance.
#[derive(Clone, Debug)]
pub struct QuerySet {
    /// S'×3, meters.
    pub positions: Var,
    /// S'×C.
    pub content: Var,
    /// Unique id per row. Rows created by a decoder layer get fresh ids;
    /// rows carried over by fusion keep theirs.
    pub lineage: Vec<u64>,
    /// Index of the initial query each row descends from.
    pub origin: Vec<usize>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.lineage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lineage.is_empty()
    }
}

/// Stretches normalized agent positions to the box `[p_min, p_max]`.
pub fn refine_agent_positions(
    tape: &mut Tape,
    positions_norm: Var,
    p_min: [f64; 3],
    p_max: [f64; 3],
) -> Result<Var> {
    if (0..3).any(|a| p_max[a] < p_min[a]) {
        return Err(Error::Argument(format!(
            "scene bounds inverted: min {p_min:?}, max {p_max:?}"
        )));
    }
    let extent = tape.constant(Matrix::from_rows(&[[
        p_max[0] - p_min[0],
        p_max[1] - p_min[1],
        p_max[2] - p_min[2],
    ]]));
    let offset = tape.constant(Matrix::from_rows(&[p_min]));
    let scaled = tape.mul(positions_norm, extent)?;
    tape.add(scaled, offset)
}

/// Normalized inverse-distance weights, `W[i,j] ∝ 1/(dis[i,j] + ε)`.
pub fn interpolation_weights(dis: &Matrix) -> Matrix {
    let mut w = dis.map(|d| 1.0 / (d + WEIGHT_EPS));
    for r in 0..w.rows() {
        let row = w.row_mut(r);
        let total: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    w
}

/// `out[i] = Σ_j W[i,j] · table[idx[i,j]]`, differentiable in `table`.
/// `W` and `idx` are constants.
pub fn interpolate_rows(
    tape: &mut Tape,
    table: Var,
    weights: &Matrix,
    neighbors: &Neighbors,
) -> Result<Var> {
    let (s, k) = weights.shape();
    if neighbors.k != k || neighbors.idx.len() != s * k {
        return Err(Error::shape(
            "interpolate",
            format!("weights {s}x{k}, neighbours {}x{}", neighbors.idx.len() / neighbors.k.max(1), neighbors.k),
        ));
    }
    let gathered = tape.gather_rows(table, &neighbors.idx)?;
    let segment: Vec<usize> = (0..s).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    tape.scatter_weighted_sum(gathered, &segment, weights.as_slice(), s)
}

/// Content queries blended from agent content.
pub fn interpolate_content(
    tape: &mut Tape,
    content: Var,
    weights: &Matrix,
    neighbors: &Neighbors,
) -> Result<Var> {
    interpolate_rows(tape, content, weights, neighbors)
}

/// Position queries whose values are exactly `sampled` and whose gradient
/// flows into `refined` (the stretched agent positions) through the
/// inverse-distance blend. `sampled` itself receives no gradient.
pub fn straight_through_positions(
    tape: &mut Tape,
    sampled: Var,
    refined: Var,
    weights: &Matrix,
    neighbors: &Neighbors,
) -> Result<Var> {
    let blended = interpolate_rows(tape, refined, weights, neighbors)?;
    tape.straight_through(sampled, blended)
}

/// How the initial queries are formed.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum InitMode {
    /// Sampled positions, agent-interpolated content.
    Agent,
    /// Sampled positions, zero content.
    FpsZero,
    /// Agent positions and agent content directly; no sampling.
    Learnable,
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "agent" => Ok(Self::Agent),
            "fps_zero" => Ok(Self::FpsZero),
            "learnable" => Ok(Self::Learnable),
            other => Err(Error::Config(format!(
                "init_mode must be agent|fps_zero|learnable, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Agent => "agent",
            Self::FpsZero => "fps_zero",
            Self::Learnable => "learnable",
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct InitOptions {
    pub samples: usize,
    pub k: usize,
    pub seed: u64,
    pub mode: InitMode,
    /// Route the position gradient to the agents. When false the sampled
    /// positions enter as plain constants.
    pub straight_through: bool,
}

/// Everything produced while forming the initial queries.
#[derive(Clone, Debug)]
pub struct InitOutput {
    pub queries: QuerySet,
    /// FPS indices into the scene (empty in [`InitMode::Learnable`]).
    pub sample_idx: Vec<usize>,
    /// S×3 sampled coordinates (agent positions in learnable mode).
    pub sample_positions: Matrix,
    pub weights: Option<Matrix>,
    pub neighbors: Option<Neighbors>,
    pub p_min: [f64; 3],
    pub p_max: [f64; 3],
}

/// Builds the initial [`QuerySet`] for one scene on `tape`.
pub fn init_queries(
    tape: &mut Tape,
    store: &ParamStore,
    scene: &Scene,
    agents: &AgentSet,
    opts: &InitOptions,
) -> Result<InitOutput> {
    let (p_min, p_max) = scene.bounds();
    let pos_norm = tape.param(store, agents.positions_norm);
    let refined = refine_agent_positions(tape, pos_norm, p_min, p_max)?;

    if opts.mode == InitMode::Learnable {
        let content = tape.param(store, agents.content);
        let n = agents.len;
        return Ok(InitOutput {
            sample_positions: tape.value(refined).clone(),
            queries: QuerySet {
                positions: refined,
                content,
                lineage: (0..n as u64).collect(),
                origin: (0..n).collect(),
            },
            sample_idx: Vec::new(),
            weights: None,
            neighbors: None,
            p_min,
            p_max,
        });
    }

    let sample_idx = fps(&scene.positions, opts.samples, opts.seed);
    let sampled = scene.positions.select_rows(&sample_idx);
    let s = sample_idx.len();
    let sampled_var = tape.constant(sampled.clone());

    let (positions, content, weights, neighbors) = match opts.mode {
        InitMode::FpsZero => {
            let content = tape.constant(Matrix::zeros(s, agents.dim));
            (sampled_var, content, None, None)
        }
        _ => {
            let nb = knn(&sampled, tape.value(refined), opts.k)?;
            let w = interpolation_weights(&nb.dis);
            let agent_content = tape.param(store, agents.content);
            let content = interpolate_content(tape, agent_content, &w, &nb)?;
            let positions = if opts.straight_through {
                straight_through_positions(tape, sampled_var, refined, &w, &nb)?
            } else {
                sampled_var
            };
            (positions, content, Some(w), Some(nb))
        }
    };

    Ok(InitOutput {
        queries: QuerySet {
            positions,
            content,
            lineage: (0..s as u64).collect(),
            origin: (0..s).collect(),
        },
        sample_idx,
        sample_positions: sampled,
        weights,
        neighbors,
        p_min,
        p_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refinement_corners_and_midpoint() {
        let mut tape = Tape::new();
        let pn = tape.constant(Matrix::from_rows(&[
            [0.0, 0.0, 0.0],
            [1.0, 1.0, 1.0],
            [0.5, 0.5, 0.5],
        ]));
        let out = refine_agent_positions(&mut tape, pn, [0.0; 3], [2.0; 3]).unwrap();
        let v = tape.value(out);
        assert_eq!(v.row(0), &[0.0; 3]);
        assert_eq!(v.row(1), &[2.0; 3]);
        assert_eq!(v.row(2), &[1.0; 3]);

        let out = refine_agent_positions(&mut tape, pn, [-1.0, 2.0, 0.5], [3.0, 2.5, 0.5]).unwrap();
        assert_eq!(tape.value(out).row(0), &[-1.0, 2.0, 0.5]);
        assert_eq!(tape.value(out).row(1), &[3.0, 2.5, 0.5]);
        assert!(refine_agent_positions(&mut tape, pn, [1.0; 3], [0.0; 3]).is_err());
    }

    #[test]
    fn weight_examples() {
        let w = interpolation_weights(&Matrix::from_rows(&[[1.0, 1.0, 1.0]]));
        for &v in w.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let w = interpolation_weights(&Matrix::from_rows(&[[1.0, 3.0]]));
        assert!((w.get(0, 0) - 0.75).abs() < 1e-8);
        assert!((w.get(0, 1) - 0.25).abs() < 1e-8);
        let w = interpolation_weights(&Matrix::from_rows(&[[0.0, 5.0]]));
        assert!(w.get(0, 0) >= 1.0 - 1e-7);
    }

    #[test]
    fn single_neighbor_copies_content() {
        let mut tape = Tape::new();
        let table = tape.constant(Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        let nb = Neighbors {
            dis: Matrix::from_rows(&[[0.3], [0.1]]),
            idx: vec![1, 0],
            k: 1,
        };
        let w = interpolation_weights(&nb.dis);
        let out = interpolate_content(&mut tape, table, &w, &nb).unwrap();
        assert_eq!(tape.value(out), &Matrix::from_rows(&[[3.0, 4.0], [1.0, 2.0]]));
    }

    #[test]
    fn equal_weights_average() {
        let mut tape = Tape::new();
        let table = tape.constant(Matrix::from_rows(&[[1.0, -2.0], [3.0, 6.0]]));
        let nb = Neighbors {
            dis: Matrix::from_rows(&[[1.0, 1.0]]),
            idx: vec![0, 1],
            k: 2,
        };
        let w = Matrix::from_rows(&[[0.5, 0.5]]);
        let out = interpolate_content(&mut tape, table, &w, &nb).unwrap();
        assert_eq!(tape.value(out), &Matrix::from_rows(&[[2.0, 2.0]]));
    }

    #[test]
    fn init_mode_parse() {
        assert_eq!("agent".parse::<InitMode>().unwrap(), InitMode::Agent);
        assert_eq!("fps_zero".parse::<InitMode>().unwrap(), InitMode::FpsZero);
        assert!("random".parse::<InitMode>().is_err());
        assert_eq!(InitMode::Learnable.to_string(), "learnable");
    }
}
