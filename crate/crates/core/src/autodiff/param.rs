use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Matrix;
use crate::error::{Error, Result};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A named trainable leaf with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Matrix,
    pub grad: Matrix,
}

impl Parameter {
    /// Rank-1 shapes are stored as a single row, higher ranks fold every
    /// dimension after the first into the column count.
    fn new(name: String, shape: Vec<usize>, data: Vec<f64>) -> Self {
        let (rows, cols) = matrix_dims(&shape);
        let value = Matrix::from_vec(rows, cols, data);
        let grad = Matrix::zeros(rows, cols);
        Self {
            name,
            shape,
            value,
            grad,
        }
    }
}

pub(crate) fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [r, rest @ ..] => (*r, rest.iter().product()),
    }
}

/// Ordered collection of parameters. Insertion order is stable and defines
/// checkpoint layout and optimizer state layout.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Argument(format!("duplicate parameter name {name:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "param",
                format!("{name}: shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        let id = ParamId(self.params.len());
        self.params
            .push(Parameter::new(name.to_string(), shape.to_vec(), data));
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn insert_matrix(&mut self, name: &str, value: Matrix) -> Result<ParamId> {
        let shape = [value.rows(), value.cols()];
        self.insert(name, &shape, value.into_vec())
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        self.insert(name, &[rows, cols], vec![0.0; rows * cols])
    }

    pub fn filled(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> Result<ParamId> {
        self.insert(name, &[rows, cols], vec![v; rows * cols])
    }

    /// Glorot-uniform weight of shape `fan_in × fan_out`.
    pub fn xavier<R: Rng>(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.insert(name, &[fan_in, fan_out], data)
    }

    pub fn normal<R: Rng>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::Argument(e.to_string()))?;
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        self.insert(name, &[rows, cols], data)
    }

    pub fn uniform<R: Rng>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let data = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
        self.insert(name, &[rows, cols], data)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].grad
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.as_mut_slice().fill(0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// FNV-1a over names, shapes and value bits. Used to show that two runs
    /// start from the same parameters.
    pub fn checksum(&self) -> u64 {
        let mut h = crate::util::Fnv64::new();
        for p in &self.params {
            h.write(p.name.as_bytes());
            for d in &p.shape {
                h.write(&d.to_le_bytes());
            }
            for v in p.value.as_slice() {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_folding() {
        assert_eq!(matrix_dims(&[]), (1, 1));
        assert_eq!(matrix_dims(&[5]), (1, 5));
        assert_eq!(matrix_dims(&[2, 3, 4]), (2, 12));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.zeros("w", 2, 2).unwrap();
        assert!(s.zeros("w", 1, 1).is_err());
        assert!(s.insert("v", &[2, 2], vec![0.0; 3]).is_err());
    }
}
