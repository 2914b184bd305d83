use rand::Rng as _;

use super::matrix::Matrix;
use crate::error::{Error, Result};
use crate::hash::Fnv;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of parameter matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn values(&self) -> impl Iterator<Item = &Matrix> {
        self.values.iter()
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.values.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// FNV-1a over names, shapes and value bits.
    pub fn hash(&self) -> u64 {
        let mut h = Fnv::new();
        for (n, m) in self.iter() {
            h.bytes(n.as_bytes())
                .u64(m.rows() as u64)
                .u64(m.cols() as u64)
                .f64s(m.as_slice());
        }
        h.finish()
    }

    /// Replace all values, checking that names and shapes line up.
    pub fn load(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Compatibility("parameter names differ".into()));
        }
        for (a, b) in self.values.iter().zip(&other.values) {
            if a.shape() != b.shape() {
                return Err(Error::Compatibility("parameter shapes differ".into()));
            }
        }
        self.values.clone_from(&other.values);
        Ok(())
    }
}

/// Uniform Xavier/Glorot initialization for a `fan_in x fan_out` weight.
pub fn xavier(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Matrix {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-a..a))
        .collect();
    Matrix::from_vec(fan_in, fan_out, data).expect("shape")
}
