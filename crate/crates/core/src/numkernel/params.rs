use std::collections::HashMap;

use super::matrix::Matrix;
use super::rng::SeededRng;
use crate::error::{Error, Result};

/// Index of a parameter inside one [`ParamStore`]. Ids are not portable
/// between stores; look parameters up by name when copying.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named collection of trainable matrices, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, ParamId>,
}

/// Half-width of the uniform initialisation range.
pub const INIT_RANGE: f64 = 0.04;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "parameter `{name}` registered twice"
            )));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    /// Registers a `rows x cols` parameter drawn uniformly from `[-0.04, 0.04]`.
    pub fn insert_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut SeededRng,
    ) -> Result<ParamId> {
        self.insert_uniform_range(name, rows, cols, INIT_RANGE, rng)
    }

    /// Registers a `rows x cols` parameter drawn uniformly from `[-range, range]`.
    pub fn insert_uniform_range(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        range: f64,
        rng: &mut SeededRng,
    ) -> Result<ParamId> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "parameter `{}` has zero dimension {rows}x{cols}",
                name.into()
            )));
        }
        let data = (0..rows * cols).map(|_| rng.uniform_range(-range, range)).collect();
        self.insert(name, Matrix::from_vec(rows, cols, data)?)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.id(name).map(|id| self.value(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar entries.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Copies the named parameters into a new store, preserving the given order.
    pub fn subset<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<ParamStore> {
        let mut out = ParamStore::new();
        for name in names {
            let v = self
                .get(name)
                .ok_or_else(|| Error::MissingParam(name.to_string()))?;
            out.insert(name, v.clone())?;
        }
        Ok(out)
    }

    /// FNV-1a digest over names, shapes and bit patterns. Used to assert that a
    /// phase left a store untouched.
    pub fn checksum(&self) -> u64 {
        const PRIME: u64 = 0x100000001b3;
        let mut h: u64 = 0xcbf29ce484222325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(PRIME);
            }
        };
        for (_, name, m) in self.iter() {
            feed(name.as_bytes());
            feed(&(m.rows() as u64).to_le_bytes());
            feed(&(m.cols() as u64).to_le_bytes());
            for v in m.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}
