//! Named parameter storage and its binding onto a tape.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng::Rng;

/// Flat map from parameter path to tensor, iterated in lexicographic path order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) {
        self.map.insert(path.into(), value);
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.map
            .get(path)
            .ok_or_else(|| Error::UnknownParameter(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(path)
            .ok_or_else(|| Error::UnknownParameter(path.to_string()))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.map.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Same paths and shapes, all zeros.
    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }
}

/// Deterministic initialiser: every parameter draws from its own stream keyed by `(seed, path)`,
/// so values do not depend on construction order.
pub struct Init<'a> {
    seed: u64,
    store: &'a mut ParamStore,
}

impl<'a> Init<'a> {
    pub fn new(seed: u64, store: &'a mut ParamStore) -> Self {
        Init { seed, store }
    }

    pub fn rng(&self, path: &str) -> Rng {
        Rng::keyed(self.seed, path)
    }

    pub fn set(&mut self, path: &str, value: Tensor) {
        self.store.insert(path, value);
    }

    pub fn uniform(&mut self, path: &str, shape: &[usize], bound: f64) {
        let mut rng = self.rng(path);
        let t = Tensor::zeros(shape).map(|_| rng.uniform_range(-bound, bound));
        self.set(path, t);
    }

    pub fn normal(&mut self, path: &str, shape: &[usize], std: f64) {
        let mut rng = self.rng(path);
        let t = Tensor::zeros(shape).map(|_| std * rng.normal());
        self.set(path, t);
    }

    pub fn zeros(&mut self, path: &str, shape: &[usize]) {
        self.set(path, Tensor::zeros(shape));
    }

    pub fn ones(&mut self, path: &str, shape: &[usize]) {
        self.set(path, Tensor::ones(shape));
    }
}

/// A tape plus the mapping from parameter paths to the tape leaves holding them.
pub struct Graph<'t> {
    pub tape: &'t mut Tape,
    bound: HashMap<String, Var>,
    dropout: Option<(f64, Rng)>,
}

impl<'t> Graph<'t> {
    /// Places every parameter of `store` on the tape as a leaf.
    pub fn bind(tape: &'t mut Tape, store: &ParamStore, trainable: bool) -> Self {
        let bound = store
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
            .collect();
        Graph {
            tape,
            bound,
            dropout: None,
        }
    }

    /// Uses existing tape nodes as parameters.
    pub fn from_vars(tape: &'t mut Tape, names: &[String], vars: &[Var]) -> Self {
        let bound = names.iter().cloned().zip(vars.iter().copied()).collect();
        Graph {
            tape,
            bound,
            dropout: None,
        }
    }

    /// Enables inverted dropout with probability `p` for [`Graph::dropout`].
    pub fn with_dropout(mut self, p: f64, rng: Rng) -> Self {
        if p > 0.0 {
            self.dropout = Some((p, rng));
        }
        self
    }

    pub fn p(&self, path: &str) -> Result<Var> {
        self.bound
            .get(path)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(path.to_string()))
    }

    pub fn bound(&self) -> &HashMap<String, Var> {
        &self.bound
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((p, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - *p;
        let mask = Tensor::zeros(self.tape.shape(x)).map(|_| {
            if rng.uniform() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = self.tape.constant(mask);
        self.tape.mul(x, m)
    }
}
