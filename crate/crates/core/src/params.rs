//! Named parameter tensors shared by both networks.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Ordered collection of named parameter tensors.
///
/// Values are kept exactly representable as `f32` (the checkpoint width):
/// initialization and every optimizer step round through `f32`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    /// Uniform `±bound` initialization, rounded to `f32`.
    pub(crate) fn init_uniform(
        &mut self,
        rng: &mut ChaCha8Rng,
        name: String,
        shape: &[usize],
        bound: f64,
    ) {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| rng.gen_range(-bound..bound) as f32 as f64)
            .collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).unwrap())
            .expect("parameter names are generated uniquely");
    }

    pub(crate) fn init_zeros(&mut self, name: String, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape))
            .expect("parameter names are generated uniquely");
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total scalar parameter count.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// SHA-256 over names, shapes and little-endian `f32` values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u32).to_le_bytes());
            }
            for &v in t.data() {
                h.update((v as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Places every tensor on the tape. Trainable tensors become gradient
    /// leaves, the rest constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound<'_> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { store: self, vars }
    }
}

/// A [`ParamStore`] placed on a tape.
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl Bound<'_> {
    /// Tape handle of a parameter. Panics on unknown names, which are
    /// programming errors in the network definitions.
    pub fn var(&self, name: &str) -> Var {
        match self.store.position(name) {
            Some(i) => self.vars[i],
            None => panic!("unknown parameter `{name}`"),
        }
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.store.position(name).map(|i| self.vars[i])
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// He-style bound for layers followed by a leaky rectifier.
pub(crate) fn he_bound(fan_in: usize, slope: f64) -> f64 {
    (6.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt()
}

/// `1/√fan_in` bound for linear layers.
pub(crate) fn lecun_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}
