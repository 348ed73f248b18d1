use std::collections::BTreeMap;
use std::ops::{Deref, DerefMut};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::tape::{Tape, Tensor, Var};

/// One named parameter and its gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub value: Tensor,
    pub grad: Vec<f64>,
}

/// Flat, name-ordered parameter store.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    entries: BTreeMap<String, ParamEntry>,
}

impl ModelParams {
    pub fn new() -> Self {
        ModelParams::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if let Some(i) = value.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::param(format!("parameter {name} has a non-finite value at {i}")));
        }
        let grad = vec![0.0; value.len()];
        self.entries.insert(name, ParamEntry { value, grad });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn entry_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<ParamEntry> {
        self.entries.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Number of entries.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars across all entries.
    pub fn count(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `grads` into the gradient slots. Unknown names are an error.
    pub fn accumulate(&mut self, grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        for (name, g) in grads {
            let e = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::UnknownName(name.clone()))?;
            if e.grad.len() != g.len() {
                return Err(Error::dim(
                    "accumulate",
                    format!("{name}: {} vs {}", e.grad.len(), g.len()),
                ));
            }
            for (a, b) in e.grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Moves every entry of `other` into `self`, replacing same-named ones.
    pub fn extend(&mut self, other: ModelParams) {
        self.entries.extend(other.entries);
    }

    /// Entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ModelParams {
        ModelParams {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

/// A tape bound to a parameter store. Each parameter is placed on the tape
/// once, on first use, so every use of a name shares one node and its
/// gradients add up.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p ModelParams,
    bound: BTreeMap<String, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            bound: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> &'p ModelParams {
        self.params
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::UnknownName(format!("parameter {name}")))?
            .clone();
        let v = self.tape.leaf(t);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Names of every parameter read so far.
    pub fn used(&self) -> impl Iterator<Item = &str> {
        self.bound.keys().map(String::as_str)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.leaf(t)
    }

    /// Gradients of the scalar `root` for every bound parameter, zero-filled
    /// where the parameter does not reach the root.
    pub fn param_grads(&self, root: Var) -> Result<BTreeMap<String, Vec<f64>>> {
        let grads = self.tape.backward(root)?;
        Ok(self
            .bound
            .iter()
            .map(|(name, &v)| {
                let g = grads
                    .get(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; self.tape.value(v).len()]);
                (name.clone(), g)
            })
            .collect())
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

/// Seeded weight initialiser.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = if std == 0.0 {
            vec![0.0; n]
        } else {
            let d = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| d.sample(&mut self.rng)).collect()
        };
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Normal with std `gain / sqrt(fan_in)`.
    pub fn fan_in(&mut self, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
        self.normal(shape, gain / (fan_in as f64).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_names_accumulate() {
        let mut p = ModelParams::new();
        p.insert("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let mut g = Graph::new(&p);
        let a = g.param("w").unwrap();
        let b = g.param("w").unwrap();
        assert_eq!(a, b);
        let s = g.add(a, b).unwrap();
        let l = g.sum(s);
        let grads = g.param_grads(l).unwrap();
        assert_eq!(grads["w"], vec![2.0, 2.0]);
    }

    #[test]
    fn unknown_and_non_finite() {
        let mut p = ModelParams::new();
        assert!(p.insert("bad", Tensor::scalar(f64::NAN)).is_err());
        let mut g = Graph::new(&p);
        assert!(matches!(g.param("missing"), Err(Error::UnknownName(_))));
    }

    #[test]
    fn count_and_subset() {
        let mut p = ModelParams::new();
        p.insert("a.x", Tensor::zeros(&[2, 3])).unwrap();
        p.insert("b.y", Tensor::zeros(&[4])).unwrap();
        assert_eq!(p.count(), 10);
        assert_eq!(p.subset("a.").len(), 1);
    }
}
