//! Learnable parameters, addressable by canonical name. The map is ordered,
//! which fixes both the checkpoint layout and the RNG draw order at init.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// One named weight array.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// How a parameter starts out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    UniformFanIn(usize),
    Zeros,
    Ones,
    Const(f64),
}

/// Declares one parameter of the architecture schema.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        ParamSpec { name: name.into(), shape, init }
    }
}

/// All learnable weights of a model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    entries: BTreeMap<String, Param>,
}

impl ModelParams {
    /// Materialize a schema deterministically: random draws follow the
    /// schema's declaration order under a single seeded stream.
    pub fn init_from_specs(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = BTreeMap::new();
        for spec in specs {
            let numel: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::UniformFanIn(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
                }
                Init::Zeros => vec![0.0; numel],
                Init::Ones => vec![1.0; numel],
                Init::Const(c) => vec![c; numel],
            };
            entries.insert(spec.name.clone(), Param { shape: spec.shape.clone(), data });
        }
        ModelParams { entries }
    }

    pub fn from_entries(entries: BTreeMap<String, Param>) -> Self {
        ModelParams { entries }
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries.get(name).ok_or_else(|| Error::BadParam {
            name: name.to_string(),
            detail: "not present in this model".into(),
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries.get_mut(name).ok_or_else(|| Error::BadParam {
            name: name.to_string(),
            detail: "not present in this model".into(),
        })
    }

    /// Entries in lexicographic name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all arrays.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Param::numel).sum()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_bounded() {
        let specs = vec![
            ParamSpec::new("a.weight", vec![4, 4], Init::UniformFanIn(4)),
            ParamSpec::new("a.bias", vec![4], Init::Zeros),
            ParamSpec::new("b.gain", vec![4], Init::Ones),
        ];
        let p1 = ModelParams::init_from_specs(&specs, 7);
        let p2 = ModelParams::init_from_specs(&specs, 7);
        assert_eq!(p1, p2);
        let w = p1.get("a.weight").unwrap();
        assert!(w.data.iter().all(|v| v.abs() <= 0.5));
        assert!(w.data.iter().any(|&v| v != 0.0));
        assert_eq!(p1.get("a.bias").unwrap().data, vec![0.0; 4]);
        assert_eq!(p1.get("b.gain").unwrap().data, vec![1.0; 4]);

        let p3 = ModelParams::init_from_specs(&specs, 8);
        assert_ne!(p1, p3);
    }

    #[test]
    fn iteration_is_lexicographic() {
        let specs = vec![
            ParamSpec::new("z", vec![1], Init::Zeros),
            ParamSpec::new("a", vec![1], Init::Zeros),
            ParamSpec::new("m", vec![1], Init::Zeros),
        ];
        let p = ModelParams::init_from_specs(&specs, 0);
        let names: Vec<_> = p.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names, vec!["a", "m", "z"]);
    }
}
