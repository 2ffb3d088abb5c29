use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::NDArray;
use crate::error::{Error, Result};

/// How a parameter's initial value is drawn.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitSpec {
    /// Normal(0, gain·√(2/fan_in)).
    KaimingFanIn { fan_in: usize, gain: f64 },
    Normal { mean: f64, std: f64 },
    Constant(f64),
    Uniform { lo: f64, hi: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: NDArray,
    pub init: Option<InitSpec>,
    /// Buffers (e.g. batch-norm running statistics) are stored alongside
    /// parameters but never receive gradients.
    pub trainable: bool,
}

/// Every named array of a model, in registration order.
#[derive(Clone, Debug)]
pub struct ParamStore {
    seed: u64,
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

/// FNV-1a, used to derive an independent stream per parameter name.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Deterministic RNG for `(seed, label)`.
pub fn split_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mixed = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ name_hash(label);
    ChaCha8Rng::seed_from_u64(mixed)
}

impl InitSpec {
    pub fn sample(&self, shape: &[usize], rng: &mut ChaCha8Rng) -> NDArray {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match *self {
            InitSpec::KaimingFanIn { fan_in, gain } => {
                let std = gain * (2.0 / fan_in.max(1) as f64).sqrt();
                let d = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| d.sample(rng)).collect()
            }
            InitSpec::Normal { mean, std } => {
                let d = Normal::new(mean, std).expect("finite std");
                (0..n).map(|_| d.sample(rng)).collect()
            }
            InitSpec::Constant(c) => vec![c; n],
            InitSpec::Uniform { lo, hi } => {
                let d = Uniform::new(lo, hi).expect("lo < hi");
                (0..n).map(|_| d.sample(rng)).collect()
            }
        };
        NDArray::from_parts(shape.to_vec(), data)
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Registers a trainable parameter and draws its initial value.
    pub fn register(&mut self, name: &str, shape: &[usize], init: InitSpec) -> Result<ParamId> {
        let mut rng = split_rng(self.seed, name);
        let value = init.sample(shape, &mut rng);
        self.insert(Parameter {
            name: name.to_string(),
            value,
            init: Some(init),
            trainable: true,
        })
    }

    pub fn register_buffer(&mut self, name: &str, value: NDArray) -> Result<ParamId> {
        self.insert(Parameter {
            name: name.to_string(),
            value,
            init: None,
            trainable: false,
        })
    }

    fn insert(&mut self, p: Parameter) -> Result<ParamId> {
        if self.index.contains_key(&p.name) {
            return Err(Error::Shape(format!("parameter {} registered twice", p.name)));
        }
        let id = self.params.len();
        self.index.insert(p.name.clone(), id);
        self.params.push(p);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn value(&self, name: &str) -> &NDArray {
        match self.by_name(name) {
            Some(p) => &p.value,
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn value_mut(&mut self, name: &str) -> &mut NDArray {
        let id = self.id(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .collect()
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }
}
