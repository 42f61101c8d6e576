use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::nets::layout;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Which network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    PositionEncoder,
    ObjectEncoder,
    BackgroundEncoder,
    ObjectDecoder,
    BackgroundDecoder,
    PositionPrior,
    ObjectPrior,
    SceneEncoder,
}

impl Group {
    /// Training stage that fits this network.
    pub fn stage(self) -> u8 {
        match self {
            Group::PositionPrior | Group::ObjectPrior | Group::SceneEncoder => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `+-sqrt(6 / (fan_in + fan_out))`.
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: Group,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Named parameter tensors in a fixed order determined by the configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    specs: Vec<ParamSpec>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

fn index_of(specs: &[ParamSpec]) -> HashMap<String, usize> {
    specs.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect()
}

impl<T: Real> Params<T> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let specs = layout(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = specs
            .iter()
            .map(|s| match s.init {
                Init::Glorot { fan_in, fan_out } => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    Tensor::from_fn(s.shape.clone(), |_| T::of(rng.random_range(-a..=a)))
                }
                Init::Zeros => Tensor::zeros(s.shape.clone()),
            })
            .collect();
        Ok(Params {
            index: index_of(&specs),
            specs,
            values,
        })
    }

    /// Parameters for `cfg` with the given values, in layout order.
    pub fn from_values(cfg: &ModelConfig, values: Vec<Tensor<T>>) -> Result<Self> {
        cfg.validate()?;
        let specs = layout(cfg);
        if specs.len() != values.len() {
            return Err(Error::Config(format!(
                "{} parameter tensors supplied, the configuration needs {}",
                values.len(),
                specs.len()
            )));
        }
        for (s, v) in specs.iter().zip(&values) {
            if s.shape != v.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load parameters",
                    left: s.shape.clone(),
                    right: v.shape().to_vec(),
                });
            }
        }
        Ok(Params {
            index: index_of(&specs),
            specs,
            values,
        })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(|i| &mut self.values[i])
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            specs: self.specs.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Puts every parameter on `g`: groups for which `trainable` holds become
    /// gradient-tracking leaves, the rest constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: impl Fn(Group) -> bool) -> Bound<'_> {
        let vars = self
            .specs
            .iter()
            .zip(&self.values)
            .map(|(s, v)| {
                if trainable(s.group) {
                    g.leaf(v.clone())
                } else {
                    g.constant(v.clone())
                }
            })
            .collect();
        Bound {
            vars,
            index: &self.index,
        }
    }
}

impl<T> Params<T> {
    /// Binds vars already placed on a graph, in layout order.
    pub fn bound(&self, vars: Vec<Var>) -> Result<Bound<'_>> {
        if vars.len() != self.specs.len() {
            return Err(Error::InvalidArgument(format!(
                "{} vars for {} parameters",
                vars.len(),
                self.specs.len()
            )));
        }
        Ok(Bound {
            vars,
            index: &self.index,
        })
    }
}

/// Parameters placed on one graph.
pub struct Bound<'p> {
    pub vars: Vec<Var>,
    index: &'p HashMap<String, usize>,
}

impl Bound<'_> {
    pub fn get(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("no parameter named {name}"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.index.get(name).map(|&i| self.vars[i])
    }
}
