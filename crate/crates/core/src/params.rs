//! Named parameter declarations and their initialization.

use autodiff::{Float, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    /// Normal with variance `c / fan_in`.
    Scaled {
        fan_in: usize,
    },
    Zeros,
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Draws initial values; `c` is the variance numerator of scaled inits.
    pub fn initialize<T: Float, R: Rng + ?Sized>(&self, c: f64, rng: &mut R) -> Result<Tensor<T>> {
        let n = self.len();
        let data = match self.init {
            Init::Scaled { fan_in } => {
                if fan_in == 0 || c <= 0.0 {
                    return Err(Error::Config(format!("bad init for {}: c={c}, fan-in={fan_in}", self.name)));
                }
                let normal =
                    Normal::new(0.0, (c / fan_in as f64).sqrt()).map_err(|e| Error::Config(format!("{}: {e}", self.name)))?;
                (0..n).map(|_| T::cst(normal.sample(rng))).collect()
            }
            Init::Zeros => vec![T::zero(); n],
            Init::Constant(v) => vec![T::cst(v); n],
        };
        Ok(Tensor::new(self.shape.clone(), data)?)
    }
}

/// Collects parameter declarations while a model is built; layers keep the
/// returned indices.
#[derive(Clone, Debug, Default)]
pub struct ParamRegistry {
    specs: Vec<ParamSpec>,
}

impl ParamRegistry {
    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name: name.into(), shape, init });
        self.specs.len() - 1
    }

    pub fn into_specs(self) -> Vec<ParamSpec> {
        self.specs
    }
}
