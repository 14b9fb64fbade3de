//! Training configuration.

use serde::{Deserialize, Serialize};

use crate::decisions::{DecisionKind, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::layers::{default_degree, KnotRank, ModelKind, SplineLayerConfig};
use crate::models::{build_lenet, build_spline_lenet, LayerSpec, ModelSpec};
use crate::regularizer::{Quantizer, RegConfig};

/// Which network to train.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelChoice {
    /// Plain LeNet baseline; the spline fields are ignored.
    Lenet,
    Dynamic,
    Hierarchical,
}

/// Every knob of a training run. Keys are kebab-case in JSON and on the
/// command line alike; missing keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelChoice,
    /// LeNet width `s`.
    pub width: usize,
    pub knots: usize,
    /// Spline degree; `min(3, K - 1)` when absent.
    pub degree: Option<usize>,
    pub rank: KnotRank,
    pub decision: DecisionKind,
    pub diffusion: DiffusionSchedule,
    pub slope: f64,
    /// Dropout rate before the classifier head.
    pub dropout: f64,
    pub lr: f64,
    /// Fraction of the epochs after which the learning rate is multiplied by
    /// `lr-decay`.
    pub lr_decay_at: f64,
    pub lr_decay: f64,
    pub momentum: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub w_u: f64,
    pub w_s: f64,
    pub bins: usize,
    pub upsilon: f64,
    /// Knot initialization scale `c` in `Var = c / fan_in`.
    pub init_scale: f64,
    /// Train on the first `n` samples only.
    pub train_subset: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelChoice::Hierarchical,
            width: 32,
            knots: 2,
            degree: None,
            rank: KnotRank::R3,
            decision: DecisionKind::Dot,
            diffusion: DiffusionSchedule::Constant(1.0),
            slope: 0.4,
            dropout: 0.5,
            lr: 0.1,
            lr_decay_at: 0.75,
            lr_decay: 0.1,
            momentum: 0.9,
            batch: 250,
            epochs: 10,
            seed: 0,
            w_u: 0.2,
            w_s: 0.2,
            bins: 50,
            upsilon: 100.0,
            init_scale: 0.05,
            train_subset: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        // lr = 0 is allowed: it is how a frozen run is expressed.
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be non-negative, got {}", self.lr)));
        }
        positive("init-scale", self.init_scale)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(0.0..=1.0).contains(&self.lr_decay_at) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("lr-decay-at must lie in [0, 1] and lr-decay in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        if self.batch == 0 || self.width == 0 {
            return Err(Error::Config("batch and width must be at least 1".into()));
        }
        if self.train_subset == Some(0) {
            return Err(Error::Config("train-subset must be at least 1".into()));
        }
        self.quantizer()?;
        self.reg().validate()?;
        if let Some(c) = self.spline_config() {
            c.validate()?;
        }
        Ok(())
    }

    pub fn quantizer(&self) -> Result<Quantizer> {
        Quantizer::new(self.bins, self.upsilon)
    }

    pub fn reg(&self) -> RegConfig {
        RegConfig { w_u: self.w_u, w_s: self.w_s }
    }

    /// Shared spline layer configuration, `None` for the baseline.
    pub fn spline_config(&self) -> Option<SplineLayerConfig> {
        let model = match self.model {
            ModelChoice::Lenet => return None,
            ModelChoice::Dynamic => ModelKind::Dynamic,
            ModelChoice::Hierarchical => ModelKind::Hierarchical,
        };
        Some(SplineLayerConfig {
            degree: self.degree.unwrap_or_else(|| default_degree(self.knots)),
            diffusion: self.diffusion,
            slope: self.slope,
            ..SplineLayerConfig::new(model, self.decision, self.rank, self.knots)
        })
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let mut spec = match self.spline_config() {
            None => build_lenet(self.width)?,
            Some(c) => build_spline_lenet(self.width, &c)?,
        };
        for layer in &mut spec.layers {
            if let LayerSpec::Dropout { rate } = layer {
                *rate = self.dropout;
            }
        }
        Ok(spec)
    }

    /// Learning rate for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch as f64 >= self.lr_decay_at * self.epochs as f64 {
            self.lr * self.lr_decay
        } else {
            self.lr
        }
    }
}
