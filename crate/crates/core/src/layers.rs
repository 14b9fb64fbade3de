//! Spline-parameterized convolution and dense layers.
//!
//! Every layer runs the same pipeline: inherit the previous position,
//! generate the decision parameters (hierarchical mode), project the current
//! features, diffuse, generate the weights at the new position and apply
//! them. Two execution paths share this pipeline:
//!
//! * [`ExecPath::Batched`] applies all knots in one convolution (or matmul)
//!   with `K` times the output channels and mixes the `K` partitions per
//!   sample with the basis weights.
//! * [`ExecPath::PerSample`] generates each sample's weights from the
//!   `d + 1` active knots and applies them to that sample alone.
//!
//! Both compute the same function.

use autodiff::{Float, Padding, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::decisions::{
    decision_features, diffuse, gen_decision_params, inherit_positions, project_dot, project_spline_batched, DecisionKind,
    DiffusionSchedule, Matching, PositionState,
};
use crate::error::{Error, Result};
use crate::params::{Init, ParamRegistry};
use crate::spline::{basis, knot_mix, spline_eval, spline_eval_stacked, ClampedUniform};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Positions depend on the current features only.
    Dynamic,
    /// Decision parameters are themselves generated from the previous position.
    Hierarchical,
}

/// Rank of the convolution knots: one spline over the whole filter bank
/// (rank 4) or one spline per output filter (rank 3).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KnotRank {
    #[serde(rename = "3")]
    R3,
    #[serde(rename = "4")]
    R4,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecPath {
    #[default]
    Batched,
    PerSample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplineLayerConfig {
    pub model: ModelKind,
    pub decision: DecisionKind,
    pub rank: KnotRank,
    /// Weight knots `K_w`.
    pub knots: usize,
    /// Decision knots `K_theta` (hierarchical mode).
    pub decision_knots: usize,
    pub degree: usize,
    pub diffusion: DiffusionSchedule,
    pub slope: f64,
}

/// `min(3, K - 1)`: cubic where the knot count allows it.
pub fn default_degree(knots: usize) -> usize {
    knots.saturating_sub(1).clamp(1, 3)
}

impl SplineLayerConfig {
    pub fn new(model: ModelKind, decision: DecisionKind, rank: KnotRank, knots: usize) -> Self {
        Self {
            model,
            decision,
            rank,
            knots,
            decision_knots: knots,
            degree: default_degree(knots),
            diffusion: DiffusionSchedule::default(),
            slope: 0.4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ClampedUniform::new(self.knots, self.degree)?;
        if self.model == ModelKind::Hierarchical {
            ClampedUniform::new(self.decision_knots, self.degree)?;
        }
        self.diffusion.validate()?;
        if !(self.slope > 0.0 && self.slope.is_finite()) {
            return Err(Error::Config(format!("sigmoid slope {} must be positive", self.slope)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum LayerShape {
    /// Stride-1 SAME convolution.
    Conv {
        kh: usize,
        kw: usize,
        c: usize,
        f: usize,
    },
    Dense {
        m_in: usize,
        m_out: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Theta {
    Learned(usize),
    Spline(usize),
}

/// Output of one spline layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    pub features: Var,
    pub positions: PositionState,
}

/// A spline layer with its parameter indices into the model's parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineLayer {
    pub name: String,
    pub cfg: SplineLayerConfig,
    pub shape: LayerShape,
    /// Per-sample input shape, `[h, w, c]` or `[m]`.
    pub input: Vec<usize>,
    /// 1-based position among the model's spline layers.
    pub index: usize,
    pub weights: usize,
    pub bias: usize,
    theta: Theta,
    matcher: Option<usize>,
    inherited: Option<usize>,
}

impl SplineLayer {
    /// Declares the layer's parameters. `prev_width` is the position width
    /// of the preceding spline layer, if any.
    pub fn build(
        name: &str,
        cfg: SplineLayerConfig,
        shape: LayerShape,
        input: Vec<usize>,
        index: usize,
        prev_width: Option<usize>,
        reg: &mut ParamRegistry,
    ) -> Result<Self> {
        cfg.validate()?;
        let (weight_shape, bias_len, fan_in) = match shape {
            LayerShape::Conv { kh, kw, c, f } => {
                if input.len() != 3 || input[2] != c {
                    return Err(Error::Config(format!("{name}: input {input:?} does not carry {c} channels")));
                }
                (vec![kh, kw, c, f], f, kh * kw * c)
            }
            LayerShape::Dense { m_in, m_out } => {
                if input.iter().product::<usize>() != m_in {
                    return Err(Error::Config(format!("{name}: input {input:?} is not {m_in} wide")));
                }
                if cfg.rank == KnotRank::R3 {
                    return Err(Error::Config(format!("{name}: dense layers take rank-4 (single) splines only")));
                }
                (vec![m_in, m_out], m_out, m_in)
            }
        };
        let k = cfg.knots;
        let weights = reg.add(format!("{name}.weight_knots"), prepend(k, &weight_shape), Init::Scaled { fan_in });
        let bias = reg.add(format!("{name}.bias_knots"), vec![k, bias_len], Init::Zeros);

        let width = Self::width_for(&cfg, &shape);
        let decision = match shape {
            LayerShape::Dense { .. } => DecisionKind::Dot,
            LayerShape::Conv { .. } => cfg.decision,
        };
        let theta_shape = decision.theta_shape(&input, width);
        let theta_fan_in = match decision {
            DecisionKind::Dot => input.iter().product(),
            DecisionKind::Conv => input[2],
        };
        let hierarchical = cfg.model == ModelKind::Hierarchical && prev_width.is_some();
        let theta = if hierarchical {
            Theta::Spline(reg.add(
                format!("{name}.theta_knots"),
                prepend(cfg.decision_knots, &theta_shape),
                Init::Scaled { fan_in: theta_fan_in },
            ))
        } else {
            Theta::Learned(reg.add(format!("{name}.theta"), theta_shape, Init::Scaled { fan_in: theta_fan_in }))
        };
        let inherited = if cfg.model == ModelKind::Hierarchical { prev_width } else { None };
        let matcher = match inherited {
            Some(from) if Matching::between(from, width) == Matching::Learned => {
                Some(reg.add(format!("{name}.match"), vec![from, width], Init::Constant(1.0 / from as f64)))
            }
            _ => None,
        };
        Ok(Self { name: name.to_string(), cfg, shape, input, index, weights, bias, theta, matcher, inherited })
    }

    fn width_for(cfg: &SplineLayerConfig, shape: &LayerShape) -> usize {
        match (shape, cfg.rank) {
            (LayerShape::Conv { f, .. }, KnotRank::R3) => *f,
            _ => 1,
        }
    }

    /// Number of positions this layer emits per sample.
    pub fn width(&self) -> usize {
        Self::width_for(&self.cfg, &self.shape)
    }

    pub fn decision_kind(&self) -> DecisionKind {
        match self.shape {
            LayerShape::Dense { .. } => DecisionKind::Dot,
            LayerShape::Conv { .. } => self.cfg.decision,
        }
    }

    pub fn is_hierarchical(&self) -> bool {
        matches!(self.theta, Theta::Spline(_))
    }

    pub fn theta_param(&self) -> usize {
        match self.theta {
            Theta::Learned(i) | Theta::Spline(i) => i,
        }
    }

    pub fn match_param(&self) -> Option<usize> {
        self.matcher
    }

    /// Position width of the preceding spline layer (hierarchical mode).
    pub fn inherited_width(&self) -> Option<usize> {
        self.inherited
    }

    /// Per-sample output shape.
    pub fn output_shape(&self) -> Vec<usize> {
        match self.shape {
            LayerShape::Conv { f, .. } => vec![self.input[0], self.input[1], f],
            LayerShape::Dense { m_out, .. } => vec![m_out],
        }
    }

    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        x: Var,
        prev: Option<PositionState>,
        path: ExecPath,
    ) -> Result<LayerOutput> {
        if self.inherited.is_some() != prev.is_some() && self.cfg.model == ModelKind::Hierarchical {
            return Err(Error::Contract(format!("{}: inherited positions do not match the layer wiring", self.name)));
        }
        let prev = if self.cfg.model == ModelKind::Hierarchical { prev.map(|p| p.phi) } else { None };
        let (features, phi) = match path {
            ExecPath::Batched => self.forward_batch(tape, params, x, prev)?,
            ExecPath::PerSample => {
                let n = tape.shape(x)[0];
                let mut outs = Vec::with_capacity(n);
                let mut phis = Vec::with_capacity(n);
                for i in 0..n {
                    let xi = tape.slice(x, 0, i, 1)?;
                    let pi = prev.map(|p| tape.slice(p, 0, i, 1)).transpose()?;
                    let (y, p) = self.forward_sample(tape, params, xi, pi)?;
                    outs.push(y);
                    phis.push(p);
                }
                (tape.concat(&outs, 0)?, tape.concat(&phis, 0)?)
            }
        };
        Ok(LayerOutput { features, positions: PositionState { phi, layer: self.index } })
    }

    fn inherited_positions<T: Float>(&self, tape: &mut Tape<T>, params: &[Var], prev: Var) -> Result<Var> {
        inherit_positions(tape, prev, self.width(), self.matcher.map(|i| params[i]))
    }

    /// Positions `[N, F]` for a batch, using the batched decision projection.
    fn positions_batch<T: Float>(&self, tape: &mut Tape<T>, params: &[Var], x: Var, prev: Option<Var>) -> Result<Var> {
        let feats = decision_features(tape, x, self.decision_kind())?;
        match (self.theta, prev) {
            (Theta::Learned(t), _) => {
                let theta = flat_theta(tape, params[t])?;
                project_dot(tape, feats, theta, self.cfg.slope)
            }
            (Theta::Spline(t), Some(prev)) => {
                let inherited = self.inherited_positions(tape, params, prev)?;
                let p = project_spline_batched(tape, feats, params[t], inherited, self.cfg.degree, self.cfg.slope)?;
                self.diffuse(tape, inherited, p)
            }
            (Theta::Spline(_), None) => Err(Error::Contract(format!("{}: missing inherited positions", self.name))),
        }
    }

    fn diffuse<T: Float>(&self, tape: &mut Tape<T>, inherited: Var, p: Var) -> Result<Var> {
        let delta = self.cfg.diffusion.delta(self.index)?;
        if delta == 1.0 {
            Ok(p)
        } else {
            diffuse(tape, inherited, p, delta)
        }
    }

    fn forward_batch<T: Float>(&self, tape: &mut Tape<T>, params: &[Var], x: Var, prev: Option<Var>) -> Result<(Var, Var)> {
        let phi = self.positions_batch(tape, params, x, prev)?;
        let k = self.cfg.knots;
        let y = match self.shape {
            LayerShape::Conv { kh, kw, c, f } => {
                let w = tape.permute(params[self.weights], &[1, 2, 3, 0, 4])?;
                let w = tape.reshape(w, &[kh, kw, c, k * f])?;
                tape.conv2d(x, w, 1, Padding::Same)?
            }
            LayerShape::Dense { m_in, m_out } => {
                let flat = tape.flatten(x)?;
                let w = tape.permute(params[self.weights], &[1, 0, 2])?;
                let w = tape.reshape(w, &[m_in, k * m_out])?;
                tape.matmul(flat, w)?
            }
        };
        let b = tape.reshape(params[self.bias], &[tape.value(params[self.bias]).len()])?;
        let y = tape.add_bias(y, b)?;
        let mix = basis(tape, phi, k, self.cfg.degree)?;
        Ok((knot_mix(tape, y, mix)?, phi))
    }

    /// One sample (`x: [1, ...]`, `prev: [1, F_prev]`) through the sparse
    /// path.
    fn forward_sample<T: Float>(&self, tape: &mut Tape<T>, params: &[Var], x: Var, prev: Option<Var>) -> Result<(Var, Var)> {
        let feats = decision_features(tape, x, self.decision_kind())?;
        let phi = match (self.theta, prev) {
            (Theta::Learned(t), _) => {
                let theta = flat_theta(tape, params[t])?;
                project_dot(tape, feats, theta, self.cfg.slope)?
            }
            (Theta::Spline(t), Some(prev)) => {
                let inherited = self.inherited_positions(tape, params, prev)?;
                let theta = gen_decision_params(tape, params[t], inherited, self.cfg.degree)?;
                let theta = flat_theta(tape, theta)?;
                let p = project_dot(tape, feats, theta, self.cfg.slope)?;
                self.diffuse(tape, inherited, p)?
            }
            (Theta::Spline(_), None) => return Err(Error::Contract(format!("{}: missing inherited positions", self.name))),
        };
        let d = self.cfg.degree;
        let (w, b) = match self.cfg.rank {
            KnotRank::R3 => {
                let f = self.width();
                let p = tape.reshape(phi, &[f])?;
                (spline_eval_stacked(tape, params[self.weights], p, d)?, spline_eval_stacked(tape, params[self.bias], p, d)?)
            }
            KnotRank::R4 => {
                let p = tape.reshape(phi, &[])?;
                (spline_eval(tape, params[self.weights], p, d)?, spline_eval(tape, params[self.bias], p, d)?)
            }
        };
        let y = match self.shape {
            LayerShape::Conv { .. } => tape.conv2d(x, w, 1, Padding::Same)?,
            LayerShape::Dense { .. } => {
                let flat = tape.flatten(x)?;
                tape.matmul(flat, w)?
            }
        };
        Ok((tape.add_bias(y, b)?, phi))
    }
}

fn prepend(k: usize, shape: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(shape.len() + 1);
    s.push(k);
    s.extend_from_slice(shape);
    s
}

/// Decision parameters as an `[M, F]` matrix.
fn flat_theta<T: Float>(tape: &mut Tape<T>, theta: Var) -> Result<Var> {
    let s = tape.shape(theta).to_vec();
    let f = *s.last().unwrap();
    let m = s.iter().product::<usize>() / f;
    if s.len() == 2 {
        return Ok(theta);
    }
    Ok(tape.reshape(theta, &[m, f])?)
}
