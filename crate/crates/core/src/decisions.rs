//! Positions on the spline: projections of feature maps, hierarchical
//! diffusion between layers and size matching of inherited positions.
//!
//! Positions are always carried as `[N, F]` tensors; scalar-position layers
//! use `F = 1`.

use autodiff::{Float, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spline::{basis, knot_mix, spline_eval, spline_eval_stacked};

/// Lower and upper guard applied to matched positions.
pub const MATCH_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecisionKind {
    /// Dot product with the flattened feature vector.
    Dot,
    /// 1x1 convolution followed by global averaging.
    Conv,
}

impl DecisionKind {
    /// Shape of the decision parameters for input features of shape
    /// `[h, w, c]` (or `[m]`) and `f` outputs.
    pub fn theta_shape(self, features: &[usize], f: usize) -> Vec<usize> {
        match (self, features) {
            (DecisionKind::Conv, [_, _, c]) => vec![1, 1, *c, f],
            _ => vec![features.iter().product(), f],
        }
    }
}

/// Positions flowing from one layer to the next.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PositionState {
    /// `[N, F]`, every element in `(0, 1)`.
    pub phi: Var,
    /// 1-based index of the emitting spline layer.
    pub layer: usize,
}

impl PositionState {
    pub fn width<T: Float>(&self, tape: &Tape<T>) -> usize {
        tape.shape(self.phi)[1]
    }
}

/// Per-layer diffusion rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum DiffusionSchedule {
    /// `delta_i = alpha` at every layer.
    Constant(f64),
    /// `delta_i = b^(1 - i)`, simulating a `b`-ary decision tree.
    Tree(f64),
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        DiffusionSchedule::Constant(1.0)
    }
}

/// Parses `constant:<alpha>` or `tree:<b>`.
impl std::str::FromStr for DiffusionSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, value) =
            s.split_once(':').ok_or_else(|| Error::Config(format!("diffusion `{s}`: expected constant:<alpha> or tree:<b>")))?;
        let value: f64 = value.trim().parse().map_err(|_| Error::Config(format!("diffusion `{s}`: bad number")))?;
        let d = match kind.trim() {
            "constant" => DiffusionSchedule::Constant(value),
            "tree" => DiffusionSchedule::Tree(value),
            other => return Err(Error::Config(format!("unknown diffusion schedule `{other}`"))),
        };
        d.validate()?;
        Ok(d)
    }
}

impl DiffusionSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DiffusionSchedule::Constant(a) if !(0.0..=1.0).contains(&a) => {
                Err(Error::Config(format!("diffusion rate {a} outside [0, 1]")))
            }
            DiffusionSchedule::Tree(b) if b.is_nan() || b < 2.0 => {
                Err(Error::Config(format!("tree branching factor {b} must be at least 2")))
            }
            _ => Ok(()),
        }
    }

    /// Rate at 1-based layer `i`.
    pub fn delta(&self, i: usize) -> Result<f64> {
        self.validate()?;
        if i == 0 {
            return Err(Error::Config("layer indices start at 1".into()));
        }
        Ok(match *self {
            DiffusionSchedule::Constant(a) => a,
            DiffusionSchedule::Tree(b) => b.powi(1 - i as i32),
        })
    }
}

/// `sigmoid(slope * x theta)` for `x: [N, M]`, `theta: [M, F]`.
pub fn project_dot<T: Float>(tape: &mut Tape<T>, x: Var, theta: Var, slope: f64) -> Result<Var> {
    let z = tape.matmul(x, theta)?;
    Ok(tape.sigmoid_slope(z, T::cst(slope)))
}

/// `sigmoid(slope * mean_hw(conv1x1(x, theta)))` for `x: [N, H, W, C]` and
/// `theta: [1, 1, C, F]`.
///
/// The average is taken before the channel mix; both are linear, so this is
/// the same map at `H * W` times fewer multiplies.
pub fn project_conv<T: Float>(tape: &mut Tape<T>, x: Var, theta: Var, slope: f64) -> Result<Var> {
    let ts = tape.shape(theta).to_vec();
    if ts.len() != 4 || ts[0] != 1 || ts[1] != 1 {
        return Err(Error::Contract(format!("conv decision filter must be [1, 1, C, F], got {ts:?}")));
    }
    let pooled = tape.global_avg_pool(x)?;
    let theta = tape.reshape(theta, &[ts[2], ts[3]])?;
    project_dot(tape, pooled, theta, slope)
}

/// Features the decision acts on: flattened for dot decisions, spatially
/// averaged for conv decisions. Flat inputs are used as-is.
pub fn decision_features<T: Float>(tape: &mut Tape<T>, x: Var, kind: DecisionKind) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    match (kind, s.len()) {
        (_, 2) => Ok(x),
        (DecisionKind::Conv, 4) => Ok(tape.global_avg_pool(x)?),
        (DecisionKind::Dot, _) => Ok(tape.flatten(x)?),
        _ => Err(Error::Contract(format!("cannot project features of shape {s:?}"))),
    }
}

/// `(1 - delta) phi_prev + delta p_new`, elementwise.
pub fn diffuse<T: Float>(tape: &mut Tape<T>, phi_prev: Var, p_new: Var, delta: f64) -> Result<Var> {
    if tape.shape(phi_prev) != tape.shape(p_new) {
        return Err(Error::Tensor(autodiff::TensorError::Dimension {
            op: "diffuse",
            detail: format!("{:?} vs {:?}", tape.shape(phi_prev), tape.shape(p_new)),
        }));
    }
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::Config(format!("diffusion rate {delta} outside [0, 1]")));
    }
    let a = tape.scale(phi_prev, T::cst(1.0 - delta));
    let b = tape.scale(p_new, T::cst(delta));
    Ok(tape.add(a, b)?)
}

/// `clamp(phi_prev m, eps, 1 - eps)` for `phi_prev: [N, F_prev]`, `m: [F_prev, F]`.
pub fn match_positions<T: Float>(tape: &mut Tape<T>, phi_prev: Var, m: Var) -> Result<Var> {
    let z = tape.matmul(phi_prev, m)?;
    Ok(tape.clamp(z, T::cst(MATCH_EPS), T::cst(1.0 - MATCH_EPS)))
}

/// How an inherited position of width `from` is brought to width `to`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Matching {
    Identity,
    /// Scalar positions copied to every output.
    Replicate,
    /// Learned `[from, to]` matrix.
    Learned,
}

impl Matching {
    pub fn between(from: usize, to: usize) -> Self {
        if from == to {
            Matching::Identity
        } else if from == 1 {
            Matching::Replicate
        } else {
            Matching::Learned
        }
    }
}

/// Applies a [`Matching`]; `m` is required for the learned case.
pub fn inherit_positions<T: Float>(tape: &mut Tape<T>, phi_prev: Var, to: usize, m: Option<Var>) -> Result<Var> {
    let from = tape.shape(phi_prev)[1];
    match Matching::between(from, to) {
        Matching::Identity => Ok(phi_prev),
        Matching::Replicate => Ok(tape.concat(&vec![phi_prev; to], 1)?),
        Matching::Learned => {
            let m = m.ok_or_else(|| Error::Contract(format!("no match matrix for {from} -> {to} positions")))?;
            match_positions(tape, phi_prev, m)
        }
    }
}

/// Decision parameters of one sample generated from the decision spline.
///
/// `knots` has shape `[K, ...theta_shape]` with the output axis last.
/// `phi` is the sample's inherited position: one element drives all
/// outputs, `F` elements drive output column `j` with element `j`.
pub fn gen_decision_params<T: Float>(tape: &mut Tape<T>, knots: Var, phi: Var, degree: usize) -> Result<Var> {
    let f = *tape.shape(knots).last().unwrap_or(&0);
    let n = tape.value(phi).len();
    if n == 1 {
        let p = tape.reshape(phi, &[])?;
        spline_eval(tape, knots, p, degree)
    } else if n == f {
        let p = tape.reshape(phi, &[f])?;
        spline_eval_stacked(tape, knots, p, degree)
    } else {
        Err(Error::Tensor(autodiff::TensorError::Dimension {
            op: "gen_decision_params",
            detail: format!("{n} positions for {f} decision outputs"),
        }))
    }
}

/// Batched hierarchical projection: features `[N, M]` are projected on every
/// decision knot `[K, M, F]` at once, then the responses are mixed with the
/// basis weights of the inherited positions `[N, 1 | F]`.
pub fn project_spline_batched<T: Float>(
    tape: &mut Tape<T>,
    features: Var,
    knots: Var,
    phi_prev: Var,
    degree: usize,
    slope: f64,
) -> Result<Var> {
    let ks = tape.shape(knots).to_vec();
    let (k, f) = (ks[0], *ks.last().unwrap());
    let m: usize = ks[1..ks.len() - 1].iter().product();
    let knots = tape.reshape(knots, &[k, m, f])?;
    let cols = tape.permute(knots, &[1, 0, 2])?;
    let cols = tape.reshape(cols, &[m, k * f])?;
    let responses = tape.matmul(features, cols)?;
    let w = basis(tape, phi_prev, k, degree)?;
    let z = knot_mix(tape, responses, w)?;
    Ok(tape.sigmoid_slope(z, T::cst(slope)))
}
