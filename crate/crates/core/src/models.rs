//! Model specifications, the LeNet family builders and the network that
//! runs them.

use autodiff::{Float, Padding, Tape, Tensor, Var};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::decisions::PositionState;
use crate::error::{Error, Result};
use crate::layers::{ExecPath, KnotRank, LayerShape, SplineLayer, SplineLayerConfig};
use crate::params::{Init, ParamRegistry, ParamSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "op")]
pub enum LayerSpec {
    /// Square stride-1 SAME convolution.
    Conv {
        filters: usize,
        kernel: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        spline: Option<SplineLayerConfig>,
    },
    Dense {
        units: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        spline: Option<SplineLayerConfig>,
    },
    Relu,
    /// 2x2 max pooling, stride 2.
    MaxPool,
    Dropout {
        rate: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// Per-sample input shape `[h, w, c]`.
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

/// LeNet-`s`: conv5x5(s) relu pool, conv5x5(2s) relu pool, dense(4s) relu
/// dropout(0.5), dense(10).
pub fn build_lenet(s: usize) -> Result<ModelSpec> {
    if s == 0 {
        return Err(Error::Config("LeNet width must be at least 1".into()));
    }
    Ok(ModelSpec {
        name: format!("lenet-{s}"),
        input: vec![28, 28, 1],
        layers: vec![
            LayerSpec::Conv { filters: s, kernel: 5, spline: None },
            LayerSpec::Relu,
            LayerSpec::MaxPool,
            LayerSpec::Conv { filters: 2 * s, kernel: 5, spline: None },
            LayerSpec::Relu,
            LayerSpec::MaxPool,
            LayerSpec::Dense { units: 4 * s, spline: None },
            LayerSpec::Relu,
            LayerSpec::Dropout { rate: 0.5 },
            LayerSpec::Dense { units: 10, spline: None },
        ],
    })
}

/// LeNet-`s` with both convolutions and the first dense layer replaced by
/// spline layers sharing `cfg`. The dense layer always uses a single spline.
pub fn build_spline_lenet(s: usize, cfg: &SplineLayerConfig) -> Result<ModelSpec> {
    cfg.validate()?;
    let mut spec = build_lenet(s)?;
    spec.name = format!("spline-lenet-{s}-{}", variant_name(cfg));
    let mut dense_seen = false;
    for layer in &mut spec.layers {
        match layer {
            LayerSpec::Conv { spline, .. } => *spline = Some(cfg.clone()),
            LayerSpec::Dense { spline, .. } if !dense_seen => {
                *spline = Some(SplineLayerConfig { rank: KnotRank::R4, ..cfg.clone() });
                dense_seen = true;
            }
            _ => {}
        }
    }
    Ok(spec)
}

/// Short variant name in the `M(K)-T-R` pattern, e.g. `H(2)-D-R3`.
pub fn variant_name(cfg: &SplineLayerConfig) -> String {
    use crate::decisions::DecisionKind;
    use crate::layers::ModelKind;
    let m = match cfg.model {
        ModelKind::Dynamic => "D",
        ModelKind::Hierarchical => "H",
    };
    let t = match cfg.decision {
        DecisionKind::Dot => "D",
        DecisionKind::Conv => "C",
    };
    let r = match cfg.rank {
        KnotRank::R3 => 3,
        KnotRank::R4 => 4,
    };
    format!("{m}({})-{t}-R{r}", cfg.knots)
}

#[derive(Clone, Debug, PartialEq)]
enum Node {
    Conv { weight: usize, bias: usize },
    Dense { weight: usize, bias: usize },
    Spline(Box<SplineLayer>),
    Relu,
    MaxPool,
    Dropout(f64),
}

/// A built model: parameter declarations and the wired layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: ModelSpec,
    params: Vec<ParamSpec>,
    nodes: Vec<Node>,
    /// Per-sample shape entering each node, and the final output shape.
    shapes: Vec<Vec<usize>>,
}

/// Result of a forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    /// Positions emitted by each spline layer, in order.
    pub positions: Vec<PositionState>,
}

impl Network {
    pub fn build(spec: &ModelSpec) -> Result<Self> {
        if spec.input.len() != 3 || spec.input.contains(&0) {
            return Err(Error::Config(format!("input shape {:?} must be [h, w, c]", spec.input)));
        }
        let mut reg = ParamRegistry::default();
        let mut nodes = Vec::new();
        let mut shapes = Vec::new();
        let mut shape = spec.input.clone();
        let (mut convs, mut denses, mut splines) = (0, 0, 0);
        let mut prev_width: Option<usize> = None;
        for layer in &spec.layers {
            shapes.push(shape.clone());
            let node = match layer {
                LayerSpec::Conv { filters, kernel, spline } => {
                    if shape.len() != 3 {
                        return Err(Error::Config("convolution after flattening".into()));
                    }
                    convs += 1;
                    let name = format!("conv{convs}");
                    let geo = LayerShape::Conv { kh: *kernel, kw: *kernel, c: shape[2], f: *filters };
                    let node = match spline {
                        Some(cfg) => {
                            splines += 1;
                            let l = SplineLayer::build(&name, cfg.clone(), geo, shape.clone(), splines, prev_width, &mut reg)?;
                            prev_width = Some(l.width());
                            Node::Spline(Box::new(l))
                        }
                        None => {
                            let fan_in = kernel * kernel * shape[2];
                            Node::Conv {
                                weight: reg.add(
                                    format!("{name}.weight"),
                                    vec![*kernel, *kernel, shape[2], *filters],
                                    Init::Scaled { fan_in },
                                ),
                                bias: reg.add(format!("{name}.bias"), vec![*filters], Init::Zeros),
                            }
                        }
                    };
                    shape = vec![shape[0], shape[1], *filters];
                    node
                }
                LayerSpec::Dense { units, spline } => {
                    denses += 1;
                    let name = format!("dense{denses}");
                    let m_in: usize = shape.iter().product();
                    let node = match spline {
                        Some(cfg) => {
                            splines += 1;
                            let geo = LayerShape::Dense { m_in, m_out: *units };
                            let l = SplineLayer::build(&name, cfg.clone(), geo, shape.clone(), splines, prev_width, &mut reg)?;
                            prev_width = Some(l.width());
                            Node::Spline(Box::new(l))
                        }
                        None => Node::Dense {
                            weight: reg.add(format!("{name}.weight"), vec![m_in, *units], Init::Scaled { fan_in: m_in }),
                            bias: reg.add(format!("{name}.bias"), vec![*units], Init::Zeros),
                        },
                    };
                    shape = vec![*units];
                    node
                }
                LayerSpec::Relu => Node::Relu,
                LayerSpec::MaxPool => {
                    if shape.len() != 3 || shape[0] < 2 || shape[1] < 2 {
                        return Err(Error::Config(format!("cannot pool features of shape {shape:?}")));
                    }
                    shape = vec![shape[0] / 2, shape[1] / 2, shape[2]];
                    Node::MaxPool
                }
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
                    }
                    Node::Dropout(*rate)
                }
            };
            nodes.push(node);
        }
        shapes.push(shape);
        Ok(Self { spec: spec.clone(), params: reg.into_specs(), nodes, shapes })
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(ParamSpec::len).sum()
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap()
    }

    pub fn spline_layers(&self) -> impl Iterator<Item = &SplineLayer> {
        self.nodes.iter().filter_map(|n| match n {
            Node::Spline(l) => Some(l.as_ref()),
            _ => None,
        })
    }

    /// Per-layer view for cost accounting: (layer spec, input shape, output shape, spline layer).
    pub fn layer_views(&self) -> Vec<LayerView<'_>> {
        self.spec
            .layers
            .iter()
            .zip(&self.nodes)
            .enumerate()
            .map(|(i, (spec, node))| LayerView {
                spec,
                input: &self.shapes[i],
                output: &self.shapes[i + 1],
                spline: match node {
                    Node::Spline(l) => Some(l),
                    _ => None,
                },
            })
            .collect()
    }

    /// Fresh parameters: scaled normal knots and weights with variance
    /// `c / fan_in`, zero biases.
    pub fn init_params<T: Float, R: Rng + ?Sized>(&self, c: f64, rng: &mut R) -> Result<Vec<Tensor<T>>> {
        self.params.iter().map(|p| p.initialize(c, rng)).collect()
    }

    pub fn check_params<T: Float>(&self, params: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "model {} expects {} parameter tensors, got {}",
                self.spec.name,
                self.params.len(),
                params.len()
            )));
        }
        for (spec, p) in self.params.iter().zip(params) {
            if p.shape() != spec.shape.as_slice() {
                return Err(Error::Contract(format!("{}: shape {:?}, expected {:?}", spec.name, p.shape(), spec.shape)));
            }
        }
        Ok(())
    }

    /// Records the forward pass. Dropout is active only when `rng` is given.
    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        x: Var,
        mut rng: Option<&mut dyn RngCore>,
        path: ExecPath,
    ) -> Result<Forward> {
        let want = &self.shapes[0];
        let got = tape.shape(x);
        if got.len() != 4 || &got[1..] != want.as_slice() {
            return Err(Error::Contract(format!("input batch {got:?} does not match [N, {want:?}]")));
        }
        let mut h = x;
        let mut positions: Vec<PositionState> = Vec::new();
        for node in &self.nodes {
            h = match node {
                Node::Conv { weight, bias } => {
                    let y = tape.conv2d(h, params[*weight], 1, Padding::Same)?;
                    tape.add_bias(y, params[*bias])?
                }
                Node::Dense { weight, bias } => {
                    let flat = if tape.shape(h).len() == 2 { h } else { tape.flatten(h)? };
                    let y = tape.matmul(flat, params[*weight])?;
                    tape.add_bias(y, params[*bias])?
                }
                Node::Spline(layer) => {
                    let out = layer.forward(tape, params, h, positions.last().copied(), path)?;
                    positions.push(out.positions);
                    out.features
                }
                Node::Relu => tape.relu(h),
                Node::MaxPool => tape.max_pool2(h)?,
                Node::Dropout(rate) => match rng.as_deref_mut() {
                    Some(r) => tape.dropout(h, *rate, true, r),
                    None => h,
                },
            };
        }
        Ok(Forward { logits: h, positions })
    }

    /// Convenience: registers `params` as constants and runs an eval-mode
    /// forward pass, returning logits and per-layer positions.
    pub fn predict<T: Float>(&self, params: &[Tensor<T>], x: &Tensor<T>, path: ExecPath) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        self.check_params(params)?;
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &vars, xv, None, path)?;
        let positions = out.positions.iter().map(|p| tape.value(p.phi).clone()).collect();
        Ok((tape.value(out.logits).clone(), positions))
    }

    /// Parameters for this spline network whose knots all equal the
    /// corresponding weights of `baseline` (a plain network of the same
    /// geometry); plain layers are copied as they are. Decision parameters
    /// keep the values in `params`.
    pub fn degenerate_from<T: Float>(
        &self,
        params: &[Tensor<T>],
        baseline: &Network,
        base_params: &[Tensor<T>],
    ) -> Result<Vec<Tensor<T>>> {
        self.check_params(params)?;
        baseline.check_params(base_params)?;
        if self.nodes.len() != baseline.nodes.len() {
            return Err(Error::Contract("baseline has a different layer structure".into()));
        }
        let mut out = params.to_vec();
        for (node, base) in self.nodes.iter().zip(&baseline.nodes) {
            let (Node::Conv { weight, bias } | Node::Dense { weight, bias }) = base else {
                continue;
            };
            let pairs = match node {
                Node::Spline(l) => [(l.weights, *weight), (l.bias, *bias)],
                Node::Conv { weight: w, bias: b } | Node::Dense { weight: w, bias: b } => [(*w, *weight), (*b, *bias)],
                _ => return Err(Error::Contract("baseline has a different layer structure".into())),
            };
            for (dst, src) in pairs {
                let src = &base_params[src];
                let spec = &self.params[dst];
                if !spec.len().is_multiple_of(src.len()) || !spec.shape.ends_with(src.shape()) {
                    return Err(Error::Contract(format!("{}: shape does not fit the baseline", spec.name)));
                }
                let k = spec.len() / src.len();
                let data = (0..k).flat_map(|_| src.data().iter().copied()).collect();
                out[dst] = Tensor::new(spec.shape.clone(), data)?;
            }
        }
        Ok(out)
    }
}

/// A layer together with the per-sample shapes around it.
#[derive(Clone, Copy, Debug)]
pub struct LayerView<'a> {
    pub spec: &'a LayerSpec,
    pub input: &'a [usize],
    pub output: &'a [usize],
    pub spline: Option<&'a SplineLayer>,
}
