//! Exact parameter and FLOP accounting.
//!
//! Conventions: a multiply-accumulate is 2 FLOPs, a sigmoid 4, ReLU and
//! pooling 1 per input element. Convolution and dense rows count their
//! multiply-accumulates only. Spline weight generation costs `d + 1` MACs per
//! knot element on the single-sample path.

use std::fmt;

use serde::Serialize;

use crate::decisions::DecisionKind;
use crate::layers::{LayerShape, ModelKind, SplineLayer};
use crate::models::{LayerSpec, Network};

pub const CONVENTIONS: &str =
    "MAC = 2 FLOPs; sigmoid = 4 FLOPs; relu/pool = 1 FLOP per input element; conv/dense count MACs only";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostMode {
    /// One sample through the sparse path, touching `d + 1` knots.
    SingleSample,
    /// Per-sample share of the batched path (all `K` knots applied).
    BatchAmortized,
}

impl CostMode {
    pub fn label(self) -> &'static str {
        match self {
            CostMode::SingleSample => "single-sample",
            CostMode::BatchAmortized => "batch-amortized",
        }
    }
}

/// FLOPs of one layer split by where they are spent. `transform`,
/// `decision` and `generation` correspond to the instrumented conv, matmul
/// and spline counters.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FlopBreakdown {
    /// Convolution MACs.
    pub conv: u64,
    /// Dense-layer, projection and matching MACs.
    pub matmul: u64,
    /// Weight, bias and decision-parameter generation from knots.
    pub spline_gen: u64,
    /// Basis evaluation, sigmoids, pooling, activations, diffusion, mixing.
    pub other: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.conv + self.matmul + self.spline_gen + self.other
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostRow {
    pub name: String,
    pub params: u64,
    pub flops: u64,
    /// Parameter storage at 4 bytes per value.
    pub memory_bytes: u64,
    pub breakdown: FlopBreakdown,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub model: String,
    pub mode: CostMode,
    pub conventions: &'static str,
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_flops: u64,
}

impl CostReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cost report serializes")
    }

    pub fn row(&self, name: &str) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn breakdown(&self) -> FlopBreakdown {
        self.rows.iter().fold(FlopBreakdown::default(), |mut acc, r| {
            acc.conv += r.breakdown.conv;
            acc.matmul += r.breakdown.matmul;
            acc.spline_gen += r.breakdown.spline_gen;
            acc.other += r.breakdown.other;
            acc
        })
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# {} ({})", self.model, self.mode.label())?;
        writeln!(f, "# {}", self.conventions)?;
        writeln!(f, "{:<10} {:>12} {:>14} {:>12}", "layer", "params", "flops", "bytes")?;
        for r in &self.rows {
            writeln!(f, "{:<10} {:>12} {:>14} {:>12}", r.name, r.params, r.flops, r.memory_bytes)?;
        }
        write!(f, "{:<10} {:>12} {:>14} {:>12}", "total", self.total_params, self.total_flops, 4 * self.total_params)
    }
}

/// FLOPs to evaluate the `d + 1` non-zero basis functions at one position.
pub fn basis_eval_flops(d: usize) -> u64 {
    (2 * d + 5 * d * (d + 1) / 2) as u64
}

fn prod(s: &[usize]) -> u64 {
    s.iter().product::<usize>() as u64
}

/// Parameter counts per layer (FLOPs are left at zero).
pub fn count_params(net: &Network) -> CostReport {
    build_report(net, CostMode::SingleSample, false)
}

pub fn count_flops(net: &Network, mode: CostMode) -> CostReport {
    build_report(net, mode, true)
}

fn build_report(net: &Network, mode: CostMode, with_flops: bool) -> CostReport {
    let specs = net.param_specs();
    let mut rows = Vec::new();
    let (mut convs, mut denses, mut relus, mut pools, mut drops) = (0, 0, 0, 0, 0);
    for view in net.layer_views() {
        let (name, mut b) = match view.spec {
            LayerSpec::Conv { filters, kernel, .. } => {
                convs += 1;
                let macs = prod(view.output) / *filters as u64 * (kernel * kernel * view.input[2] * filters) as u64;
                (format!("conv{convs}"), FlopBreakdown { conv: 2 * macs, ..Default::default() })
            }
            LayerSpec::Dense { units, .. } => {
                denses += 1;
                let macs = prod(view.input) * *units as u64;
                (format!("dense{denses}"), FlopBreakdown { matmul: 2 * macs, ..Default::default() })
            }
            LayerSpec::Relu => {
                relus += 1;
                (format!("relu{relus}"), FlopBreakdown { other: prod(view.input), ..Default::default() })
            }
            LayerSpec::MaxPool => {
                pools += 1;
                (format!("pool{pools}"), FlopBreakdown { other: prod(view.input), ..Default::default() })
            }
            LayerSpec::Dropout { .. } => {
                drops += 1;
                (format!("dropout{drops}"), FlopBreakdown::default())
            }
        };
        if let Some(layer) = view.spline {
            spline_flops(layer, view.input, view.output, mode, &mut b);
        }
        let prefix = format!("{name}.");
        let params: u64 = specs.iter().filter(|p| p.name.starts_with(&prefix)).map(|p| p.len() as u64).sum();
        let flops = if with_flops { b.total() } else { 0 };
        if !with_flops {
            b = FlopBreakdown::default();
        }
        rows.push(CostRow { name, params, flops, memory_bytes: 4 * params, breakdown: b });
    }
    let total_params = rows.iter().map(|r| r.params).sum();
    let total_flops = rows.iter().map(|r| r.flops).sum();
    CostReport { model: net.spec.name.clone(), mode, conventions: CONVENTIONS, rows, total_params, total_flops }
}

/// Adds the spline overhead (decisions, generation, mixing) to a layer whose
/// transform cost is already in `b`.
fn spline_flops(layer: &SplineLayer, input: &[usize], output: &[usize], mode: CostMode, b: &mut FlopBreakdown) {
    let cfg = &layer.cfg;
    let (d, k) = (cfg.degree as u64, cfg.knots as u64);
    let f = layer.width() as u64;
    let (knot, bias) = match layer.shape {
        LayerShape::Conv { kh, kw, c, f } => ((kh * kw * c * f) as u64, f as u64),
        LayerShape::Dense { m_in, m_out } => ((m_in * m_out) as u64, m_out as u64),
    };
    let out_len = prod(output);
    let transform = b.conv + b.matmul;

    // Decision features and projection.
    let m = match layer.decision_kind() {
        DecisionKind::Dot => prod(input),
        DecisionKind::Conv => {
            b.other += prod(input);
            input[2] as u64
        }
    };
    let theta_len = m * f;
    b.matmul += 2 * theta_len;
    b.other += 4 * f;

    if layer.is_hierarchical() {
        if layer.match_param().is_some() {
            b.matmul += 2 * layer.inherited_width().unwrap_or(1) as u64 * f;
            // Clamp.
            b.other += f;
        }
        // Decision parameters come from the inherited positions, one basis
        // evaluation per decision output.
        b.other += basis_eval_flops(cfg.degree) * f;
        let kt = cfg.decision_knots as u64;
        match mode {
            CostMode::SingleSample => b.spline_gen += 2 * (d + 1) * theta_len,
            CostMode::BatchAmortized => {
                b.matmul += 2 * (kt - 1) * theta_len;
                b.other += 2 * kt * f;
            }
        }
        if cfg.diffusion.delta(layer.index).map(|v| v != 1.0).unwrap_or(true) {
            b.other += 3 * f;
        }
    }

    // Basis at the layer's own positions.
    b.other += basis_eval_flops(cfg.degree) * f;
    match mode {
        CostMode::SingleSample => b.spline_gen += 2 * (d + 1) * (knot + bias),
        CostMode::BatchAmortized => {
            // All K knots applied, bias knots added, K partitions mixed.
            match layer.shape {
                LayerShape::Conv { .. } => b.conv += (k - 1) * transform,
                LayerShape::Dense { .. } => b.matmul += (k - 1) * transform,
            }
            b.other += 3 * k * out_len;
        }
    }
}

/// Parameters that scale with `K`: weight and bias knots of every spline
/// layer plus decision knots when they are tied to `K`.
pub fn knot_slope(net: &Network) -> u64 {
    net.spline_layers()
        .map(|l| {
            let specs = net.param_specs();
            let per = |i: usize| specs[i].len() as u64 / specs[i].shape[0] as u64;
            let mut s = per(l.weights) + per(l.bias);
            if l.is_hierarchical() && l.cfg.decision_knots == l.cfg.knots && l.cfg.model == ModelKind::Hierarchical {
                s += per(l.theta_param());
            }
            s
        })
        .sum()
}
