//! Clamped uniform B-splines over `[0, 1]` and spline banks whose control
//! points ("knots") are whole weight tensors.
//!
//! A bank with `K` knot tensors `C_k` and degree `d` maps a position `phi`
//! to `S(phi) = sum_k C_k B_k(phi)`. The knot vector has `d + 1` repeated
//! end knots at 0 and 1 and equidistant interior knots, so the basis is a
//! partition of unity on the whole interval, `S(0) = C_1`, `S(1) = C_K`,
//! and at most `d + 1` basis functions are non-zero at any position.
//!
//! Tape operations defined here:
//!
//! * [`basis`]: dense basis matrix `[N, K, F]` for positions `[N, F]`.
//! * [`spline_eval`]: one position, one bank, touching only the active window.
//! * [`spline_eval_stacked`]: one position per trailing slice (`F` banks
//!   stored side by side), the stacking form used for per-filter splines.
//! * [`knot_mix`]: per-sample weighted sum over `K` channel partitions, used
//!   to apply all knots in one pass and mix afterwards.

use autodiff::{flops, Backward, Float, Tape, Tensor, Var};

use crate::error::{Error, Result};

/// Knot layout of a clamped uniform spline with `count` basis functions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClampedUniform {
    count: usize,
    degree: usize,
}

impl ClampedUniform {
    pub fn new(count: usize, degree: usize) -> Result<Self> {
        if degree == 0 {
            return Err(Error::Config("spline degree must be at least 1".into()));
        }
        if count < degree + 1 {
            return Err(Error::Config(format!(
                "{count} knots cannot carry a degree-{degree} spline (need at least {})",
                degree + 1
            )));
        }
        Ok(Self { count, degree })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Number of polynomial pieces.
    pub fn spans(&self) -> usize {
        self.count - self.degree
    }

    /// Knot value `t_i`, `i in 0..count + degree + 1`.
    pub fn knot<T: Float>(&self, i: usize) -> T {
        if i <= self.degree {
            T::zero()
        } else if i >= self.count {
            T::one()
        } else {
            T::cst((i - self.degree) as f64) / T::cst(self.spans() as f64)
        }
    }

    /// Index `s` with `t_s <= phi < t_{s+1}`; `phi = 1` falls in the last span.
    pub fn span<T: Float>(&self, phi: T) -> usize {
        let last = self.count - 1;
        if phi >= T::one() {
            return last;
        }
        let s = (phi * T::cst(self.spans() as f64)).floor().as_f64() as usize + self.degree;
        // Guard against rounding pushing phi across a knot boundary.
        let mut s = s.clamp(self.degree, last);
        while s > self.degree && phi < self.knot::<T>(s) {
            s -= 1;
        }
        while s < last && phi >= self.knot::<T>(s + 1) {
            s += 1;
        }
        s
    }
}

/// The non-zero window of the basis at one position.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisWeights<T> {
    /// Index of the first active basis function.
    pub start: usize,
    /// `B_start .. B_{start + d}` at the position.
    pub values: Vec<T>,
    /// `dB/dphi` for the same window.
    pub derivatives: Vec<T>,
    /// Total number of basis functions `K`.
    pub count: usize,
}

impl<T: Float> BasisWeights<T> {
    /// All `K` coefficients, zeros outside the active window.
    pub fn dense(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.count];
        out[self.start..self.start + self.values.len()].copy_from_slice(&self.values);
        out
    }

    pub fn dense_derivatives(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.count];
        out[self.start..self.start + self.derivatives.len()].copy_from_slice(&self.derivatives);
        out
    }
}

/// Values of the `degree + 1` basis functions of degree `degree` that are
/// non-zero on span `s` (Cox-de Boor recursion in triangular form).
fn span_basis<T: Float>(kv: &ClampedUniform, s: usize, degree: usize, phi: T, out: &mut [T]) {
    let mut left = [T::zero(); 8];
    let mut right = [T::zero(); 8];
    out[0] = T::one();
    for j in 1..=degree {
        left[j] = phi - kv.knot::<T>(s + 1 - j);
        right[j] = kv.knot::<T>(s + j) - phi;
        let mut saved = T::zero();
        for r in 0..j {
            let temp = out[r] / (right[r + 1] + left[j - r]);
            out[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        out[j] = saved;
    }
}

/// Basis window and derivatives at `phi` for `count` knots of degree `degree`.
pub fn basis_eval<T: Float>(phi: T, count: usize, degree: usize) -> Result<BasisWeights<T>> {
    let kv = ClampedUniform::new(count, degree)?;
    basis_eval_with(&kv, phi)
}

pub fn basis_eval_with<T: Float>(kv: &ClampedUniform, phi: T) -> Result<BasisWeights<T>> {
    if !(phi >= T::zero() && phi <= T::one()) {
        return Err(Error::Domain(phi.as_f64()));
    }
    let d = kv.degree;
    assert!(d < 8, "degree {d} not supported");
    let s = kv.span(phi);
    let mut values = vec![T::zero(); d + 1];
    span_basis(kv, s, d, phi, &mut values);

    // dN_{i,d} = d * (N_{i,d-1} / (t_{i+d} - t_i) - N_{i+1,d-1} / (t_{i+d+1} - t_{i+1}))
    let mut lower = [T::zero(); 8];
    span_basis(kv, s, d - 1, phi, &mut lower[..d]);
    let start = s - d;
    let dd = T::cst(d as f64);
    let derivatives = (0..=d)
        .map(|r| {
            let i = start + r;
            // lower[q] holds N_{s-d+1+q, d-1}
            let a = if r >= 1 { lower[r - 1] } else { T::zero() };
            let b = if r < d { lower[r] } else { T::zero() };
            let den_a = kv.knot::<T>(i + d) - kv.knot::<T>(i);
            let den_b = kv.knot::<T>(i + d + 1) - kv.knot::<T>(i + 1);
            let ta = if den_a > T::zero() { a / den_a } else { T::zero() };
            let tb = if den_b > T::zero() { b / den_b } else { T::zero() };
            dd * (ta - tb)
        })
        .collect();
    Ok(BasisWeights { start, values, derivatives, count: kv.count })
}

/// `K` knot tensors of identical shape plus a degree, stored as one tensor
/// of shape `[K, ...knot_shape]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineBank<T> {
    knots: Tensor<T>,
    layout: ClampedUniform,
}

impl<T: Float> SplineBank<T> {
    pub fn new(knots: Tensor<T>, degree: usize) -> Result<Self> {
        if knots.ndim() == 0 {
            return Err(Error::Config("spline bank needs a leading knot axis".into()));
        }
        let layout = ClampedUniform::new(knots.shape()[0], degree)?;
        Ok(Self { knots, layout })
    }

    /// Builds a bank from separate knot tensors, which must share one shape.
    pub fn from_knots(knots: &[Tensor<T>], degree: usize) -> Result<Self> {
        let first = knots.first().ok_or_else(|| Error::Config("empty spline bank".into()))?;
        if knots.iter().any(|k| k.shape() != first.shape()) {
            return Err(Error::Config("knot tensors differ in shape".into()));
        }
        let mut shape = vec![knots.len()];
        shape.extend_from_slice(first.shape());
        let data = knots.iter().flat_map(|k| k.data().iter().copied()).collect();
        Self::new(Tensor::new(shape, data)?, degree)
    }

    pub fn knots(&self) -> &Tensor<T> {
        &self.knots
    }

    pub fn count(&self) -> usize {
        self.layout.count
    }

    pub fn degree(&self) -> usize {
        self.layout.degree
    }

    pub fn knot_shape(&self) -> &[usize] {
        &self.knots.shape()[1..]
    }

    /// `S(phi)` without recording on a tape.
    pub fn eval(&self, phi: T) -> Result<Tensor<T>> {
        let b = basis_eval_with(&self.layout, phi)?;
        let width = self.knots.len() / self.count();
        let mut out = vec![T::zero(); width];
        for (r, &w) in b.values.iter().enumerate() {
            let knot = &self.knots.data()[(b.start + r) * width..][..width];
            for (o, &c) in out.iter_mut().zip(knot) {
                *o += w * c;
            }
        }
        Ok(Tensor::new(self.knot_shape().to_vec(), out)?)
    }
}

struct BasisOp<T> {
    derivatives: Vec<T>,
    count: usize,
    positions: usize,
}

impl<T: Float> Backward<T> for BasisOp<T> {
    fn name(&self) -> &'static str {
        "bspline_basis"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let (k, f) = (self.count, self.positions);
        let n = g.len() / (k * f);
        let mut out = vec![T::zero(); n * f];
        for b in 0..n {
            for ki in 0..k {
                for j in 0..f {
                    let idx = (b * k + ki) * f + j;
                    out[b * f + j] += g[idx] * self.derivatives[idx];
                }
            }
        }
        vec![Some(out)]
    }
}

/// Dense basis coefficients for positions `[N, F]`, as `[N, K, F]`.
pub fn basis<T: Float>(tape: &mut Tape<T>, phi: Var, count: usize, degree: usize) -> Result<Var> {
    let kv = ClampedUniform::new(count, degree)?;
    let shape = tape.shape(phi).to_vec();
    if shape.len() != 2 {
        return Err(Error::Contract(format!("positions must be [N, F], got {shape:?}")));
    }
    let (n, f) = (shape[0], shape[1]);
    let mut values = vec![T::zero(); n * count * f];
    let mut derivatives = vec![T::zero(); n * count * f];
    for (i, &p) in tape.value(phi).data().iter().enumerate() {
        let (b, j) = (i / f, i % f);
        let w = basis_eval_with(&kv, p)?;
        for r in 0..w.values.len() {
            let idx = (b * count + w.start + r) * f + j;
            values[idx] = w.values[r];
            derivatives[idx] = w.derivatives[r];
        }
    }
    let out = Tensor::new(vec![n, count, f], values)?;
    Ok(tape.record(out, vec![phi], BasisOp { derivatives, count, positions: f }))
}

/// Sparse evaluation saved for the backward pass: per position, the window
/// start, values and derivatives.
struct Windows<T> {
    starts: Vec<usize>,
    values: Vec<T>,
    derivatives: Vec<T>,
    width: usize,
}

impl<T: Float> Windows<T> {
    fn eval(kv: &ClampedUniform, phis: &[T]) -> Result<Self> {
        let width = kv.degree + 1;
        let mut w = Windows {
            starts: Vec::with_capacity(phis.len()),
            values: Vec::with_capacity(phis.len() * width),
            derivatives: Vec::with_capacity(phis.len() * width),
            width,
        };
        for &p in phis {
            let b = basis_eval_with(kv, p)?;
            w.starts.push(b.start);
            w.values.extend_from_slice(&b.values);
            w.derivatives.extend_from_slice(&b.derivatives);
        }
        Ok(w)
    }
}

/// Knots `[K, S, F]` (flattened middle), positions `[F]`, output `[S, F]`.
struct StackedEvalOp<T> {
    windows: Windows<T>,
    slice: usize,
    banks: usize,
}

impl<T: Float> StackedEvalOp<T> {
    fn forward(&self, knots: &[T]) -> Vec<T> {
        let (s_len, f) = (self.slice, self.banks);
        let mut out = vec![T::zero(); s_len * f];
        for r in 0..self.windows.width {
            for j in 0..f {
                let k = self.windows.starts[j] + r;
                let w = self.windows.values[j * self.windows.width + r];
                let base = k * s_len * f;
                for s in 0..s_len {
                    out[s * f + j] += w * knots[base + s * f + j];
                }
            }
        }
        out
    }
}

impl<T: Float> Backward<T> for StackedEvalOp<T> {
    fn name(&self) -> &'static str {
        "spline_eval"
    }

    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let knots = x[0].data();
        let (s_len, f, width) = (self.slice, self.banks, self.windows.width);
        let dknots = needs[0].then(|| {
            let mut d = vec![T::zero(); knots.len()];
            for j in 0..f {
                for r in 0..width {
                    let k = self.windows.starts[j] + r;
                    let w = self.windows.values[j * width + r];
                    let base = k * s_len * f;
                    for s in 0..s_len {
                        d[base + s * f + j] += w * g[s * f + j];
                    }
                }
            }
            d
        });
        let dphi = needs[1].then(|| {
            (0..f)
                .map(|j| {
                    let mut acc = T::zero();
                    for r in 0..width {
                        let k = self.windows.starts[j] + r;
                        let dw = self.windows.derivatives[j * width + r];
                        let base = k * s_len * f;
                        let mut dot = T::zero();
                        for s in 0..s_len {
                            dot += knots[base + s * f + j] * g[s * f + j];
                        }
                        acc += dw * dot;
                    }
                    acc
                })
                .collect()
        });
        vec![dknots, dphi]
    }
}

fn check_knots<T: Float>(tape: &Tape<T>, knots: Var, degree: usize) -> Result<ClampedUniform> {
    let shape = tape.shape(knots);
    if shape.is_empty() {
        return Err(Error::Contract("knot tensor needs a leading knot axis".into()));
    }
    ClampedUniform::new(shape[0], degree)
}

/// `S(phi)` for knots `[K, ...shape]` and a single position, touching only
/// the `degree + 1` active knots. Differentiable in knots and position.
pub fn spline_eval<T: Float>(tape: &mut Tape<T>, knots: Var, phi: Var, degree: usize) -> Result<Var> {
    let kv = check_knots(tape, knots, degree)?;
    if tape.value(phi).len() != 1 {
        return Err(Error::Contract(format!("spline_eval takes one position, got shape {:?}", tape.shape(phi))));
    }
    let knot_shape = tape.shape(knots)[1..].to_vec();
    let slice: usize = knot_shape.iter().product();
    let op = StackedEvalOp { windows: Windows::eval(&kv, tape.value(phi).data())?, slice, banks: 1 };
    let out = op.forward(tape.value(knots).data());
    flops::record(flops::Kind::SplineGen, 2 * (degree + 1) * slice);
    let out = Tensor::new(knot_shape, out)?;
    Ok(tape.record(out, vec![knots, phi], op))
}

/// Per-slice evaluation: knots `[K, ...shape, F]` hold `F` banks side by
/// side and positions `[F]` index them independently. The result
/// `[...shape, F]` stacks the `F` evaluations along the trailing axis.
pub fn spline_eval_stacked<T: Float>(tape: &mut Tape<T>, knots: Var, phi: Var, degree: usize) -> Result<Var> {
    let kv = check_knots(tape, knots, degree)?;
    let shape = tape.shape(knots).to_vec();
    if shape.len() < 2 {
        return Err(Error::Contract(format!("stacked knots need [K, .., F], got {shape:?}")));
    }
    let f = *shape.last().unwrap();
    if tape.value(phi).len() != f {
        return Err(Error::Tensor(autodiff::TensorError::Dimension {
            op: "spline_eval_stacked",
            detail: format!("{} positions for {f} banks", tape.value(phi).len()),
        }));
    }
    let slice: usize = shape[1..shape.len() - 1].iter().product();
    let op = StackedEvalOp { windows: Windows::eval(&kv, tape.value(phi).data())?, slice, banks: f };
    let out = op.forward(tape.value(knots).data());
    flops::record(flops::Kind::SplineGen, 2 * (degree + 1) * slice * f);
    let out = Tensor::new(shape[1..].to_vec(), out)?;
    Ok(tape.record(out, vec![knots, phi], op))
}

/// Evaluates each bank at its own position and stacks the results along a
/// new trailing axis.
pub fn spline_eval_vector<T: Float>(tape: &mut Tape<T>, banks: &[Var], phi: Var, degree: usize) -> Result<Var> {
    let n = tape.value(phi).len();
    if banks.len() != n || n == 0 {
        return Err(Error::Tensor(autodiff::TensorError::Dimension {
            op: "spline_eval_vector",
            detail: format!("{} banks for {n} positions", banks.len()),
        }));
    }
    let flat = tape.reshape(phi, &[n])?;
    let mut parts = Vec::with_capacity(n);
    for (j, &bank) in banks.iter().enumerate() {
        let pj = tape.slice(flat, 0, j, 1)?;
        parts.push(spline_eval(tape, bank, pj, degree)?);
    }
    Ok(tape.stack_last(&parts)?)
}

struct KnotMixOp {
    batch: usize,
    spatial: usize,
    count: usize,
    width: usize,
    weight_cols: usize,
}

impl<T: Float> Backward<T> for KnotMixOp {
    fn name(&self) -> &'static str {
        "knot_mix"
    }

    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (y, w) = (x[0].data(), x[1].data());
        let (k, p, q, sp) = (self.count, self.width, self.weight_cols, self.spatial);
        let dy = needs[0].then(|| {
            let mut dy = vec![T::zero(); y.len()];
            for n in 0..self.batch {
                for s in 0..sp {
                    let go = &g[(n * sp + s) * p..][..p];
                    let row = &mut dy[(n * sp + s) * k * p..][..k * p];
                    for ki in 0..k {
                        let wrow = &w[(n * k + ki) * q..][..q];
                        for (j, d) in row[ki * p..][..p].iter_mut().enumerate() {
                            *d = wrow[if q == 1 { 0 } else { j }] * go[j];
                        }
                    }
                }
            }
            dy
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![T::zero(); w.len()];
            for n in 0..self.batch {
                for s in 0..sp {
                    let go = &g[(n * sp + s) * p..][..p];
                    let row = &y[(n * sp + s) * k * p..][..k * p];
                    for ki in 0..k {
                        let dst = &mut dw[(n * k + ki) * q..][..q];
                        for (j, (&gv, &yv)) in go.iter().zip(&row[ki * p..][..p]).enumerate() {
                            dst[if q == 1 { 0 } else { j }] += gv * yv;
                        }
                    }
                }
            }
            dw
        });
        vec![dy, dw]
    }
}

/// Mixes `K` channel partitions per sample.
///
/// `y: [N, ..., K * P]` holds the responses of all knots (partition `k`
/// occupies channels `k * P .. (k + 1) * P`); `weights: [N, K, Q]` with
/// `Q == 1` (one weight per knot) or `Q == P` (one per output channel).
/// Returns `[N, ..., P]` with `out[n, .., j] = sum_k w[n, k, j] y[n, .., k * P + j]`.
pub fn knot_mix<T: Float>(tape: &mut Tape<T>, y: Var, weights: Var) -> Result<Var> {
    let ys = tape.shape(y).to_vec();
    let ws = tape.shape(weights).to_vec();
    if ys.len() < 2 || ws.len() != 3 || ys[0] != ws[0] {
        return Err(Error::Tensor(autodiff::TensorError::Dimension {
            op: "knot_mix",
            detail: format!("responses {ys:?}, weights {ws:?}"),
        }));
    }
    let (batch, count, q) = (ws[0], ws[1], ws[2]);
    let channels = *ys.last().unwrap();
    if !channels.is_multiple_of(count) {
        return Err(Error::Tensor(autodiff::TensorError::Dimension {
            op: "knot_mix",
            detail: format!("{channels} channels do not split into {count} partitions"),
        }));
    }
    let p = channels / count;
    if q != 1 && q != p {
        return Err(Error::Tensor(autodiff::TensorError::Dimension {
            op: "knot_mix",
            detail: format!("{q} weight columns for partitions of width {p}"),
        }));
    }
    let spatial: usize = ys[1..ys.len() - 1].iter().product();
    let yv = tape.value(y).data();
    let wv = tape.value(weights).data();
    let mut out = vec![T::zero(); batch * spatial * p];
    for n in 0..batch {
        for s in 0..spatial {
            let row = &yv[(n * spatial + s) * channels..][..channels];
            let o = &mut out[(n * spatial + s) * p..][..p];
            for ki in 0..count {
                let wrow = &wv[(n * count + ki) * q..][..q];
                for (j, (ov, &yv)) in o.iter_mut().zip(&row[ki * p..][..p]).enumerate() {
                    *ov += wrow[if q == 1 { 0 } else { j }] * yv;
                }
            }
        }
    }
    let mut shape = ys;
    *shape.last_mut().unwrap() = p;
    let out = Tensor::new(shape, out)?;
    Ok(tape.record(out, vec![y, weights], KnotMixOp { batch, spatial, count, width: p, weight_cols: q }))
}
