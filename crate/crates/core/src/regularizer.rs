//! Mutual-information regularization of spline positions.
//!
//! Positions are soft-assigned to `B` equal bins on `[0, 1]`, giving
//! differentiable histograms. The utilization term is the entropy of the
//! position histogram, the specialization term its entropy conditioned on
//! the class label; the loss rewards the first and penalizes the second.

use autodiff::{Backward, Float, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::decisions::PositionState;
use crate::error::{Error, Result};

/// Floor inside every logarithm.
pub const ENTROPY_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantizer {
    pub bins: usize,
    /// Sharpness of the soft bin edges.
    pub upsilon: f64,
}

impl Default for Quantizer {
    fn default() -> Self {
        Self { bins: 50, upsilon: 100.0 }
    }
}

impl Quantizer {
    pub fn new(bins: usize, upsilon: f64) -> Result<Self> {
        let q = Self { bins, upsilon };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::Config(format!("need at least 2 bins, got {}", self.bins)));
        }
        if !(self.upsilon > 1.0 && self.upsilon.is_finite()) {
            return Err(Error::Config(format!("quantization slope {} must exceed 1", self.upsilon)));
        }
        Ok(())
    }

    /// Center `c_b` of the 0-based bin `b`.
    pub fn center(&self, b: usize) -> f64 {
        (b as f64 + 0.5) / self.bins as f64
    }

    pub fn width(&self) -> f64 {
        1.0 / self.bins as f64
    }

    /// Membership of `phi` in bin `b`: about 1 inside, 0.5 on the edges and
    /// about 0 outside.
    pub fn soft_bin<T: Float>(&self, phi: T, b: usize) -> T {
        soft_bin_value(phi, T::cst(self.center(b)), T::cst(2.0 / self.width()), T::cst(self.upsilon.ln()))
    }
}

/// `1 / (1 + upsilon^(z^2 - 1))` with `z = (phi - c) * scale`.
fn soft_bin_value<T: Float>(phi: T, center: T, scale: T, ln_upsilon: T) -> T {
    let z = (phi - center) * scale;
    T::one() / (T::one() + ((z * z - T::one()) * ln_upsilon).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegConfig {
    /// Utilization weight.
    pub w_u: f64,
    /// Specialization weight.
    pub w_s: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self { w_u: 0.2, w_s: 0.2 }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_u >= 0.0 && self.w_s >= 0.0) {
            return Err(Error::Config(format!("regularizer weights must be nonnegative: {self:?}")));
        }
        Ok(())
    }
}

struct SoftQuantizeOp<T> {
    q: Quantizer,
    _t: std::marker::PhantomData<T>,
}

impl<T: Float> Backward<T> for SoftQuantizeOp<T> {
    fn name(&self) -> &'static str {
        "soft_quantize"
    }

    fn backward(&self, x: &[&Tensor<T>], u: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let b = self.q.bins;
        let scale = T::cst(2.0 / self.q.width());
        let ln_u = T::cst(self.q.upsilon.ln());
        let two = T::cst(2.0);
        let grad = x[0]
            .data()
            .iter()
            .enumerate()
            .map(|(i, &phi)| {
                let mut acc = T::zero();
                for k in 0..b {
                    let uv = u.data()[i * b + k];
                    let z = (phi - T::cst(self.q.center(k))) * scale;
                    acc += g[i * b + k] * (-uv * (T::one() - uv) * ln_u * two * z * scale);
                }
                acc
            })
            .collect();
        vec![Some(grad)]
    }
}

/// Soft memberships `[P, B]` of the positions in `phi` (any shape, `P`
/// elements).
pub fn soft_quantize<T: Float>(tape: &mut Tape<T>, phi: Var, q: &Quantizer) -> Result<Var> {
    q.validate()?;
    let b = q.bins;
    let scale = T::cst(2.0 / q.width());
    let ln_u = T::cst(q.upsilon.ln());
    let centers: Vec<T> = (0..b).map(|k| T::cst(q.center(k))).collect();
    let vals = tape.value(phi).data();
    let mut out = Vec::with_capacity(vals.len() * b);
    for &p in vals {
        out.extend(centers.iter().map(|&c| soft_bin_value(p, c, scale, ln_u)));
    }
    let out = Tensor::new(vec![vals.len(), b], out)?;
    Ok(tape.record(out, vec![phi], SoftQuantizeOp { q: *q, _t: std::marker::PhantomData }))
}

/// Bin probabilities `[B]`: column sums of the memberships, normalized.
pub fn bin_probs<T: Float>(tape: &mut Tape<T>, u: Var) -> Result<Var> {
    let mass = tape.sum_axis0(u)?;
    Ok(tape.normalize(mass))
}

pub fn entropy<T: Float>(tape: &mut Tape<T>, p: Var) -> Var {
    tape.entropy(p, T::cst(ENTROPY_EPS))
}

/// Per-class histograms and class priors.
pub struct Conditional {
    /// `[C', B]` for the `C'` classes present, rows summing to one.
    pub cond: Var,
    /// Constant `[1, C']` class frequencies.
    pub priors: Var,
    /// Class id of each row of `cond`.
    pub classes: Vec<usize>,
}

/// Soft histograms per class from memberships `u: [P, B]` and one label per
/// row. Classes absent from `labels` are skipped.
pub fn cond_bin_probs<T: Float>(tape: &mut Tape<T>, u: Var, labels: &[usize]) -> Result<Conditional> {
    if tape.shape(u)[0] != labels.len() || labels.is_empty() {
        return Err(Error::Tensor(autodiff::TensorError::Dimension {
            op: "cond_bin_probs",
            detail: format!("{} memberships for {} labels", tape.shape(u)[0], labels.len()),
        }));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let groups: Vec<usize> = labels.iter().map(|l| classes.binary_search(l).unwrap()).collect();
    let mut counts = vec![0usize; classes.len()];
    for &g in &groups {
        counts[g] += 1;
    }
    let sums = tape.segment_sum(u, &groups, classes.len())?;
    let cond = tape.normalize_rows(sums)?;
    let n = labels.len() as f64;
    let priors = Tensor::new(vec![1, classes.len()], counts.iter().map(|&c| T::cst(c as f64 / n)).collect())?;
    let priors = tape.constant(priors);
    Ok(Conditional { cond, priors, classes })
}

/// `H(L | Y) = sum_c Pr(c) H(L | Y = c)`.
pub fn cond_entropy<T: Float>(tape: &mut Tape<T>, c: &Conditional) -> Result<Var> {
    let rows = tape.row_entropy(c.cond, T::cst(ENTROPY_EPS))?;
    let n = tape.shape(rows)[0];
    let rows = tape.reshape(rows, &[n, 1])?;
    let h = tape.matmul(c.priors, rows)?;
    Ok(tape.reshape(h, &[])?)
}

/// Marginal histogram consistent with the conditionals: `priors^T cond`.
pub fn mixture_probs<T: Float>(tape: &mut Tape<T>, c: &Conditional) -> Result<Var> {
    let m = tape.matmul(c.priors, c.cond)?;
    let b = tape.shape(m)[1];
    Ok(tape.reshape(m, &[b])?)
}

/// Regularization of one batch.
pub struct RegTerms {
    /// `sum_i (-w_u H_i + w_s H_i(Y))`.
    pub loss: Var,
    /// Position entropy per layer.
    pub utilization: Vec<f64>,
    /// Conditional position entropy per layer.
    pub specialization: Vec<f64>,
}

impl RegTerms {
    pub fn reg_u(&self) -> f64 {
        self.utilization.iter().sum()
    }

    pub fn reg_s(&self) -> f64 {
        self.specialization.iter().sum()
    }
}

/// Position entropy and conditional entropy of one layer, using the
/// consistent mixture for the marginal.
///
/// Positions `[N, F]` with `F > 1` (rank-3 layers, one position per filter)
/// are treated as `F` separate position variables; both entropies are the
/// mean over them.
pub fn layer_entropies<T: Float>(tape: &mut Tape<T>, phi: Var, labels: &[usize], q: &Quantizer) -> Result<(Var, Var)> {
    let s = tape.shape(phi).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Tensor(autodiff::TensorError::Dimension {
            op: "reg_loss",
            detail: format!("positions {s:?} for {} labels", labels.len()),
        }));
    }
    let (n, f) = (s[0], s[1]);
    let (mut h_sum, mut hc_sum): (Option<Var>, Option<Var>) = (None, None);
    for j in 0..f {
        let col = if f == 1 { phi } else { tape.slice(phi, 1, j, 1)? };
        let col = tape.reshape(col, &[n])?;
        let u = soft_quantize(tape, col, q)?;
        let c = cond_bin_probs(tape, u, labels)?;
        let marginal = mixture_probs(tape, &c)?;
        let h = entropy(tape, marginal);
        let hc = cond_entropy(tape, &c)?;
        h_sum = Some(match h_sum {
            Some(a) => tape.add(a, h)?,
            None => h,
        });
        hc_sum = Some(match hc_sum {
            Some(a) => tape.add(a, hc)?,
            None => hc,
        });
    }
    let (h, hc) = (h_sum.expect("at least one component"), hc_sum.expect("at least one component"));
    if f == 1 {
        return Ok((h, hc));
    }
    let inv = T::cst(1.0 / f as f64);
    Ok((tape.scale(h, inv), tape.scale(hc, inv)))
}

/// `sum over layers of -w_u H(L_i) + w_s H(L_i | Y)`.
pub fn reg_loss<T: Float>(
    tape: &mut Tape<T>,
    positions: &[PositionState],
    labels: &[usize],
    q: &Quantizer,
    cfg: &RegConfig,
) -> Result<RegTerms> {
    cfg.validate()?;
    if positions.is_empty() {
        return Err(Error::Contract("regularizer needs at least one position-emitting layer".into()));
    }
    let mut loss: Option<Var> = None;
    let mut utilization = Vec::with_capacity(positions.len());
    let mut specialization = Vec::with_capacity(positions.len());
    for p in positions {
        let (h, hc) = layer_entropies(tape, p.phi, labels, q)?;
        utilization.push(tape.value(h).item().as_f64());
        specialization.push(tape.value(hc).item().as_f64());
        let a = tape.scale(h, T::cst(-cfg.w_u));
        let b = tape.scale(hc, T::cst(cfg.w_s));
        let term = tape.add(a, b)?;
        loss = Some(match loss {
            Some(l) => tape.add(l, term)?,
            None => term,
        });
    }
    Ok(RegTerms { loss: loss.unwrap(), utilization, specialization })
}

/// Position histogram `[B]` of plain values (no tape), rows summing to one.
pub fn histogram(phis: &[f64], q: &Quantizer) -> Vec<f64> {
    let mut mass = vec![0.0; q.bins];
    for &p in phis {
        for (b, m) in mass.iter_mut().enumerate() {
            *m += q.soft_bin(p, b);
        }
    }
    let total: f64 = mass.iter().sum();
    if total > 0.0 {
        mass.iter_mut().for_each(|m| *m /= total);
    }
    mass
}
