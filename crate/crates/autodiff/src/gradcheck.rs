//! Central finite-difference gradient checking.

use crate::error::TensorError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Smallest denominator used in the relative error, so exact zeros on both
/// sides compare as equal instead of dividing by zero.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(input index, element index)` of the worst relative error.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences for every element of every input.
///
/// `f` must record its computation on the given tape and return a scalar.
///
/// The closure may use any error type that tensor errors convert into, so
/// operations defined in downstream crates can be checked directly.
pub fn check_gradients<F, E>(inputs: &[Tensor<f64>], eps: f64, f: F) -> std::result::Result<GradCheckReport, E>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    let eval = |vals: &[Tensor<f64>]| -> std::result::Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();

    let mut report = GradCheckReport { max_rel_err: 0.0, max_abs_err: 0.0, worst: (0, 0), checked: 0 };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let x0 = input.data()[j];
            probe[i].data_mut()[j] = x0 + eps;
            let fp = eval(&probe)?;
            probe[i].data_mut()[j] = x0 - eps;
            let fm = eval(&probe)?;
            probe[i].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[i].data()[j];
            let r = rel_err(a, numeric);
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if r > report.max_rel_err {
                report.max_rel_err = r;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
